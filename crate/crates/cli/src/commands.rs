use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use qbtc_core::analytics::{self, LongevityConfig, LongevityMode};
use qbtc_core::ledger::LedgerError;
use qbtc_core::minischeme::OracleRegistry;
use qbtc_core::protocol::{mint_bitcoin, mint_shard, verify_q, Marketplace, Vault};
use qbtc_core::simnet::{self, AttackConfig, EventKind, SimConfig, SimError};
use qbtc_core::{lab, Chain, ChainParams, EntryTag, ProtocolConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::coinfile::CoinFile;
use crate::error::CliError;
use crate::manifest::{self, Outputs, RunManifest};
use crate::{Cli, Command, Common, Format, LongevityModeArg};

const DEFAULT_TRIALS: u64 = 1_000_000;
const DEFAULT_ROUNDS: u64 = 10_000;

pub fn run(cli: Cli, raw: &[String]) -> Result<(), CliError> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli.common.out_dir);
    }
    let base = match &cli.common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(CliError::io(path))?;
            ProtocolConfig::parse(&text)?
        }
        None => ProtocolConfig::default(),
    };
    let (_, soft) = execute(&cli, base, manifest::replayable_args(raw))?;
    soft.map_or(Ok(()), Err)
}

fn resolve(common: &Common, mut cfg: ProtocolConfig) -> ProtocolConfig {
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.n {
        cfg.n = v;
    }
    if let Some(v) = common.m {
        cfg.m = v;
    }
    if let Some(v) = common.t_max {
        cfg.t_max = v;
    }
    if let Some(v) = common.t_block {
        cfg.t_block = v;
    }
    if let Some(v) = common.lambda {
        cfg.lambda = Some(v);
    }
    if let Some(v) = common.epsilon {
        cfg.epsilon = v;
    }
    cfg
}

/// Runs one command and writes its manifest. A rejected coin still
/// produces a manifest and comes back as the second element.
fn execute(
    cli: &Cli,
    base: ProtocolConfig,
    args: Vec<String>,
) -> Result<(RunManifest, Option<CliError>), CliError> {
    let cfg = resolve(&cli.common, base);
    let common = &cli.common;
    let mut out = Outputs::new(&common.out_dir)?;
    let (name, outcome) = match &cli.command {
        Command::Mint { count } => ("mint", mint(&cfg, &mut out, *count)),
        Command::Verify {
            chain,
            coin,
            registry,
        } => (
            "verify",
            verify(&cfg, &mut out, chain, coin, registry.as_deref()),
        ),
        Command::Simulate {
            miners,
            duration,
            blocks,
            delay,
            hashes_per_tick,
            block_ticks,
            retarget_interval,
            no_mint,
        } => {
            let sim = SimConfig {
                protocol: cfg.clone(),
                miners: *miners,
                duration: *duration,
                max_blocks: *blocks,
                hashes_per_tick: *hashes_per_tick,
                initial_block_ticks: block_ticks.unwrap_or(cfg.t_block),
                retarget_interval: *retarget_interval,
                propagation_delay: *delay,
                mint: !no_mint,
            };
            ("simulate", simulate(&sim, &mut out))
        }
        Command::Attack { wins_needed, trace } => (
            "attack",
            attack(&cfg, common, &mut out, *wins_needed, *trace),
        ),
        Command::Bound { ks, gammas, ps } => {
            ("bound", bound(&cfg, common, &mut out, ks, gammas, ps))
        }
        Command::Longevity { mode, wear_out } => (
            "longevity",
            longevity(&cfg, common, &mut out, *mode, *wear_out),
        ),
        Command::Inspect {
            coin,
            chain,
            states,
        } => (
            "inspect",
            inspect(&cfg, &mut out, coin.as_deref(), chain.as_deref(), *states),
        ),
        Command::DumpChain { chain, from_jsonl } => {
            ("dump-chain", dump_chain(&mut out, chain, *from_jsonl))
        }
        Command::Replay { .. } => {
            return Err(CliError::Config("a replay cannot be replayed".into()))
        }
    };
    let soft = match outcome {
        Ok(()) => None,
        Err(e @ CliError::Rejected(_)) => Some(e),
        Err(e) => return Err(e),
    };
    let manifest = out.finish(name, args, &cfg)?;
    Ok((manifest, soft))
}

fn replay(manifest_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let original = RunManifest::read(manifest_path)?;
    let source_dir = manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let same = match (source_dir.canonicalize(), out_dir.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err(CliError::Config(
            "replay needs an --out-dir other than the original run's".into(),
        ));
    }
    let mut argv = vec!["qbtc".to_string()];
    argv.extend(original.args.iter().cloned());
    argv.push("--out-dir".into());
    argv.push(out_dir.display().to_string());
    let cli = Cli::try_parse_from(argv)
        .map_err(|e| CliError::Parse(format!("manifest arguments: {e}")))?;
    let (replayed, _) = execute(&cli, original.config.clone(), original.args.clone())?;
    let diffs = manifest::compare(&original, &replayed);
    if diffs.is_empty() {
        println!(
            "replay of {} matches: {} output files identical",
            original.command,
            original.outputs.len()
        );
        Ok(())
    } else {
        Err(CliError::ReplayMismatch(diffs.join("; ")))
    }
}

fn chain_params(cfg: &ProtocolConfig) -> ChainParams {
    ChainParams {
        target_block_time: cfg.t_block,
        ..ChainParams::default()
    }
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data");
    s.push('\n');
    s
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn read_chain(path: &Path) -> Result<Chain, CliError> {
    let file = fs::File::open(path).map_err(CliError::io(path))?;
    Chain::read_log(std::io::BufReader::new(file)).map_err(|e| match e {
        LedgerError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::Parse(format!("{}: {other}", path.display())),
    })
}

fn write_chain(out: &mut Outputs, chain: &Chain) -> Result<(), CliError> {
    let log = chain.to_log_bytes();
    out.write("chain.log", &log)?;
    out.chain_hash = Some(manifest::sha256_hex(&log));
    out.end_tick = chain.tip().timestamp;
    Ok(())
}

fn mint(cfg: &ProtocolConfig, out: &mut Outputs, count: usize) -> Result<(), CliError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let registry = OracleRegistry::from_u64_seed(cfg.n, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut chain = Chain::new(chain_params(cfg)).map_err(internal)?;
    let mut market = Marketplace::new();
    let mut vault = Vault::new();
    let mut now = 0;
    let mut coins = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..cfg.m {
            now += cfg.t_block;
            mint_shard(&mut chain, &registry, cfg, &mut market, now, &mut rng)?;
        }
        now += cfg.t_block;
        let token = mint_bitcoin(
            &mut chain,
            &registry,
            cfg,
            &mut market,
            &mut vault,
            "minter",
            now,
            &mut rng,
        )?;
        coins.push(CoinFile::from_coin(vault.coin(&token)?));
    }
    for (i, coin) in coins.iter().enumerate() {
        out.write(&format!("coin-{i:03}.json"), coin.to_json().as_bytes())?;
        println!("coin {i}: descriptor {}", coin.descriptor);
    }
    write_chain(out, &chain)?;
    out.write("registry.jsonl", lab::export_registry(&registry).as_bytes())?;
    out.write("config.txt", cfg.to_text().as_bytes())?;
    println!("minted {count} coin(s); chain height {}", chain.height());
    Ok(())
}

fn verify(
    cfg: &ProtocolConfig,
    out: &mut Outputs,
    chain_path: &Path,
    coin_path: &Path,
    registry_path: Option<&Path>,
) -> Result<(), CliError> {
    cfg.validate()?;
    let chain = read_chain(chain_path)?;
    let registry_path: PathBuf = registry_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| chain_path.with_file_name("registry.jsonl"));
    let text = fs::read_to_string(&registry_path).map_err(CliError::io(&registry_path))?;
    let genesis = OracleRegistry::from_u64_seed(cfg.n, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?
        .genesis_seed();
    let registry = lab::import_registry(cfg.n, genesis, &text)
        .map_err(|e| CliError::Parse(format!("{}: {e}", registry_path.display())))?;
    let coin_text = fs::read_to_string(coin_path).map_err(CliError::io(coin_path))?;
    let mut coin = CoinFile::parse(&coin_text)?.into_coin(cfg.n, registry.serial_len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = verify_q(&chain, &registry, cfg, &mut coin, &mut rng);
    out.write("verify-report.json", pretty(&report).as_bytes())?;
    if report.accepted {
        println!(
            "accepted: {}/{} shards passed (need {})",
            report.passed,
            coin.shards.len(),
            report.threshold
        );
        Ok(())
    } else {
        let stage = report
            .rejected_at
            .map(|s| s.to_string())
            .unwrap_or_else(|| "quantum".into());
        println!(
            "rejected at {stage} stage: {}/{} shards passed (need {})",
            report.passed,
            coin.shards.len(),
            report.threshold
        );
        Err(CliError::Rejected(stage))
    }
}

fn simulate(sim: &SimConfig, out: &mut Outputs) -> Result<(), CliError> {
    let run = simnet::run_honest_network(sim).map_err(|e| match e {
        SimError::Config(msg) => CliError::Config(msg),
        SimError::Protocol(p) => p.into(),
        other => internal(other),
    })?;
    let count = |kind| run.events.iter().filter(|e| e.kind == kind).count();
    let summary = json!({
        "height": run.chain.height(),
        "blocks_total": run.chain.all_blocks().len(),
        "orphaned": run.chain.all_blocks().len() as u64 - run.chain.height() - 1,
        "blocks_found": count(EventKind::BlockFound),
        "shards_published": count(EventKind::ShardPublished),
        "coins_minted": count(EventKind::CoinMinted),
        "shard_entries": run.chain.count_active(EntryTag::Shard),
        "coin_entries": run.chain.count_active(EntryTag::Bitcoin),
        "mean_block_interval": run.mean_block_interval(0),
        "event_log_sha256": run.log_hash(),
        "config_hash": simnet::config_hash(sim),
        "seed": sim.protocol.seed,
    });
    write_chain(out, &run.chain)?;
    out.write("events.jsonl", run.events_jsonl().as_bytes())?;
    out.write("summary.json", pretty(&summary).as_bytes())?;
    println!(
        "height {} after tick {}; {} coins, mean block interval {}",
        run.chain.height(),
        run.chain.tip().timestamp,
        summary["coins_minted"],
        summary["mean_block_interval"]
    );
    Ok(())
}

fn attack(
    cfg: &ProtocolConfig,
    common: &Common,
    out: &mut Outputs,
    wins_needed: Option<u64>,
    trace: Option<u64>,
) -> Result<(), CliError> {
    let p = common
        .p
        .ok_or_else(|| CliError::Config("attack needs --p".into()))?;
    let mut attack = AttackConfig::from_protocol(cfg, p, common.trials.unwrap_or(DEFAULT_TRIALS));
    attack.shard_wins_needed = wins_needed;
    let to_cli = |e: SimError| match e {
        SimError::Config(msg) => CliError::Config(msg),
        other => internal(other),
    };
    let report = simnet::run_reuse_attack_trials(&attack).map_err(to_cli)?;
    match common.format {
        Format::Json => out.write("attack.json", pretty(&report).as_bytes())?,
        Format::Csv => out.write(
            "attack.csv",
            format!("{}\n{}\n", simnet::ATTACK_CSV_HEADER, report.csv()).as_bytes(),
        )?,
    };
    if let Some(n) = trace {
        let events = simnet::trace_attack_trials(&attack, n).map_err(to_cli)?;
        out.write(
            "attack-trace.jsonl",
            simnet::events_jsonl(&events).as_bytes(),
        )?;
    }
    let bound = report
        .bound
        .map_or("n/a (gamma outside (1/k, 1])".to_string(), |b| {
            format!("{b:.6e}")
        });
    println!(
        "k={} m={} gamma={:.4} p={}: measured {:.6e} ({} of {}), bound {bound}, exact-pattern {:.6e} vs eta {:.6e}",
        report.k,
        report.m,
        report.gamma,
        report.p,
        report.measured_rate,
        report.successes,
        report.trials,
        report.exact_pattern_rate,
        report.analytic_eta
    );
    if let Some(limit) = report.p_limit.filter(|_| !report.admissible) {
        println!("note: p is not below the admissible limit {limit:.4}; the bound is not guaranteed here");
    }
    Ok(())
}

fn bound(
    cfg: &ProtocolConfig,
    common: &Common,
    out: &mut Outputs,
    ks: &[u64],
    gammas: &[f64],
    ps: &[f64],
) -> Result<(), CliError> {
    let ps = common.p.map(|p| vec![p]).unwrap_or_else(|| ps.to_vec());
    let rows = analytics::sweep(ks, gammas, &ps, cfg.epsilon)
        .map_err(|e| CliError::Config(e.to_string()))?;
    match common.format {
        Format::Json => out.write("bound.json", pretty(&rows).as_bytes())?,
        Format::Csv => out.write("bound.csv", analytics::sweep_csv(&rows).as_bytes())?,
    };
    for &gamma in gammas {
        if let Some(row) = rows
            .iter()
            .find(|r| r.gamma == gamma || (r.gamma - gamma).abs() < 1e-9)
        {
            println!("gamma {gamma}: p limit {:.4}", row.p_limit);
        }
    }
    println!(
        "{} grid points, {} admissible",
        rows.len(),
        rows.iter().filter(|r| r.admissible).count()
    );
    Ok(())
}

fn longevity(
    cfg: &ProtocolConfig,
    common: &Common,
    out: &mut Outputs,
    mode: LongevityModeArg,
    wear_out: f64,
) -> Result<(), CliError> {
    let registry = OracleRegistry::from_u64_seed(cfg.n, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coin = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let (mini, _) = lab::mint_m_recording(&registry, &mut rng)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let subspace = lab::registered_subspace(&registry, &mini.serial)
            .ok_or_else(|| internal("unregistered shard"))?;
        coin.push((subspace, mini.state));
    }
    let config = LongevityConfig {
        rounds: common.rounds.unwrap_or(DEFAULT_ROUNDS),
        epsilon: cfg.epsilon,
        mode: match mode {
            LongevityModeArg::Postselect => LongevityMode::Postselect,
            LongevityModeArg::Sample => LongevityMode::Sample,
        },
        wear_out_threshold: wear_out,
        seed: cfg.seed,
    };
    let report =
        analytics::run_longevity(coin, &config).map_err(|e| CliError::Config(e.to_string()))?;
    match common.format {
        Format::Json => out.write("longevity.json", pretty(&report).as_bytes())?,
        Format::Csv => {
            let mut csv = String::from("round,trace_distance\n");
            for (i, d) in report.trace_distances.iter().enumerate() {
                csv.push_str(&format!("{},{d:e}\n", i + 1));
            }
            out.write("longevity.csv", csv.as_bytes())?
        }
    };
    println!(
        "{} verifications, max distance {:.6e} (bound {:.6e}), cumulative {:.6e}, survived {} rounds",
        report.verifications, report.max_distance, report.bound, report.cumulative_distance, report.survived_rounds
    );
    Ok(())
}

fn inspect(
    cfg: &ProtocolConfig,
    out: &mut Outputs,
    coin: Option<&Path>,
    chain: Option<&Path>,
    states: bool,
) -> Result<(), CliError> {
    if coin.is_none() && chain.is_none() {
        return Err(CliError::Config(
            "inspect needs --coin and/or --chain".into(),
        ));
    }
    let mut summary = serde_json::Map::new();
    if let Some(path) = coin {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let file = CoinFile::parse(&text)?;
        let serial_len = OracleRegistry::from_u64_seed(cfg.n, cfg.seed)
            .map_err(|e| CliError::Config(e.to_string()))?
            .serial_len();
        let coin = file.clone().into_coin(cfg.n, serial_len)?;
        let shards: Vec<_> = coin
            .shards
            .iter()
            .map(|s| {
                json!({
                    "serial": s.serial.to_hex(),
                    "mint_time": s.mint_time,
                    "support": s.state.amplitudes().iter().filter(|a| a.norm_sqr() > 0.0).count(),
                    "norm_sqr": s.state.norm_sqr(),
                })
            })
            .collect();
        summary.insert(
            "coin".into(),
            json!({ "descriptor": file.descriptor, "shards": shards }),
        );
        if states {
            let mut dump = String::new();
            for (i, s) in coin.shards.iter().enumerate() {
                for line in s.state.dump_jsonl().lines() {
                    dump.push_str(&format!("{{\"shard\":{i},\"amplitude\":{line}}}\n"));
                }
            }
            print!("{dump}");
            out.write("states.jsonl", dump.as_bytes())?;
        }
    }
    if let Some(path) = chain {
        let chain = read_chain(path)?;
        let audited = chain.audit().map_err(|e| CliError::Parse(e.to_string()))?;
        summary.insert(
            "chain".into(),
            json!({
                "height": chain.height(),
                "blocks": chain.all_blocks().len(),
                "tip": hex::encode(chain.tip().pow_hash),
                "shard_entries": chain.count_active(EntryTag::Shard),
                "coin_entries": chain.count_active(EntryTag::Bitcoin),
                "audited_blocks": audited,
                "hash": chain.hash_name(),
            }),
        );
    }
    let text = pretty(&summary);
    if !states {
        print!("{text}");
    }
    out.write("inspect.json", text.as_bytes())?;
    Ok(())
}

fn dump_chain(out: &mut Outputs, path: &Path, from_jsonl: bool) -> Result<(), CliError> {
    if from_jsonl {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let chain = Chain::from_jsonl(&text)
            .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        write_chain(out, &chain)?;
        println!(
            "rebuilt {} blocks into {}",
            chain.all_blocks().len(),
            out.path("chain.log").display()
        );
    } else {
        let chain = read_chain(path)?;
        out.write("chain.jsonl", chain.to_jsonl().as_bytes())?;
        out.chain_hash = Some(manifest::sha256_hex(&chain.to_log_bytes()));
        out.end_tick = chain.tip().timestamp;
        println!(
            "wrote {} blocks to {}",
            chain.all_blocks().len(),
            out.path("chain.jsonl").display()
        );
    }
    Ok(())
}
