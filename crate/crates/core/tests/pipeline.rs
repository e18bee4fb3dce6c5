use qbtc_core::ledger::{EntryTag, LedgerEntry, LedgerError};
use qbtc_core::minischeme::{verify_m, OracleRegistry};
use qbtc_core::protocol::{mint_bitcoin, mint_shard, verify_q, Marketplace, ProtocolConfig, Vault};
use qbtc_core::simnet::{run_honest_network, SimConfig};
use qbtc_core::{lab, qsim, Chain, ChainParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mint_and_verify_many(n: usize, m: usize, cycles: usize, coins_per_registry: usize) {
    let config = ProtocolConfig {
        n,
        m,
        ..ProtocolConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64((n * 100 + m) as u64);
    let mut done = 0;
    let mut batch = 0u64;
    while done < cycles {
        let registry = OracleRegistry::from_u64_seed(n, batch).unwrap();
        let mut chain = Chain::new(ChainParams::default()).unwrap();
        let mut market = Marketplace::new();
        let mut vault = Vault::new();
        let mut now = 0;
        for _ in 0..coins_per_registry.min(cycles - done) {
            for _ in 0..m {
                now += 1;
                mint_shard(&mut chain, &registry, &config, &mut market, now, &mut rng).unwrap();
            }
            now += 1;
            let token = mint_bitcoin(
                &mut chain,
                &registry,
                &config,
                &mut market,
                &mut vault,
                "owner",
                now,
                &mut rng,
            )
            .unwrap();
            let coin = vault.coin(&token).unwrap();
            for shard in &coin.shards {
                let p = verify_m(&registry, &shard.serial, &shard.state).probability();
                assert!(
                    (1.0 - p).abs() < 1e-12,
                    "n={n} m={m}: shard probability {p}"
                );
            }
            let report = verify_q(&chain, &registry, &config, coin, &mut rng);
            assert!(report.accepted, "n={n} m={m}: {report:?}");
            assert_eq!(report.passed, m);
            done += 1;
        }
        chain.audit().unwrap();
        batch += 1;
    }
}

#[test]
fn composite_completeness_small_keys() {
    mint_and_verify_many(4, 3, 1000, 4);
    mint_and_verify_many(4, 7, 1000, 2);
}

#[test]
fn composite_completeness_n8() {
    mint_and_verify_many(8, 3, 1000, 50);
    mint_and_verify_many(8, 7, 1000, 25);
}

#[test]
fn recorded_key_reproduces_the_shard_bit_for_bit() {
    let registry = OracleRegistry::from_u64_seed(8, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (coin, key) = lab::mint_m_recording(&registry, &mut rng).unwrap();
        let (serial, subspace) = registry.generate_state(&key).unwrap();
        assert_eq!(serial, coin.serial);
        let again = qsim::build_subspace_state(&subspace).unwrap();
        assert_eq!(again.amplitudes(), coin.state.amplitudes());
    }
}

#[test]
fn simulated_chain_survives_persistence() {
    let cfg = SimConfig {
        protocol: ProtocolConfig {
            n: 6,
            m: 3,
            t_max: 90,
            t_block: 15,
            seed: 9,
            ..ProtocolConfig::default()
        },
        miners: 3,
        duration: 3000,
        initial_block_ticks: 15,
        retarget_interval: 8,
        propagation_delay: 2,
        ..SimConfig::default()
    };
    let run = run_honest_network(&cfg).unwrap();
    assert!(run.chain.height() > 50);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.log");
    run.chain
        .write_log(std::fs::File::create(&path).unwrap())
        .unwrap();
    let back = Chain::read_log(std::fs::File::open(&path).unwrap()).unwrap();
    back.audit().unwrap();
    assert_eq!(back.tip().pow_hash, run.chain.tip().pow_hash);
    assert_eq!(back.to_log_bytes(), run.chain.to_log_bytes());

    let jsonl = run.chain.to_jsonl();
    let from_json = Chain::from_jsonl(&jsonl).unwrap();
    assert_eq!(from_json.to_log_bytes(), run.chain.to_log_bytes());

    for block in run.chain.active_blocks() {
        for entry in &block.entries {
            let hit = back.lookup(entry.tag, &entry.serial_key).unwrap();
            assert_eq!(hit.public_key, entry.public_key);
            let again = LedgerEntry::new(entry.tag, entry.serial_key.clone(), vec![0; 4]);
            assert!(matches!(
                back.check_append(&again),
                Err(LedgerError::DuplicateSerial { .. } | LedgerError::DescriptorConflict(_))
            ));
        }
    }
    assert_eq!(back.count_active(EntryTag::Bitcoin), run.tokens.len());
}
