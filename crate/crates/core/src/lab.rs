//! Ground-truth access for experiments and debugging.
//!
//! Everything here reads registry internals or copies quantum states,
//! which no honest participant can do. Protocol code never calls into
//! this module.

use serde::{Deserialize, Serialize};

use crate::gf2::BitVec;
use crate::gf2::Subspace;
use crate::minischeme::{mint_m_with_key, MiniCoin, MiniError, OracleRegistry, Serial};
use crate::qsim::{self, QuantumState};

/// The hidden subspace behind a registered serial.
pub fn registered_subspace(registry: &OracleRegistry, serial: &Serial) -> Option<Subspace> {
    registry.lookup_registered(serial).map(|r| r.subspace)
}

/// A freshly prepared copy of the genuine state for `serial`.
pub fn prepare_genuine_state(registry: &OracleRegistry, serial: &Serial) -> Option<QuantumState> {
    registered_subspace(registry, serial).and_then(|a| qsim::build_subspace_state(&a).ok())
}

/// Mints like `mint_m` but also returns the secret key, which is what a
/// dishonest miner would keep to replay the mint later.
pub fn mint_m_recording<R: rand::Rng + ?Sized>(
    registry: &OracleRegistry,
    rng: &mut R,
) -> Result<(MiniCoin, BitVec), MiniError> {
    mint_m_with_key(registry, rng)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExportLine {
    serial: String,
    rows: Vec<String>,
}

/// JSON-lines of `(serial-hex, basis rows)`, sorted by serial.
pub fn export_registry(registry: &OracleRegistry) -> String {
    let mut out = String::new();
    for (serial, subspace) in registry.all_registered() {
        let line = ExportLine {
            serial: serial.to_hex(),
            rows: subspace.to_hex_rows().lines().map(str::to_string).collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain struct"));
        out.push('\n');
    }
    out
}

/// Rebuilds a registry from [`export_registry`] output.
pub fn import_registry(n: usize, seed: [u8; 32], text: &str) -> Result<OracleRegistry, MiniError> {
    let registry = OracleRegistry::new(n, seed)?;
    for (lineno, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let parsed: ExportLine = serde_json::from_str(line)
            .map_err(|e| MiniError::Format(format!("line {}: {e}", lineno + 1)))?;
        let serial = Serial::from_hex(registry.serial_len(), &parsed.serial)?;
        let subspace = Subspace::from_hex_rows(n, &parsed.rows.join("\n"))?;
        if 2 * subspace.dim() != n {
            return Err(MiniError::Format(format!(
                "line {}: subspace has dimension {}",
                lineno + 1,
                subspace.dim()
            )));
        }
        registry.insert_registered(serial, subspace);
    }
    Ok(registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minischeme::{mint_m, verify_m};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn export_import_preserves_verification() {
        let reg = OracleRegistry::from_u64_seed(6, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coins: Vec<_> = (0..5).map(|_| mint_m(&reg, &mut rng).unwrap()).collect();
        let text = export_registry(&reg);
        assert_eq!(text.lines().count(), 5);
        let copy = import_registry(6, reg.genesis_seed(), &text).unwrap();
        for c in &coins {
            assert!(verify_m(&copy, &c.serial, &c.state).accepted());
            assert_eq!(
                registered_subspace(&copy, &c.serial),
                registered_subspace(&reg, &c.serial)
            );
        }
        assert_eq!(export_registry(&copy), text);
        assert!(import_registry(6, reg.genesis_seed(), "{not json").is_err());
    }

    #[test]
    fn recorded_key_replays_the_same_state() {
        let reg = OracleRegistry::from_u64_seed(8, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (coin, key) = mint_m_recording(&reg, &mut rng).unwrap();
        let (serial, a) = reg.generate_state(&key).unwrap();
        assert_eq!(serial, coin.serial);
        let replayed = qsim::build_subspace_state(&a).unwrap();
        assert_eq!(replayed, coin.state);
    }
}
