//! JSON export of a composite coin. Shard states are included because the
//! simulator has no other way to hand a quantum state between processes.

use num_complex::Complex64;
use qbtc_core::protocol::{QuantumBitcoin, QuantumShard};
use qbtc_core::sigs::Signature;
use qbtc_core::{QuantumState, Serial};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardFile {
    pub serial: String,
    pub signature: Signature,
    pub mint_time: u64,
    /// Nonzero amplitudes as `(index, re, im)`.
    pub state: Vec<(u32, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoinFile {
    pub descriptor: String,
    pub descriptor_signature: Signature,
    pub shards: Vec<ShardFile>,
}

impl CoinFile {
    pub fn from_coin(coin: &QuantumBitcoin) -> Self {
        Self {
            descriptor: hex::encode(coin.descriptor()),
            descriptor_signature: coin.descriptor_signature.clone(),
            shards: coin
                .shards
                .iter()
                .map(|s| ShardFile {
                    serial: s.serial.to_hex(),
                    signature: s.signature.clone(),
                    mint_time: s.mint_time,
                    state: s
                        .state
                        .amplitudes()
                        .iter()
                        .enumerate()
                        .filter(|(_, a)| a.norm_sqr() > 0.0)
                        .map(|(i, a)| (i as u32, a.re, a.im))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain struct");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("coin file: {e}")))
    }

    /// Rebuilds the coin for an `n`-qubit scheme.
    pub fn into_coin(self, n: usize, serial_len: usize) -> Result<QuantumBitcoin, CliError> {
        let mut shards = Vec::with_capacity(self.shards.len());
        for (i, s) in self.shards.into_iter().enumerate() {
            let bad = |what: String| CliError::Parse(format!("shard {i}: {what}"));
            let serial = Serial::from_hex(serial_len, &s.serial).map_err(|e| bad(e.to_string()))?;
            let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
            for (idx, re, im) in s.state {
                let slot = amps
                    .get_mut(idx as usize)
                    .ok_or_else(|| bad(format!("amplitude index {idx} out of range")))?;
                *slot = Complex64::new(re, im);
            }
            let state = QuantumState::from_amplitudes(n, amps).map_err(|e| bad(e.to_string()))?;
            shards.push(QuantumShard {
                serial,
                state,
                signature: s.signature,
                mint_time: s.mint_time,
            });
        }
        let coin = QuantumBitcoin {
            shards,
            descriptor_signature: self.descriptor_signature,
        };
        if hex::encode(coin.descriptor()) != self.descriptor.to_ascii_lowercase() {
            return Err(CliError::Parse(
                "descriptor does not match the shard serials".into(),
            ));
        }
        Ok(coin)
    }
}
