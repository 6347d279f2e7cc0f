use serde::{Deserialize, Serialize};

use super::DataError;

/// Token id reserved for missing entries.
pub const MASK_TOKEN: u32 = 0;

/// Fixed-grid tokenizer for real values in `[-10, 10]` with step `0.01`.
///
/// Value ids ascend with the value: `-10.00 -> 1`, `0.00 -> 1001`,
/// `10.00 -> 2001`; id `0` is the mask token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer;

impl Tokenizer {
    pub const MIN_VALUE: f64 = -10.0;
    pub const MAX_VALUE: f64 = 10.0;
    /// Grid points per unit (step `0.01`).
    pub const SCALE: i64 = 100;
    /// Number of value tokens on the grid.
    pub const VALUE_TOKENS: u32 = 2001;
    pub const VOCAB_SIZE: usize = Self::VALUE_TOKENS as usize + 1;
    const OFFSET: i64 = 1001;

    /// Human-readable description stored in checkpoint manifests.
    pub const CONVENTION: &'static str = "grid[-10,10] step 0.01; id = round(100 v) + 1001; MASK = 0";

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn encode(&self, value: f64) -> Result<u32, DataError> {
        if !value.is_finite() {
            return Err(DataError::OutOfRange { value });
        }
        let grid = (value * Self::SCALE as f64).round() as i64;
        let id = grid + Self::OFFSET;
        if !(1..=Self::VALUE_TOKENS as i64).contains(&id) {
            return Err(DataError::OutOfRange { value });
        }
        Ok(id as u32)
    }

    pub fn decode(&self, id: u32) -> Result<f64, DataError> {
        if id == MASK_TOKEN || id > Self::VALUE_TOKENS {
            return Err(DataError::UnknownToken { id });
        }
        Ok((id as i64 - Self::OFFSET) as f64 / Self::SCALE as f64)
    }

    /// Row-major token sequence of `values` with masked positions set to
    /// [`MASK_TOKEN`]; `observed[k]` marks position `k` as observed.
    pub fn encode_masked(&self, values: &[f64], observed: &[bool]) -> Result<Vec<u32>, DataError> {
        values
            .iter()
            .zip(observed)
            .map(|(&v, &o)| if o { self.encode(v) } else { Ok(MASK_TOKEN) })
            .collect()
    }
}

/// Rounds to the tokenizer grid (two decimals).
pub fn round2(value: f64) -> f64 {
    (value * Tokenizer::SCALE as f64).round() / Tokenizer::SCALE as f64
}
