use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Frame positions replaced by the mask embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    masked_positions: Vec<usize>,
    seq_len: usize,
}

impl MaskSpec {
    pub fn new(mut positions: Vec<usize>, seq_len: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.last() {
            if p >= seq_len {
                return Err(Error::invalid(format!(
                    "mask position {p} outside sequence of length {seq_len}"
                )));
            }
        }
        Ok(Self {
            masked_positions: positions,
            seq_len,
        })
    }

    pub fn empty(seq_len: usize) -> Self {
        Self {
            masked_positions: Vec::new(),
            seq_len,
        }
    }

    /// Sorted, unique.
    pub fn positions(&self) -> &[usize] {
        &self.masked_positions
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.masked_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_positions.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.masked_positions.binary_search(&t).is_ok()
    }

    pub fn indicator(&self) -> Vec<bool> {
        let mut flags = vec![false; self.seq_len];
        for &p in &self.masked_positions {
            flags[p] = true;
        }
        flags
    }
}

/// Span masking: every frame starts a span with probability
/// `mask_start_prob`; a span covers `mask_span` frames, clipped at `t`.
pub fn sample_mask(t: usize, cfg: &ModelConfig, seed: u64) -> MaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(t, cfg.mask_span, cfg.mask_start_prob, &mut rng)
}

pub(crate) fn sample_mask_with(t: usize, span: usize, start_prob: f64, rng: &mut impl Rng) -> MaskSpec {
    let mut flags = vec![false; t];
    for start in 0..t {
        if rng.random::<f64>() < start_prob {
            for f in flags.iter_mut().skip(start).take(span) {
                *f = true;
            }
        }
    }
    MaskSpec {
        masked_positions: flags
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect(),
        seq_len: t,
    }
}

/// Like [`sample_mask`] but guarantees at least one span so the
/// masked-prediction loss is defined.
pub fn sample_nonempty_mask(t: usize, cfg: &ModelConfig, seed: u64) -> MaskSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = sample_mask_with(t, cfg.mask_span, cfg.mask_start_prob, &mut rng);
    if !mask.is_empty() || t == 0 {
        return mask;
    }
    let start = rng.random_range(0..t);
    MaskSpec {
        masked_positions: (start..(start + cfg.mask_span.max(1)).min(t)).collect(),
        seq_len: t,
    }
}
