//! Central finite-difference check of analytic gradients.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamGroup};
use super::EncoderModel;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub entries: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// checked entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares `objective`'s gradient with central differences for every
/// trainable tensor. Tensors larger than `per_tensor` are subsampled.
pub fn check_gradients(
    model: &EncoderModel,
    objective: &dyn Fn(&EncoderModel) -> Result<(f64, Gradients)>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<Vec<GroupCheck>> {
    let (_, grads) = objective(model)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // group -> (sum (a-n)^2, sum a^2, sum n^2, count)
    let mut acc: BTreeMap<usize, (ParamGroup, f64, f64, f64, usize)> = BTreeMap::new();
    for id in model.params().trainable_ids() {
        let t = model.params().tensor(id);
        let n = t.numel();
        let idx: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        };
        let slot = ParamGroup::ALL.iter().position(|&g| g == t.group).expect("known group");
        let e = acc.entry(slot).or_insert((t.group, 0.0, 0.0, 0.0, 0));
        for i in idx {
            let orig = t.data[i];
            probe.params_mut().tensor_mut(id).data[i] = orig + eps;
            let plus = objective(&probe)?.0;
            probe.params_mut().tensor_mut(id).data[i] = orig - eps;
            let minus = objective(&probe)?.0;
            probe.params_mut().tensor_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id)[i];
            e.1 += (analytic - numeric).powi(2);
            e.2 += analytic * analytic;
            e.3 += numeric * numeric;
            e.4 += 1;
        }
    }
    Ok(acc
        .into_values()
        .map(|(group, diff, a, n, entries)| {
            let denom = a.sqrt().max(n.sqrt());
            GroupCheck {
                group,
                entries,
                rel_error: if denom > 0.0 { diff.sqrt() / denom } else { 0.0 },
                analytic_norm: a.sqrt(),
            }
        })
        .collect())
}
