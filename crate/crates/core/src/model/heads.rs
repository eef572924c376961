//! Unit-prediction head (cosine-similarity softmax), task heads and losses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::layers::softmax_rows;
use super::mask::MaskSpec;
use crate::error::{Error, Result};
use crate::features::FrameFeatures;
use crate::units::UnitSequence;

/// Lower bound on the product of norms in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Owned copy of the predictor parameters: projection `W (hidden x proj)`,
/// unit embeddings `(k x proj)` and the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    pub projection: Array2<f64>,
    pub unit_embeddings: Array2<f64>,
    pub temperature: f64,
}

impl PredictorHead {
    pub fn new(projection: Array2<f64>, unit_embeddings: Array2<f64>, temperature: f64) -> Result<Self> {
        if projection.ncols() != unit_embeddings.ncols() || projection.ncols() == 0 {
            return Err(Error::shape(format!(
                "projection width {} vs unit embedding width {}",
                projection.ncols(),
                unit_embeddings.ncols()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(Self {
            projection,
            unit_embeddings,
            temperature,
        })
    }

    pub fn num_units(&self) -> usize {
        self.unit_embeddings.nrows()
    }

    /// `T x k` matrix of `softmax_c(cos(h_t W, e_c) / tau)`.
    pub fn unit_probs(&self, h: &FrameFeatures) -> Result<Array2<f64>> {
        if h.dim() != self.projection.nrows() {
            return Err(Error::shape(format!(
                "hidden states have dim {}, head expects {}",
                h.dim(),
                self.projection.nrows()
            )));
        }
        let projected = h.data.dot(&self.projection);
        let (mut logits, _) = cosine_logits(projected.view(), self.unit_embeddings.view(), self.temperature);
        softmax_rows(&mut logits);
        Ok(logits)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CosineTape {
    projected: Array2<f64>,
    embeddings: Array2<f64>,
    cos: Array2<f64>,
    denom: Array2<f64>,
    clamped: Array2<bool>,
    u_norm: Array1<f64>,
    e_norm: Array1<f64>,
}

/// `cos(u_t, e_c) / tau` with the norm product clamped below at [`COSINE_EPS`].
pub(crate) fn cosine_logits(
    projected: ArrayView2<'_, f64>,
    embeddings: ArrayView2<'_, f64>,
    temperature: f64,
) -> (Array2<f64>, CosineTape) {
    let u_norm = projected.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let e_norm = embeddings.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let dots = projected.dot(&embeddings.t());
    let (t, k) = dots.dim();
    let mut denom = Array2::zeros((t, k));
    let mut clamped = Array2::from_elem((t, k), false);
    let mut cos = Array2::zeros((t, k));
    for i in 0..t {
        for c in 0..k {
            let prod = u_norm[i] * e_norm[c];
            let (d, cl) = if prod < COSINE_EPS { (COSINE_EPS, true) } else { (prod, false) };
            denom[[i, c]] = d;
            clamped[[i, c]] = cl;
            cos[[i, c]] = dots[[i, c]] / d;
        }
    }
    let logits = cos.mapv(|v| v / temperature);
    (
        logits,
        CosineTape {
            projected: projected.to_owned(),
            embeddings: embeddings.to_owned(),
            cos,
            denom,
            clamped,
            u_norm,
            e_norm,
        },
    )
}

/// Gradients of the cosine logits with respect to the projected frames and
/// the unit embeddings.
pub(crate) fn cosine_backward(
    tape: &CosineTape,
    d_logits: ArrayView2<'_, f64>,
    temperature: f64,
) -> (Array2<f64>, Array2<f64>) {
    let d_cos = d_logits.mapv(|v| v / temperature);
    // A = dcos / denom; B = dcos * cos on unclamped entries
    let a = &d_cos / &tape.denom;
    let mut b = &d_cos * &tape.cos;
    b.zip_mut_with(&tape.clamped, |v, &cl| {
        if cl {
            *v = 0.0
        }
    });
    let mut du = a.dot(&tape.embeddings);
    let row_b = b.sum_axis(Axis(1));
    for ((mut row, u), (&rb, &n)) in du
        .rows_mut()
        .into_iter()
        .zip(tape.projected.rows())
        .zip(row_b.iter().zip(tape.u_norm.iter()))
    {
        if rb != 0.0 {
            row.scaled_add(-rb / (n * n), &u);
        }
    }
    let mut de = a.t().dot(&tape.projected);
    let col_b = b.sum_axis(Axis(0));
    for ((mut row, e), (&cb, &n)) in de
        .rows_mut()
        .into_iter()
        .zip(tape.embeddings.rows())
        .zip(col_b.iter().zip(tape.e_norm.iter()))
    {
        if cb != 0.0 {
            row.scaled_add(-cb / (n * n), &e);
        }
    }
    (du, de)
}

fn check_loss_shapes(rows: usize, targets: &UnitSequence, mask: &MaskSpec) -> Result<()> {
    if rows != targets.len() || mask.seq_len() != rows {
        return Err(Error::shape(format!(
            "{rows} prediction rows, {} targets, mask over {} frames",
            targets.len(),
            mask.seq_len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::invalid("masked-prediction loss is undefined for an empty mask"));
    }
    Ok(())
}

/// Mean negative log-probability of the target unit over masked frames only.
pub fn pretrain_loss(probs: &Array2<f64>, targets: &UnitSequence, mask: &MaskSpec) -> Result<f64> {
    check_loss_shapes(probs.nrows(), targets, mask)?;
    let k = probs.ncols();
    let mut total = 0.0;
    for &t in mask.positions() {
        let z = targets.units[t] as usize;
        if z >= k {
            return Err(Error::invalid(format!("target unit {z} outside [0, {k})")));
        }
        total -= probs[[t, z]].ln();
    }
    Ok(total / mask.len() as f64)
}

/// Loss and logit gradient from raw logits (log-softmax form).
pub(crate) fn masked_unit_loss_grad(
    logits: &Array2<f64>,
    targets: &UnitSequence,
    mask: &MaskSpec,
) -> Result<(f64, Array2<f64>)> {
    check_loss_shapes(logits.nrows(), targets, mask)?;
    let k = logits.ncols();
    let m = mask.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for &t in mask.positions() {
        let z = targets.units[t] as usize;
        if z >= k {
            return Err(Error::invalid(format!("target unit {z} outside [0, {k})")));
        }
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[z];
        let mut g = grad.row_mut(t);
        for c in 0..k {
            g[c] = (row[c] - lse).exp() / m;
        }
        g[z] -= 1.0 / m;
    }
    Ok((total / m, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Single-label classification.
    SoftmaxCe,
    /// Multi-label detection.
    SigmoidBce,
}

/// Mean over frames.
pub fn mean_pool(h: &FrameFeatures) -> Array1<f64> {
    h.data.mean_axis(Axis(0)).expect("at least one frame")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Cross-entropy of a single target class; returns loss and logit gradient.
pub fn softmax_cross_entropy(logits: ArrayView1<'_, f64>, target: usize) -> Result<(f64, Array1<f64>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "class {target} outside [0, {})",
            logits.len()
        )));
    }
    let p = softmax(logits);
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Binary cross-entropy with logits, averaged over classes.
pub fn sigmoid_bce(logits: ArrayView1<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let c = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for i in 0..logits.len() {
        let (x, y) = (logits[i], targets[i]);
        loss += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad[i] = (sigmoid(x) - y) / c;
    }
    Ok((loss / c, grad))
}
