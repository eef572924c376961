use crate::error::{Error, Result};
use crate::model::{Gradients, ParamGroup, ParamId, ParamStore};

/// Bias-corrected Adam over a fixed set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    params: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Optimizes every tensor currently flagged trainable.
    pub fn new(store: &ParamStore) -> Self {
        Self::for_params(store, store.trainable_ids())
    }

    pub fn for_params(store: &ParamStore, params: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.tensor(*id).numel()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn covers_group(&self, store: &ParamStore, group: ParamGroup) -> bool {
        self.params.iter().any(|&id| store.tensor(id).group == group)
    }
}

/// One Adam update. A non-finite gradient aborts the step before any
/// parameter changes and names the offending tensor.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    for &id in &state.params {
        if grads.get(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter `{}`",
                store.tensor(id).name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, &id) in state.params.iter().enumerate() {
        let g = grads.get(id);
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let p = &mut store.tensor_mut(id).data;
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.register("p", vec![n], values, ParamGroup::Transformer).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, _) = store(vec![0.5, -0.25]);
        let before = s.clone();
        let g = Gradients::zeros_like(&s);
        let mut st = AdamState::new(&s);
        for _ in 0..5 {
            adam_step(&mut s, &g, &mut st, 1e-3).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(vec![0.0]);
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id)[0] = 1.0;
        let mut st = AdamState::new(&s);
        let lr = 1e-3;
        adam_step(&mut s, &g, &mut st, lr).unwrap();
        let expected = -lr / (1.0 + 1e-8);
        assert!((s.tensor(id).data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_share_trajectory() {
        let (mut s, id) = store(vec![0.3, 0.3]);
        let mut st = AdamState::new(&s);
        for k in 0..20 {
            let mut g = Gradients::zeros_like(&s);
            let v = (k as f64 * 0.7).sin();
            g.get_mut(id).copy_from_slice(&[v, v]);
            adam_step(&mut s, &g, &mut st, 1e-2).unwrap();
        }
        let d = &s.tensor(id).data;
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let (mut s, id) = store(vec![1.0]);
        let before = s.clone();
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id)[0] = f64::NAN;
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &g, &mut st, 1e-3).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
        assert_eq!(s, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_group_is_excluded() {
        let mut s = ParamStore::new();
        s.register("cnn", vec![1], vec![1.0], ParamGroup::Cnn).unwrap();
        s.register("t", vec![1], vec![1.0], ParamGroup::Transformer).unwrap();
        s.set_group_trainable(ParamGroup::Cnn, false);
        let st = AdamState::new(&s);
        assert!(!st.covers_group(&s, ParamGroup::Cnn));
        assert!(st.covers_group(&s, ParamGroup::Transformer));
    }
}
