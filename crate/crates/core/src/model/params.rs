//! Named parameter registry and matching gradient buffers.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Cnn,
    FeatureProjection,
    MaskEmbedding,
    Transformer,
    PredictorProjection,
    UnitEmbeddings,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Cnn,
        ParamGroup::FeatureProjection,
        ParamGroup::MaskEmbedding,
        ParamGroup::Transformer,
        ParamGroup::PredictorProjection,
        ParamGroup::UnitEmbeddings,
        ParamGroup::Classifier,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
    pub trainable: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension by the product of the rest.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let rows = self.shape.first().copied().unwrap_or(1);
        let cols = self.shape.iter().skip(1).product::<usize>().max(1);
        if self.shape.len() <= 1 {
            (1, rows)
        } else {
            (rows, cols)
        }
    }
}

/// Registry of every model tensor. Values are kept exactly representable in
/// f32 (see [`ParamStore::round_to_storage`]) so checkpoints are lossless.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {shape:?} but {} values",
                data.len()
            )));
        }
        let data = data.into_iter().map(|v| v as f32 as f64).collect();
        self.tensors.push(Tensor {
            name,
            shape,
            data,
            group,
            trainable: true,
        });
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id.0];
        ArrayView2::from_shape(t.matrix_dims(), &t.data).expect("contiguous tensor")
    }

    pub fn vec(&self, id: ParamId) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[id.0].data[..])
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for t in self.tensors.iter_mut().filter(|t| t.group == group) {
            t.trainable = trainable;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.tensor(id).trainable).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Snaps every value to the nearest f32.
    pub fn round_to_storage(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("parameter `{}` is not finite", t.name)));
            }
        }
        Ok(())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    data: Vec<Vec<f64>>,
    dims: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            data: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            dims: store.tensors.iter().map(Tensor::matrix_dims).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape(self.dims[id.0], &mut self.data[id.0]).expect("contiguous grad")
    }

    pub fn vec_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[id.0][..])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            a.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .flat_map(|id| self.data[id.0].iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
