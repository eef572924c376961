//! CNN frontend, transformer encoder, masking, predictor and task heads.
//!
//! Raw 16 kHz audio goes through a strided convolution stack (cumulative
//! stride 320, 50 frames/s), a layer norm and a linear projection to the
//! model width. Masked frames are then replaced by a learned embedding,
//! sinusoidal positions are added, and a pre-norm transformer produces the
//! hidden states. Every operation has a hand-written backward pass.

mod gradcheck;
mod heads;
mod layers;
mod mask;
mod params;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use gradcheck::{check_gradients, GroupCheck};
pub use heads::{
    mean_pool, pretrain_loss, sigmoid, sigmoid_bce, softmax, softmax_cross_entropy, HeadMode,
    PredictorHead, COSINE_EPS,
};
pub use layers::{gelu, sinusoidal_positions};
pub use mask::{sample_mask, sample_nonempty_mask, MaskSpec};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore, Tensor};

use heads::{cosine_backward, cosine_logits, masked_unit_loss_grad, CosineTape};
use layers::{gelu_grad, softmax_rows, Conv1d, Conv1dTape, LayerNorm, LayerNormTape, Linear};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::FrameFeatures;
use crate::units::UnitSequence;

pub const MODEL_SAMPLE_RATE: u32 = 16_000;
pub const FRAME_RATE: f64 = 50.0;
/// Audio samples per encoder frame.
pub const SAMPLES_PER_FRAME: usize = 320;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cnn_channels: Vec<usize>,
    pub cnn_kernels: Vec<usize>,
    pub cnn_strides: Vec<usize>,
    pub transformer_depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub proj_dim: usize,
    pub num_units: usize,
    pub temperature: f64,
    pub mask_span: usize,
    pub mask_start_prob: f64,
    pub dropout: f64,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized default.
    pub fn desk() -> Self {
        Self {
            cnn_channels: vec![32, 64, 128, 128],
            cnn_kernels: vec![10, 8, 8, 8],
            cnn_strides: vec![5, 4, 4, 4],
            transformer_depth: 4,
            hidden_dim: 128,
            heads: 4,
            ffn_dim: 512,
            proj_dim: 256,
            num_units: 100,
            temperature: 0.1,
            mask_span: 10,
            mask_start_prob: 0.08,
            dropout: 0.0,
            positional_encoding: true,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            cnn_channels: vec![4, 6, 8, 8],
            cnn_kernels: vec![10, 8, 8, 8],
            cnn_strides: vec![5, 4, 4, 4],
            transformer_depth: 2,
            hidden_dim: 16,
            heads: 2,
            ffn_dim: 32,
            proj_dim: 8,
            num_units: 8,
            temperature: 0.1,
            mask_span: 4,
            mask_start_prob: 0.2,
            dropout: 0.0,
            positional_encoding: true,
        }
    }

    pub fn frame_rate(&self) -> f64 {
        MODEL_SAMPLE_RATE as f64 / self.cnn_strides.iter().product::<usize>() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        let n = self.cnn_channels.len();
        if n == 0 || self.cnn_kernels.len() != n || self.cnn_strides.len() != n {
            return bad("cnn_channels, cnn_kernels and cnn_strides must be non-empty and equally long".into());
        }
        if self.cnn_strides.iter().product::<usize>() != SAMPLES_PER_FRAME {
            return bad(format!(
                "cumulative CNN stride must be {SAMPLES_PER_FRAME} (50 frames/s), got {}",
                self.cnn_strides.iter().product::<usize>()
            ));
        }
        for (&k, &s) in self.cnn_kernels.iter().zip(&self.cnn_strides) {
            if s == 0 || k < s {
                return bad(format!("kernel {k} must be >= stride {s} > 0"));
            }
        }
        if self.cnn_channels.contains(&0) || self.hidden_dim == 0 || self.ffn_dim == 0 || self.proj_dim == 0 {
            return bad("widths must be positive".into());
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.transformer_depth == 0 {
            return bad("transformer_depth must be >= 1".into());
        }
        if self.num_units == 0 {
            return bad("num_units must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.mask_start_prob) {
            return bad("mask_start_prob must lie in [0, 1]".into());
        }
        if self.mask_span == 0 {
            return bad("mask_span must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Default layer for second-stage clustering: the middle of the stack.
    pub fn default_relabel_layer(&self) -> usize {
        self.transformer_depth / 2
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    #[serde(skip)]
    weight: Option<ParamId>,
    #[serde(skip)]
    bias: Option<ParamId>,
    pub mode: HeadMode,
    pub classes: Vec<String>,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn ids(&self) -> (ParamId, ParamId) {
        (self.weight.expect("registered"), self.bias.expect("registered"))
    }
}

/// Input to the encoder: raw audio, or cached convolution features when the
/// CNN is frozen.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Audio(&'a AudioClip),
    ConvFeatures(ArrayView2<'a, f64>),
}

/// Supervision for the classifier head.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskTarget {
    Class(usize),
    MultiLabel(Vec<f64>),
}

#[derive(Debug, Clone)]
struct BlockTape {
    ln1: LayerNormTape,
    n1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln2: LayerNormTape,
    n2: Array2<f64>,
    pre_gelu: Array2<f64>,
    act: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct ConvTape {
    layers: Vec<(Conv1dTape, Array2<f64>)>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    conv: Option<ConvTape>,
    feat_ln: LayerNormTape,
    feat_normed: Array2<f64>,
    mask: Vec<bool>,
    blocks: Vec<BlockTape>,
    final_ln: LayerNormTape,
    /// Residual stream: transformer input followed by each block's output.
    pub layer_states: Vec<Array2<f64>>,
    /// Final (layer-normed) hidden states.
    pub hidden: Array2<f64>,
}

struct TransformerRun {
    blocks: Vec<BlockTape>,
    final_ln: LayerNormTape,
    layer_states: Vec<Array2<f64>>,
    hidden: Array2<f64>,
}

/// Hidden states returned by [`EncoderModel::forward`].
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: FrameFeatures,
    /// `layers[l]` is the residual stream after `l` transformer blocks.
    pub layers: Vec<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    params: ParamStore,
    convs: Vec<Conv1d>,
    feat_ln: LayerNorm,
    feat_proj: Linear,
    mask_embedding: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    projection: ParamId,
    unit_embeddings: ParamId,
    classifier: Option<ClassifierHead>,
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

impl EncoderModel {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, &mut |shape: &[usize], init: Init| {
            let n: usize = shape.iter().product();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => normal_vec(&mut rng, n, std),
                Init::Uniform01 => (0..n).map(|_| rng.random::<f64>()).collect(),
            }
        })
    }

    fn build(config: ModelConfig, init: &mut dyn FnMut(&[usize], Init) -> Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut reg = |p: &mut ParamStore, name: String, shape: Vec<usize>, how: Init, group| {
            let data = init(&shape, how);
            p.register(name, shape, data, group)
        };
        use ParamGroup as G;

        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, ((&cout, &k), &stride)) in config
            .cnn_channels
            .iter()
            .zip(&config.cnn_kernels)
            .zip(&config.cnn_strides)
            .enumerate()
        {
            let fan_in = (k * cin) as f64;
            let weight = reg(
                &mut p,
                format!("cnn.{i}.weight"),
                vec![cout, k, cin],
                Init::Normal((2.0 / fan_in).sqrt()),
                G::Cnn,
            )?;
            let bias = reg(&mut p, format!("cnn.{i}.bias"), vec![cout], Init::Zeros, G::Cnn)?;
            convs.push(Conv1d {
                weight,
                bias,
                kernel: k,
                stride,
                in_channels: cin,
                out_channels: cout,
            });
            cin = cout;
        }
        let h = config.hidden_dim;
        let feat_ln = LayerNorm {
            gamma: reg(&mut p, "frontend.norm.gamma".into(), vec![cin], Init::Ones, G::FeatureProjection)?,
            beta: reg(&mut p, "frontend.norm.beta".into(), vec![cin], Init::Zeros, G::FeatureProjection)?,
        };
        let feat_proj = Linear {
            weight: reg(
                &mut p,
                "frontend.proj.weight".into(),
                vec![cin, h],
                Init::Normal((1.0 / cin as f64).sqrt()),
                G::FeatureProjection,
            )?,
            bias: Some(reg(&mut p, "frontend.proj.bias".into(), vec![h], Init::Zeros, G::FeatureProjection)?),
        };
        let mask_embedding = reg(&mut p, "mask_embedding".into(), vec![h], Init::Uniform01, G::MaskEmbedding)?;

        let lin_std = (1.0 / h as f64).sqrt();
        let mut blocks = Vec::new();
        for l in 0..config.transformer_depth {
            let name = |s: &str| format!("transformer.{l}.{s}");
            let mut ln = |p: &mut ParamStore, tag: &str| -> Result<LayerNorm> {
                Ok(LayerNorm {
                    gamma: reg(p, name(&format!("{tag}.gamma")), vec![h], Init::Ones, G::Transformer)?,
                    beta: reg(p, name(&format!("{tag}.beta")), vec![h], Init::Zeros, G::Transformer)?,
                })
            };
            let ln1 = ln(&mut p, "ln1")?;
            let ln2 = ln(&mut p, "ln2")?;
            let mut lin = |p: &mut ParamStore, tag: &str, i: usize, o: usize, std: f64| -> Result<Linear> {
                Ok(Linear {
                    weight: reg(p, name(&format!("{tag}.weight")), vec![i, o], Init::Normal(std), G::Transformer)?,
                    bias: Some(reg(p, name(&format!("{tag}.bias")), vec![o], Init::Zeros, G::Transformer)?),
                })
            };
            let qkv = lin(&mut p, "attn.qkv", h, 3 * h, lin_std)?;
            let out = lin(&mut p, "attn.out", h, h, lin_std)?;
            let ff1 = lin(&mut p, "ffn.in", h, config.ffn_dim, lin_std)?;
            let ff2 = lin(&mut p, "ffn.out", config.ffn_dim, h, (1.0 / config.ffn_dim as f64).sqrt())?;
            blocks.push(Block {
                ln1,
                qkv,
                out,
                ln2,
                ff1,
                ff2,
            });
        }
        let final_ln = LayerNorm {
            gamma: reg(&mut p, "final_norm.gamma".into(), vec![h], Init::Ones, G::Transformer)?,
            beta: reg(&mut p, "final_norm.beta".into(), vec![h], Init::Zeros, G::Transformer)?,
        };
        let projection = reg(
            &mut p,
            "predictor.projection".into(),
            vec![h, config.proj_dim],
            Init::Normal(lin_std),
            G::PredictorProjection,
        )?;
        let unit_embeddings = reg(
            &mut p,
            "predictor.unit_embeddings".into(),
            vec![config.num_units, config.proj_dim],
            Init::Normal((1.0 / config.proj_dim as f64).sqrt()),
            G::UnitEmbeddings,
        )?;
        Ok(Self {
            config,
            params: p,
            convs,
            feat_ln,
            feat_proj,
            mask_embedding,
            blocks,
            final_ln,
            projection,
            unit_embeddings,
            classifier: None,
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every tensor
    /// of the architecture must be present with a matching shape.
    pub fn from_tensors(
        config: ModelConfig,
        classifier: Option<(HeadMode, Vec<String>)>,
        lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<f64>)>,
    ) -> Result<Self> {
        let mut missing: Option<Error> = None;
        let mut names = Vec::new();
        let mut model = Self::build(config, &mut |shape, _| {
            let n: usize = shape.iter().product();
            vec![0.0; n]
        })?;
        for t in model.params.tensors() {
            names.push((t.name.clone(), t.shape.clone()));
        }
        if let Some((mode, classes)) = classifier {
            model.attach_classifier(mode, classes, 0)?;
            for t in model.params.tensors().iter().filter(|t| t.group == ParamGroup::Classifier) {
                names.push((t.name.clone(), t.shape.clone()));
            }
        }
        for (i, (name, shape)) in names.into_iter().enumerate() {
            match lookup(&name) {
                Some((s, data)) if s == shape => {
                    model.params.tensor_mut(ParamId(i)).data = data.into_iter().map(|v| v as f32 as f64).collect();
                }
                Some((s, _)) => {
                    missing.get_or_insert(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {s:?}, expected {shape:?}"
                    )));
                }
                None => {
                    missing.get_or_insert(Error::Checkpoint(format!("missing tensor `{name}`")));
                }
            }
        }
        match missing {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn classifier(&self) -> Option<&ClassifierHead> {
        self.classifier.as_ref()
    }

    /// Adds (or replaces) a linear head `hidden -> classes`.
    pub fn attach_classifier(&mut self, mode: HeadMode, classes: Vec<String>, seed: u64) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        self.detach_classifier();
        let h = self.config.hidden_dim;
        let c = classes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_51F1);
        let weight = self.params.register(
            "classifier.weight",
            vec![h, c],
            normal_vec(&mut rng, h * c, (1.0 / h as f64).sqrt()),
            ParamGroup::Classifier,
        )?;
        let bias = self
            .params
            .register("classifier.bias", vec![c], vec![0.0; c], ParamGroup::Classifier)?;
        self.classifier = Some(ClassifierHead {
            weight: Some(weight),
            bias: Some(bias),
            mode,
            classes,
        });
        Ok(())
    }

    pub fn detach_classifier(&mut self) {
        if self.classifier.take().is_some() {
            let mut kept = ParamStore::new();
            for t in self.params.tensors() {
                if t.group != ParamGroup::Classifier {
                    let id = kept
                        .register(t.name.clone(), t.shape.clone(), t.data.clone(), t.group)
                        .expect("unique names");
                    kept.tensor_mut(id).trainable = t.trainable;
                }
            }
            self.params = kept;
        }
    }

    pub fn predictor_head(&self) -> PredictorHead {
        PredictorHead {
            projection: self.params.mat(self.projection).to_owned(),
            unit_embeddings: self.params.mat(self.unit_embeddings).to_owned(),
            temperature: self.config.temperature,
        }
    }

    /// Number of encoder frames for `n` input samples.
    pub fn frames_for(&self, n: usize) -> usize {
        self.convs.iter().fold(n, |len, c| c.output_len(len))
    }

    fn check_audio(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate != MODEL_SAMPLE_RATE {
            return Err(Error::invalid(format!(
                "encoder expects {MODEL_SAMPLE_RATE} Hz audio, `{}` is {} Hz",
                clip.source_id, clip.sample_rate
            )));
        }
        if self.frames_for(clip.len()) == 0 {
            return Err(Error::invalid(format!(
                "clip `{}` has {} samples; the encoder needs at least {SAMPLES_PER_FRAME}",
                clip.source_id,
                clip.len()
            )));
        }
        Ok(())
    }

    fn conv_forward(&self, clip: &AudioClip) -> (Array2<f64>, ConvTape) {
        let mut x = Array2::from_shape_vec(
            (clip.len(), 1),
            clip.samples.iter().map(|&v| v as f64).collect(),
        )
        .expect("column vector");
        let mut layers = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (pre, tape) = conv.forward(&self.params, x.view());
            x = pre.mapv(gelu);
            layers.push((tape, pre));
        }
        (x, ConvTape { layers })
    }

    /// Output of the convolution stack, `(T, last_channels)`.
    pub fn conv_features(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        self.check_audio(clip)?;
        Ok(self.conv_forward(clip).0)
    }

    /// Frame embeddings `(T, hidden_dim)` at 50 frames/s, before masking.
    pub fn cnn_encode(&self, clip: &AudioClip) -> Result<FrameFeatures> {
        let conv = self.conv_features(clip)?;
        let (normed, _) = self.feat_ln.forward(&self.params, conv.view());
        let emb = self.feat_proj.forward(&self.params, normed.view());
        FrameFeatures::new(emb, FRAME_RATE, clip.source_id.clone())
    }

    /// Runs the encoder and keeps the tape for [`EncoderModel::backward`].
    /// `dropout_rng` enables dropout (training mode).
    pub fn forward_tape(
        &self,
        input: EncoderInput<'_>,
        mask: Option<&MaskSpec>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderTape> {
        let (conv_out, conv) = match input {
            EncoderInput::Audio(clip) => {
                self.check_audio(clip)?;
                let (x, tape) = self.conv_forward(clip);
                (x, Some(tape))
            }
            EncoderInput::ConvFeatures(x) => {
                let expected = *self.config.cnn_channels.last().expect("validated");
                if x.ncols() != expected || x.nrows() == 0 {
                    return Err(Error::shape(format!(
                        "conv features {:?}, expected (T>0, {expected})",
                        x.dim()
                    )));
                }
                (x.to_owned(), None)
            }
        };
        let t = conv_out.nrows();
        let (feat_normed, feat_ln) = self.feat_ln.forward(&self.params, conv_out.view());
        let mut x = self.feat_proj.forward(&self.params, feat_normed.view());

        let mask_flags = match mask {
            Some(m) if m.seq_len() != t => {
                return Err(Error::shape(format!(
                    "mask covers {} frames but the encoder produced {t}",
                    m.seq_len()
                )))
            }
            Some(m) => m.indicator(),
            None => vec![false; t],
        };
        let emb = self.params.vec(self.mask_embedding);
        for (mut row, _) in x.rows_mut().into_iter().zip(&mask_flags).filter(|(_, &m)| m) {
            row.assign(&emb);
        }
        let run = self.run_transformer(x, dropout_rng);
        Ok(EncoderTape {
            conv,
            feat_ln,
            feat_normed,
            mask: mask_flags,
            blocks: run.blocks,
            final_ln: run.final_ln,
            layer_states: run.layer_states,
            hidden: run.hidden,
        })
    }

    fn run_transformer(&self, mut x: Array2<f64>, dropout_rng: Option<&mut dyn RngCore>) -> TransformerRun {
        let t = x.nrows();
        if self.config.positional_encoding {
            x += &sinusoidal_positions(t, self.config.hidden_dim);
        }

        let mut rng = dropout_rng;
        let p_drop = self.config.dropout;
        let mut drop_mask = |shape: (usize, usize)| -> Option<Array2<f64>> {
            match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => {
                    let keep = 1.0 / (1.0 - p_drop);
                    Some(Array2::from_shape_fn(shape, |_| {
                        if r.next_u64() as f64 / u64::MAX as f64 >= p_drop {
                            keep
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            }
        };

        let heads = self.config.heads;
        let h = self.config.hidden_dim;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layer_states = vec![x];
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x = layer_states.last().expect("non-empty");
            let (n1, ln1) = block.ln1.forward(&self.params, x.view());
            let qkv = block.qkv.forward(&self.params, n1.view());
            let mut concat = Array2::zeros((t, h));
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = qkv.slice(s![.., hd * dh..(hd + 1) * dh]);
                let k = qkv.slice(s![.., h + hd * dh..h + (hd + 1) * dh]);
                let v = qkv.slice(s![.., 2 * h + hd * dh..2 * h + (hd + 1) * dh]);
                let mut scores = q.dot(&k.t()) * scale;
                softmax_rows(&mut scores);
                concat.slice_mut(s![.., hd * dh..(hd + 1) * dh]).assign(&scores.dot(&v));
                probs.push(scores);
            }
            let mut attn = block.out.forward(&self.params, concat.view());
            let drop_attn = drop_mask(attn.dim());
            if let Some(m) = &drop_attn {
                attn *= m;
            }
            let mid = x + &attn;
            let (n2, ln2) = block.ln2.forward(&self.params, mid.view());
            let pre_gelu = block.ff1.forward(&self.params, n2.view());
            let act = pre_gelu.mapv(gelu);
            let mut ffn = block.ff2.forward(&self.params, act.view());
            let drop_ffn = drop_mask(ffn.dim());
            if let Some(m) = &drop_ffn {
                ffn *= m;
            }
            let out = &mid + &ffn;
            block_tapes.push(BlockTape {
                ln1,
                n1,
                qkv,
                probs,
                concat,
                drop_attn,
                ln2,
                n2,
                pre_gelu,
                act,
                drop_ffn,
            });
            layer_states.push(out);
        }
        let (hidden, final_ln) = self
            .final_ln
            .forward(&self.params, layer_states.last().expect("non-empty").view());
        TransformerRun {
            blocks: block_tapes,
            final_ln,
            layer_states,
            hidden,
        }
    }

    /// Accumulates parameter gradients for `d_hidden` (gradient w.r.t. the
    /// final hidden states). Gradients reach the CNN only when the tape was
    /// produced from audio and the CNN tensors are trainable.
    pub fn backward(&self, tape: &EncoderTape, d_hidden: ArrayView2<'_, f64>, grads: &mut Gradients) {
        let p = &self.params;
        let mut dx = self.final_ln.backward(p, grads, &tape.final_ln, d_hidden);
        let heads = self.config.heads;
        let h = self.config.hidden_dim;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, (block, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let x_in = &tape.layer_states[l];
            // feed-forward branch
            let mut d_ffn = dx.clone();
            if let Some(m) = &bt.drop_ffn {
                d_ffn *= m;
            }
            let mut d_act = block.ff2.backward(p, grads, bt.act.view(), d_ffn.view());
            d_act.zip_mut_with(&bt.pre_gelu, |g, &z| *g *= gelu_grad(z));
            let dn2 = block.ff1.backward(p, grads, bt.n2.view(), d_act.view());
            let mut d_mid = dx;
            d_mid += &block.ln2.backward(p, grads, &bt.ln2, dn2.view());

            // attention branch
            let mut d_attn = d_mid.clone();
            if let Some(m) = &bt.drop_attn {
                d_attn *= m;
            }
            let d_concat = block.out.backward(p, grads, bt.concat.view(), d_attn.view());
            let mut d_qkv = Array2::zeros(bt.qkv.dim());
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let q = bt.qkv.slice(s![.., cols.clone()]);
                let k = bt.qkv.slice(s![.., h + hd * dh..h + (hd + 1) * dh]);
                let v = bt.qkv.slice(s![.., 2 * h + hd * dh..2 * h + (hd + 1) * dh]);
                let probs = &bt.probs[hd];
                let d_out = d_concat.slice(s![.., cols.clone()]);
                let d_probs = d_out.dot(&v.t());
                let dv = probs.t().dot(&d_out);
                let mut d_scores = probs * &d_probs;
                let row_sums = d_scores.sum_axis(Axis(1));
                for ((mut ds, pr), rs) in d_scores
                    .rows_mut()
                    .into_iter()
                    .zip(probs.rows())
                    .zip(row_sums.iter())
                {
                    ds.scaled_add(-rs, &pr);
                }
                d_scores *= scale;
                d_qkv.slice_mut(s![.., cols]).assign(&d_scores.dot(&k));
                d_qkv
                    .slice_mut(s![.., h + hd * dh..h + (hd + 1) * dh])
                    .assign(&d_scores.t().dot(&q));
                d_qkv.slice_mut(s![.., 2 * h + hd * dh..2 * h + (hd + 1) * dh]).assign(&dv);
            }
            let dn1 = block.qkv.backward(p, grads, bt.n1.view(), d_qkv.view());
            let _ = x_in;
            dx = d_mid;
            dx += &block.ln1.backward(p, grads, &bt.ln1, dn1.view());
        }

        // masking: substituted rows send their gradient to the mask embedding
        {
            let mut g_mask = grads.vec_mut(self.mask_embedding);
            for (row, _) in dx.rows().into_iter().zip(&tape.mask).filter(|(_, &m)| m) {
                g_mask += &row;
            }
        }
        for (mut row, _) in dx.rows_mut().into_iter().zip(&tape.mask).filter(|(_, &m)| m) {
            row.fill(0.0);
        }
        let d_normed = self.feat_proj.backward(p, grads, tape.feat_normed.view(), dx.view());
        let d_conv = self.feat_ln.backward(p, grads, &tape.feat_ln, d_normed.view());

        let cnn_trainable = self
            .convs
            .iter()
            .any(|c| p.tensor(c.weight).trainable || p.tensor(c.bias).trainable);
        if let (Some(conv), true) = (&tape.conv, cnn_trainable) {
            let mut d = d_conv;
            for (i, (layer, (ctape, pre))) in self.convs.iter().zip(&conv.layers).enumerate().rev() {
                d.zip_mut_with(pre, |g, &z| *g *= gelu_grad(z));
                match layer.backward(p, grads, ctape, d.view(), i > 0) {
                    Some(next) => d = next,
                    None => break,
                }
            }
        }
    }

    /// Encoder forward pass without dropout.
    pub fn forward(&self, clip: &AudioClip, mask: Option<&MaskSpec>) -> Result<EncoderOutput> {
        let tape = self.forward_tape(EncoderInput::Audio(clip), mask, None)?;
        Ok(EncoderOutput {
            hidden: FrameFeatures::new(tape.hidden, FRAME_RATE, clip.source_id.clone())?,
            layers: tape.layer_states,
        })
    }

    /// Transformer pass over `(T, hidden_dim)` frame embeddings, skipping
    /// the CNN, frontend projection and masking.
    pub fn transformer_from_embeddings(&self, embeddings: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if embeddings.ncols() != self.config.hidden_dim || embeddings.nrows() == 0 {
            return Err(Error::shape("embedding width must equal hidden_dim"));
        }
        Ok(self.run_transformer(embeddings.to_owned(), None).hidden)
    }

    /// Hidden states after `layer` transformer blocks (no masking).
    pub fn layer_features(&self, clip: &AudioClip, layer: usize) -> Result<FrameFeatures> {
        if layer >= self.config.transformer_depth {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for depth {}",
                self.config.transformer_depth
            )));
        }
        let out = self.forward(clip, None)?;
        FrameFeatures::new(out.layers[layer].clone(), FRAME_RATE, clip.source_id.clone())
    }

    pub fn unit_probs(&self, h: &FrameFeatures) -> Result<Array2<f64>> {
        self.predictor_head().unit_probs(h)
    }

    /// Mean-pooled final hidden states.
    pub fn embed(&self, input: EncoderInput<'_>) -> Result<Array1<f64>> {
        let tape = self.forward_tape(input, None, None)?;
        Ok(tape.hidden.mean_axis(Axis(0)).expect("T >= 1"))
    }

    /// Classifier logits (no softmax/sigmoid).
    pub fn classify(&self, clip: &AudioClip) -> Result<Array1<f64>> {
        self.classify_input(EncoderInput::Audio(clip))
    }

    pub fn classify_input(&self, input: EncoderInput<'_>) -> Result<Array1<f64>> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no classifier head"))?;
        let (w, b) = head.ids();
        let pooled = self.embed(input)?;
        Ok(pooled.dot(&self.params.mat(w)) + self.params.vec(b))
    }

    /// Masked unit-prediction loss; with `want_grad` also its gradient.
    pub fn pretrain_objective(
        &self,
        input: EncoderInput<'_>,
        targets: &UnitSequence,
        mask: &MaskSpec,
        dropout_rng: Option<&mut dyn RngCore>,
        want_grad: bool,
    ) -> Result<(f64, Option<Gradients>)> {
        let tape = self.forward_tape(input, Some(mask), dropout_rng)?;
        let projected = tape.hidden.dot(&self.params.mat(self.projection));
        let (logits, cos_tape): (Array2<f64>, CosineTape) = cosine_logits(
            projected.view(),
            self.params.mat(self.unit_embeddings),
            self.config.temperature,
        );
        if targets.num_units() > self.config.num_units {
            return Err(Error::invalid(format!(
                "targets use {} units, model predicts {}",
                targets.num_units(),
                self.config.num_units
            )));
        }
        let (loss, d_logits) = masked_unit_loss_grad(&logits, targets, mask)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite pretraining loss {loss}")));
        }
        if !want_grad {
            return Ok((loss, None));
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let (d_proj, d_emb) = cosine_backward(&cos_tape, d_logits.view(), self.config.temperature);
        grads.mat_mut(self.unit_embeddings).scaled_add(1.0, &d_emb);
        ndarray::linalg::general_mat_mul(
            1.0,
            &tape.hidden.t(),
            &d_proj,
            1.0,
            &mut grads.mat_mut(self.projection),
        );
        let d_hidden = d_proj.dot(&self.params.mat(self.projection).t());
        self.backward(&tape, d_hidden.view(), &mut grads);
        Ok((loss, Some(grads)))
    }

    /// Fine-tuning loss for one instance: softmax cross-entropy or
    /// class-averaged sigmoid BCE depending on the head.
    pub fn task_objective(
        &self,
        input: EncoderInput<'_>,
        target: &TaskTarget,
        dropout_rng: Option<&mut dyn RngCore>,
        want_grad: bool,
    ) -> Result<(f64, Option<Gradients>, Array1<f64>)> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no classifier head"))?;
        let (w, b) = head.ids();
        let tape = self.forward_tape(input, None, dropout_rng)?;
        let t = tape.hidden.nrows();
        let pooled = tape.hidden.mean_axis(Axis(0)).expect("T >= 1");
        let logits = pooled.dot(&self.params.mat(w)) + self.params.vec(b);
        let (loss, d_logits) = match (head.mode, target) {
            (HeadMode::SoftmaxCe, TaskTarget::Class(c)) => softmax_cross_entropy(logits.view(), *c)?,
            (HeadMode::SigmoidBce, TaskTarget::MultiLabel(y)) => {
                sigmoid_bce(logits.view(), ndarray::ArrayView1::from(&y[..]))?
            }
            (mode, target) => {
                return Err(Error::invalid(format!(
                    "target {target:?} does not fit head mode {mode:?}"
                )))
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite task loss {loss}")));
        }
        if !want_grad {
            return Ok((loss, None, logits));
        }
        let mut grads = Gradients::zeros_like(&self.params);
        {
            let mut gw = grads.mat_mut(w);
            for (i, &pv) in pooled.iter().enumerate() {
                gw.row_mut(i).scaled_add(pv, &d_logits);
            }
        }
        grads.vec_mut(b).scaled_add(1.0, &d_logits);
        let d_pooled = self.params.mat(w).dot(&d_logits) / t as f64;
        let d_hidden = Array2::from_shape_fn((t, self.config.hidden_dim), |(_, j)| d_pooled[j]);
        self.backward(&tape, d_hidden.view(), &mut grads);
        Ok((loss, Some(grads), logits))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform01,
}
