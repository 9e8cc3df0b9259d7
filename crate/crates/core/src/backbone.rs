//! Small convolutional encoder-decoder used by every branch.
//!
//! Layer `i < E` is `conv3x3 -> ReLU -> 2x average-pool`; the next `E` layers
//! are `2x bilinear upsample -> conv3x3 -> ReLU`; the last layer is the 1x1
//! output head. A layer's "output" is its post-activation tensor.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MsnError, Result};
use crate::params::{kaiming_normal, NamedGrads, ParameterStore};
use crate::tensor::{Real, Tensor};

/// Per-pixel class logits (or probabilities) `[N_c, H, W]`.
pub type SegmentationMap<T> = Tensor<T>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_classes: usize,
    pub base_channels: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            base_channels: 16,
            encoder_blocks: 3,
            decoder_blocks: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Encoder,
    Decoder,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn weight_name(&self) -> String {
        format!("conv{}.weight", self.index)
    }

    pub fn bias_name(&self) -> String {
        format!("conv{}.bias", self.index)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(MsnError::Config("need at least 2 classes".into()));
        }
        if self.base_channels == 0 || self.encoder_blocks == 0 {
            return Err(MsnError::Config(
                "base_channels and encoder_blocks must be positive".into(),
            ));
        }
        if self.encoder_blocks != self.decoder_blocks {
            return Err(MsnError::Config(format!(
                "encoder_blocks ({}) must equal decoder_blocks ({})",
                self.encoder_blocks, self.decoder_blocks
            )));
        }
        Ok(())
    }

    pub fn validate_input(&self, patch_size: usize) -> Result<()> {
        let m = 1 << self.encoder_blocks;
        if patch_size == 0 || patch_size % m != 0 {
            return Err(MsnError::Config(format!(
                "patch size {patch_size} must be divisible by 2^{}",
                self.encoder_blocks
            )));
        }
        Ok(())
    }

    /// Total conv layers including the head.
    pub fn num_layers(&self) -> usize {
        self.encoder_blocks + self.decoder_blocks + 1
    }

    pub fn head_index(&self) -> usize {
        self.num_layers() - 1
    }

    /// Channels entering the output head.
    pub fn last_channels(&self) -> usize {
        self.base_channels
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let e = self.encoder_blocks;
        let b = self.base_channels;
        let mut out = Vec::with_capacity(self.num_layers());
        let mut c_in = 3;
        for i in 0..e {
            let c = b << i;
            out.push(LayerSpec {
                index: i,
                kind: LayerKind::Encoder,
                in_channels: c_in,
                out_channels: c,
                kernel: 3,
            });
            c_in = c;
        }
        for j in 0..self.decoder_blocks {
            let shift = (e as isize - 2 - j as isize).max(0) as usize;
            let c = b << shift;
            out.push(LayerSpec {
                index: e + j,
                kind: LayerKind::Decoder,
                in_channels: c_in,
                out_channels: c,
                kernel: 3,
            });
            c_in = c;
        }
        out.push(LayerSpec {
            index: e + self.decoder_blocks,
            kind: LayerKind::Head,
            in_channels: c_in,
            out_channels: self.n_classes,
            kernel: 1,
        });
        out
    }

    /// `(C, H, W)` of layer `l`'s output for a `P x P` input.
    pub fn layer_output_shape(&self, l: usize, patch_size: usize) -> (usize, usize, usize) {
        let spec = self.layers()[l];
        let e = self.encoder_blocks;
        let side = match spec.kind {
            LayerKind::Encoder => patch_size >> (l + 1),
            LayerKind::Decoder => patch_size >> (2 * e - l - 1),
            LayerKind::Head => patch_size,
        };
        (spec.out_channels, side, side)
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(LayerSpec::num_params).sum()
    }

    /// Kaiming-normal kernels, zero biases, all tensors trainable.
    pub fn init<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for l in self.layers() {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            store.insert(
                l.weight_name(),
                kaiming_normal(&[l.out_channels, l.in_channels, l.kernel, l.kernel], fan_in, &mut rng),
                true,
            );
            store.insert(l.bias_name(), Tensor::zeros(&[l.out_channels]), true);
        }
        store
    }

    /// Names of the output head's kernel and bias.
    pub fn head_names(&self) -> (String, String) {
        let head = self.layers()[self.head_index()];
        (head.weight_name(), head.bias_name())
    }
}

/// Every tensor of a store placed on a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MsnError::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Places every tensor of `store` on `g`; trainable tensors become differentiable leaves.
pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParameterStore<T>) -> Bound {
    let vars = store
        .iter()
        .map(|(name, p)| (name.clone(), g.leaf(p.tensor.clone(), p.trainable)))
        .collect();
    Bound { vars }
}

/// Gradients of every trainable tensor in `bound` (zeros where none flowed).
pub fn collect_grads<T: Real>(
    grads: &crate::autodiff::Gradients<T>,
    g: &Graph<T>,
    bound: &Bound,
) -> NamedGrads<T> {
    bound
        .iter()
        .filter(|(_, &v)| g.needs_grad(v))
        .map(|(name, &v)| {
            let t = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
            (name.clone(), t)
        })
        .collect()
}

/// Tape handles produced by one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub logits: Var,
    /// Post-activation output of every layer (after any hook replacement).
    pub layer_outputs: Vec<Var>,
    /// Input to the output head.
    pub features: Var,
}

pub fn prepare_input<T: Real>(x: &Tensor<f32>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if c != 3 || h != w {
        return Err(MsnError::Shape(format!(
            "expected a square [3, P, P] patch, got {:?}",
            x.shape()
        )));
    }
    cfg.validate_input(h)?;
    if !x.is_finite() {
        return Err(MsnError::NonFinite("input patch".into()));
    }
    // inputs are centred on zero
    Ok(x.cast::<T>().map(|v| v - T::lit(0.5)))
}

/// Records the backbone on `g`. `hook(g, layer, output)` may replace any
/// layer's output before it feeds the next layer.
pub fn build<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    bound: &Bound,
    x: Var,
    hook: &mut dyn FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
) -> Result<BackboneVars> {
    let mut h = x;
    let mut layer_outputs = Vec::with_capacity(cfg.num_layers());
    let mut features = x;
    for l in cfg.layers() {
        let w = bound.get(&l.weight_name())?;
        let b = bound.get(&l.bias_name())?;
        let out = match l.kind {
            LayerKind::Encoder => {
                let z = g.conv2d(h, w, Some(b))?;
                let a = g.relu(z);
                g.avg_pool2(a)?
            }
            LayerKind::Decoder => {
                let (_, hh, ww) = g.value(h).chw()?;
                let up = g.resize(h, 2 * hh, 2 * ww)?;
                let z = g.conv2d(up, w, Some(b))?;
                g.relu(z)
            }
            LayerKind::Head => {
                features = h;
                g.conv2d(h, w, Some(b))?
            }
        };
        let out = hook(g, l.index, out)?;
        layer_outputs.push(out);
        h = out;
    }
    Ok(BackboneVars {
        logits: h,
        layer_outputs,
        features,
    })
}

/// Result of an inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: SegmentationMap<T>,
    pub tapped: BTreeMap<usize, Tensor<T>>,
    pub features: Tensor<T>,
}

/// Inference pass returning logits and the post-activation outputs at `taps`.
pub fn forward<T: Real>(
    params: &ParameterStore<T>,
    cfg: &BackboneConfig,
    x: &Tensor<f32>,
    taps: &[usize],
) -> Result<ForwardOutput<T>> {
    if let Some(&bad) = taps.iter().find(|&&t| t >= cfg.num_layers()) {
        return Err(MsnError::Config(format!(
            "tap {bad} outside 0..{}",
            cfg.num_layers()
        )));
    }
    let mut g = Graph::new();
    let frozen = params.clone().freeze();
    let bound = bind(&mut g, &frozen);
    let xv = g.constant(prepare_input(x, cfg)?);
    let vars = build(&mut g, cfg, &bound, xv, &mut |_, _, v| Ok(v))?;
    Ok(ForwardOutput {
        logits: g.value(vars.logits).clone(),
        tapped: taps
            .iter()
            .map(|&t| (t, g.value(vars.layer_outputs[t]).clone()))
            .collect(),
        features: g.value(vars.features).clone(),
    })
}

/// A labelled patch for supervised gradient computation.
#[derive(Clone, Debug)]
pub struct LabelledPatch {
    pub x: Tensor<f32>,
    pub y: Arc<Vec<u16>>,
}

/// Runs `per_sample` on every sample in parallel and sums losses and gradients
/// in sample order, so results do not depend on scheduling.
pub fn reduce_gradients<T, S, F>(samples: &[S], batch_id: usize, per_sample: F) -> Result<(T, NamedGrads<T>)>
where
    T: Real,
    S: Sync,
    F: Fn(&S) -> Result<(T, NamedGrads<T>)> + Sync,
{
    let parts: Vec<Result<(T, NamedGrads<T>)>> = samples.par_iter().map(&per_sample).collect();
    let mut loss = T::zero();
    let mut total: NamedGrads<T> = BTreeMap::new();
    for part in parts {
        let (l, grads) = part?;
        loss += l;
        for (name, grad) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&grad),
                None => {
                    total.insert(name, grad);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(MsnError::NonFiniteLoss { batch: batch_id });
    }
    Ok((loss, total))
}

/// Number of labels that count towards the loss across a batch.
pub fn counted_pixels<'a>(labels: impl IntoIterator<Item = &'a [u16]>, ignore: u16) -> usize {
    labels
        .into_iter()
        .map(|y| y.iter().filter(|&&v| v != ignore).count())
        .sum()
}

/// Mean cross-entropy of the backbone over `batch` and its gradient with
/// respect to every trainable tensor. Frozen tensors get no entry.
pub fn grad<T: Real>(
    params: &ParameterStore<T>,
    cfg: &BackboneConfig,
    batch: &[LabelledPatch],
    batch_id: usize,
) -> Result<(T, NamedGrads<T>)> {
    let ignore = cfg.n_classes as u16;
    let norm = T::lit(counted_pixels(batch.iter().map(|s| s.y.as_slice()), ignore) as f64);
    reduce_gradients(batch, batch_id, |s| {
        let mut g = Graph::new();
        let bound = bind(&mut g, params);
        let xv = g.constant(prepare_input(&s.x, cfg)?);
        let vars = build(&mut g, cfg, &bound, xv, &mut |_, _, v| Ok(v))?;
        let loss = g.cross_entropy(vars.logits, s.y.clone(), ignore, norm)?;
        let grads = g.backward(loss);
        Ok((g.value(loss).data()[0], collect_grads(&grads, &g, &bound)))
    })
}

/// Mean and population variance of one layer's activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivationStats {
    pub mean: f64,
    pub variance: f64,
}

/// Per-layer statistics over all activation elements of `batch`.
pub fn activation_stats<T: Real>(
    params: &ParameterStore<T>,
    cfg: &BackboneConfig,
    batch: &[Tensor<f32>],
) -> Result<Vec<LayerActivationStats>> {
    if batch.is_empty() {
        return Err(MsnError::Empty("calibration batch".into()));
    }
    let taps: Vec<usize> = (0..cfg.num_layers()).collect();
    let outs: Vec<ForwardOutput<T>> = batch
        .par_iter()
        .map(|x| forward(params, cfg, x, &taps))
        .collect::<Result<_>>()?;
    Ok(taps
        .iter()
        .map(|l| {
            let values = || outs.iter().flat_map(|o| o.tapped[l].data().iter().map(|v| v.as_f64()));
            let n = values().count() as f64;
            let mean = values().sum::<f64>() / n;
            let variance = values().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            LayerActivationStats { mean, variance }
        })
        .collect())
}

/// Upper bound on the network's Lipschitz constant (Euclidean norms): every
/// conv is bounded by the sum of its per-tap Frobenius norms, ReLU by 1,
/// 2x average pooling by 1/2 and 2x bilinear upsampling by 2.
pub fn lipschitz_bound<T: Real>(params: &ParameterStore<T>, cfg: &BackboneConfig) -> Result<f64> {
    let mut bound = 1.0;
    for l in cfg.layers() {
        let k = params.get(&l.weight_name())?;
        let taps = l.kernel * l.kernel;
        let mut per_tap = vec![0.0f64; taps];
        for (i, v) in k.data().iter().enumerate() {
            per_tap[i % taps] += v.as_f64().powi(2);
        }
        bound *= per_tap.iter().map(|s| s.sqrt()).sum::<f64>();
        bound *= match l.kind {
            LayerKind::Encoder => 0.5,
            LayerKind::Decoder => 2.0,
            LayerKind::Head => 1.0,
        };
    }
    Ok(bound)
}
