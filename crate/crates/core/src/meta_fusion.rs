//! Fusion of the two non-meta branch outputs through convolutions whose
//! weights are generated by a small FC-ReLU-FC learner from the negative
//! output-head gradients of both branches.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{bind, collect_grads, counted_pixels, reduce_gradients, Bound, SegmentationMap};
use crate::error::{MsnError, Result};
use crate::params::{kaiming_normal, NamedGrads, ParameterStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaLearnerConfig {
    /// Channels entering each branch's 1x1 output head.
    pub c_last: usize,
    pub n_classes: usize,
    pub hidden: usize,
    /// Also generate per-channel fusion biases.
    #[serde(default)]
    pub generate_bias: bool,
}

impl MetaLearnerConfig {
    pub fn new(c_last: usize, n_classes: usize, hidden: usize) -> Self {
        Self {
            c_last,
            n_classes,
            hidden,
            generate_bias: false,
        }
    }

    /// Length of the gradient vector: both heads' kernels, flattened.
    pub fn d_in(&self) -> usize {
        2 * self.c_last * self.n_classes
    }

    pub fn w1_len(&self) -> usize {
        9 * 2 * self.n_classes * self.n_classes
    }

    pub fn w2_len(&self) -> usize {
        9 * self.n_classes * self.n_classes
    }

    pub fn d_out(&self) -> usize {
        let bias = if self.generate_bias { 2 * self.n_classes } else { 0 };
        self.w1_len() + self.w2_len() + bias
    }

    pub fn num_params(&self) -> usize {
        self.d_in() * self.hidden + self.hidden + self.hidden * self.d_out() + self.d_out()
    }

    /// Kaiming weights; the output bias holds the passthrough kernels, so the
    /// generated fusion starts near the X1 branch's own softmax.
    pub fn init<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        s.insert("fc1.weight", kaiming_normal(&[self.hidden, self.d_in()], self.d_in(), &mut rng), true);
        s.insert("fc1.bias", Tensor::zeros(&[self.hidden]), true);
        s.insert("fc2.weight", kaiming_normal(&[self.d_out(), self.hidden], self.hidden, &mut rng), true);
        let mut bias = Tensor::zeros(&[self.d_out()]);
        let start = FusionWeights::<T>::passthrough(self.n_classes);
        let w = [start.w1.data(), start.w2.data()].concat();
        bias.data_mut()[..w.len()].copy_from_slice(&w);
        s.insert("fc2.bias", bias, true);
        s
    }

    /// Rejects a store whose tensor shapes do not match this configuration.
    pub fn check<T: Real>(&self, store: &ParameterStore<T>) -> Result<()> {
        let expect = [
            ("fc1.weight", vec![self.hidden, self.d_in()]),
            ("fc1.bias", vec![self.hidden]),
            ("fc2.weight", vec![self.d_out(), self.hidden]),
            ("fc2.bias", vec![self.d_out()]),
        ];
        for (name, shape) in expect {
            let t = store.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(MsnError::Shape(format!(
                    "{name} is {:?}, meta-learner needs {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Concatenated, flattened negative head gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaVector<T> {
    pub values: Tensor<T>,
    /// Patch or batch the gradients came from.
    pub provenance: u64,
}

/// Generated fusion kernels `[out, in, 3, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b1: Option<Tensor<T>>,
    pub b2: Option<Tensor<T>>,
}

impl<T: Real> FusionWeights<T> {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[n_classes, 2 * n_classes, 3, 3]),
            w2: Tensor::zeros(&[n_classes, n_classes, 3, 3]),
            b1: None,
            b2: None,
        }
    }

    /// Kernels whose fusion output is `softmax(S1)`: centre taps select the X1
    /// half through the hidden layer and back out.
    pub fn passthrough(n_classes: usize) -> Self {
        let n = n_classes;
        let mut w = Self::zeros(n);
        for c in 0..n {
            w.w1.data_mut()[(c * 2 * n + c) * 9 + 4] = T::one();
            w.w2.data_mut()[(c * n + c) * 9 + 4] = T::one();
        }
        w
    }

    /// Kaiming-initialised kernels.
    pub fn kaiming(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: kaiming_normal(&[n_classes, 2 * n_classes, 3, 3], 18 * n_classes, &mut rng),
            w2: kaiming_normal(&[n_classes, n_classes, 3, 3], 9 * n_classes, &mut rng),
            b1: None,
            b2: None,
        }
    }

    pub fn to_store(&self, trainable: bool) -> ParameterStore<T> {
        let mut s = ParameterStore::new();
        s.insert("w1", self.w1.clone(), trainable);
        s.insert("w2", self.w2.clone(), trainable);
        if let (Some(b1), Some(b2)) = (&self.b1, &self.b2) {
            s.insert("b1", b1.clone(), trainable);
            s.insert("b2", b2.clone(), trainable);
        }
        s
    }

    pub fn from_store(s: &ParameterStore<T>) -> Result<Self> {
        Ok(Self {
            w1: s.get("w1")?.clone(),
            w2: s.get("w2")?.clone(),
            b1: s.get("b1").ok().cloned(),
            b2: s.get("b2").ok().cloned(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len()
            + self.w2.len()
            + self.b1.as_ref().map_or(0, Tensor::len)
            + self.b2.as_ref().map_or(0, Tensor::len)
    }
}

/// Output of one non-meta branch for one patch: logits and the head's input.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput<T> {
    pub logits: SegmentationMap<T>,
    pub features: Tensor<T>,
}

/// A branch's 1x1 output head.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Records `up(crop(s))`: the centred `1/ratio` region resized back to full size.
pub fn align_on<T: Real>(g: &mut Graph<T>, s: Var, ratio: usize) -> Result<Var> {
    let (_, h, w) = g.value(s).chw()?;
    if ratio == 1 {
        return Ok(s);
    }
    let (ch, cw) = (h.div_ceil(ratio), w.div_ceil(ratio));
    let c = g.crop(s, (h - ch) / 2, (w - cw) / 2, ch, cw)?;
    g.resize(c, h, w)
}

/// Maps a lower-magnification branch output onto the top branch's footprint.
pub fn align_to_top<T: Real>(s: &Tensor<T>, ratio: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let out = align_on(&mut g, v, ratio)?;
    Ok(g.value(out).clone())
}

/// One sample for gradient-vector construction.
#[derive(Clone, Debug)]
pub struct SigmaSample<'a, T> {
    pub s1: &'a BranchOutput<T>,
    pub s2: &'a BranchOutput<T>,
    pub y1: Arc<Vec<u16>>,
}

/// Builds the gradient vector from the batch-mean losses `L(S1, Y1)` and
/// `L(up(crop(S2)), Y1)` with respect to each branch's head kernel.
pub fn build_sigma<T: Real>(
    samples: &[SigmaSample<'_, T>],
    head1: &Head<T>,
    head2: &Head<T>,
    ratio12: usize,
    ignore: u16,
    provenance: u64,
) -> Result<SigmaVector<T>> {
    if samples.is_empty() {
        return Err(MsnError::Empty("sigma batch".into()));
    }
    let norm = T::lit(counted_pixels(samples.iter().map(|s| s.y1.as_slice()), ignore) as f64);
    let (_, grads) = reduce_gradients(samples, provenance as usize, |s| {
        let (_, h, w) = s.s1.logits.chw()?;
        if s.y1.len() != h * w || s.s2.logits.chw()?.1 != h {
            return Err(MsnError::Shape(format!(
                "S1 {:?}, S2 {:?} and {} labels",
                s.s1.logits.shape(),
                s.s2.logits.shape(),
                s.y1.len()
            )));
        }
        let mut g = Graph::new();
        let w1 = g.param(head1.weight.clone());
        let b1 = g.constant(head1.bias.clone());
        let w2 = g.param(head2.weight.clone());
        let b2 = g.constant(head2.bias.clone());
        let f1 = g.constant(s.s1.features.clone());
        let f2 = g.constant(s.s2.features.clone());
        let z1 = g.conv2d(f1, w1, Some(b1))?;
        let z2 = g.conv2d(f2, w2, Some(b2))?;
        let z2a = align_on(&mut g, z2, ratio12)?;
        let l1 = g.cross_entropy(z1, s.y1.clone(), ignore, norm)?;
        let l2 = g.cross_entropy(z2a, s.y1.clone(), ignore, norm)?;
        let total = g.add(l1, l2)?;
        let gr = g.backward(total);
        let zeros1 = || Tensor::zeros(head1.weight.shape());
        let zeros2 = || Tensor::zeros(head2.weight.shape());
        let mut out = NamedGrads::new();
        out.insert("1".into(), gr.get(w1).cloned().unwrap_or_else(zeros1));
        out.insert("2".into(), gr.get(w2).cloned().unwrap_or_else(zeros2));
        Ok((g.value(total).data()[0], out))
    })?;
    let values: Vec<T> = grads["1"]
        .data()
        .iter()
        .chain(grads["2"].data())
        .map(|&v| -v)
        .collect();
    let n = values.len();
    Ok(SigmaVector {
        values: Tensor::from_vec(&[n], values)?,
        provenance,
    })
}

/// Records `fc2(ReLU(fc1(sigma)))` on `g`.
pub fn generate_on<T: Real>(g: &mut Graph<T>, bound: &Bound, sigma: Var) -> Result<Var> {
    let h = g.linear(sigma, bound.get("fc1.weight")?, bound.get("fc1.bias")?)?;
    let h = g.relu(h);
    g.linear(h, bound.get("fc2.weight")?, bound.get("fc2.bias")?)
}

/// Tape handles of fusion weights cut out of a generated vector.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w1: Var,
    pub w2: Var,
    pub b1: Option<Var>,
    pub b2: Option<Var>,
}

/// Reshapes the generated vector into the two kernels (and optional biases).
pub fn split_on<T: Real>(g: &mut Graph<T>, cfg: &MetaLearnerConfig, out: Var) -> Result<FusionVars> {
    let n = cfg.n_classes;
    if g.value(out).len() != cfg.d_out() {
        return Err(MsnError::Shape(format!(
            "generated {} values, fusion needs {}",
            g.value(out).len(),
            cfg.d_out()
        )));
    }
    let w1 = g.slice(out, 0, &[n, 2 * n, 3, 3])?;
    let w2 = g.slice(out, cfg.w1_len(), &[n, n, 3, 3])?;
    let (b1, b2) = if cfg.generate_bias {
        let off = cfg.w1_len() + cfg.w2_len();
        (Some(g.slice(out, off, &[n])?), Some(g.slice(out, off + n, &[n])?))
    } else {
        (None, None)
    };
    Ok(FusionVars { w1, w2, b1, b2 })
}

pub fn generate_weights<T: Real>(
    cfg: &MetaLearnerConfig,
    ml: &ParameterStore<T>,
    sigma: &SigmaVector<T>,
) -> Result<FusionWeights<T>> {
    cfg.check(ml)?;
    if sigma.values.len() != cfg.d_in() {
        return Err(MsnError::Shape(format!(
            "sigma of length {}, meta-learner expects {}",
            sigma.values.len(),
            cfg.d_in()
        )));
    }
    let mut g = Graph::new();
    let bound = bind(&mut g, &ml.clone().freeze());
    let s = g.constant(sigma.values.clone());
    let out = generate_on(&mut g, &bound, s)?;
    let v = split_on(&mut g, cfg, out)?;
    Ok(FusionWeights {
        w1: g.value(v.w1).clone(),
        w2: g.value(v.w2).clone(),
        b1: v.b1.map(|b| g.value(b).clone()),
        b2: v.b2.map(|b| g.value(b).clone()),
    })
}

/// Records `conv_W2(ReLU(conv_W1(cat(softmax(S1), softmax(S2')))))`.
pub fn fuse_on<T: Real>(g: &mut Graph<T>, s1: Var, s2a: Var, w: &FusionVars) -> Result<Var> {
    let (c1, h1, w1) = g.value(s1).chw()?;
    let (c2, h2, w2) = g.value(s2a).chw()?;
    if (h1, w1) != (h2, w2) {
        return Err(MsnError::Shape(format!("S1 {h1}x{w1} vs S2' {h2}x{w2}")));
    }
    let n = g.value(w.w2).shape()[0];
    if c1 != n || c2 != n {
        return Err(MsnError::Shape(format!(
            "fusion over {n} classes given {c1} and {c2} channels"
        )));
    }
    let p1 = g.softmax(s1)?;
    let p2 = g.softmax(s2a)?;
    let cat = g.concat(&[p1, p2])?;
    let z = g.conv2d(cat, w.w1, w.b1)?;
    let r = g.relu(z);
    g.conv2d(r, w.w2, w.b2)
}

pub fn fuse<T: Real>(
    s1: &SegmentationMap<T>,
    s2a: &SegmentationMap<T>,
    weights: &FusionWeights<T>,
) -> Result<SegmentationMap<T>> {
    let mut g = Graph::new();
    let a = g.constant(s1.clone());
    let b = g.constant(s2a.clone());
    let v = FusionVars {
        w1: g.constant(weights.w1.clone()),
        w2: g.constant(weights.w2.clone()),
        b1: weights.b1.clone().map(|t| g.constant(t)),
        b2: weights.b2.clone().map(|t| g.constant(t)),
    };
    let out = fuse_on(&mut g, a, b, &v)?;
    Ok(g.value(out).clone())
}

/// One fusion training sample: both branch maps on the top footprint and its labels.
#[derive(Clone, Debug)]
pub struct FusionInput<'a, T> {
    pub s1: &'a SegmentationMap<T>,
    pub s2a: &'a SegmentationMap<T>,
    pub y1: Arc<Vec<u16>>,
}

fn fusion_loss_grads<T: Real>(
    batch: &[FusionInput<'_, T>],
    ignore: u16,
    batch_id: usize,
    leaves: &ParameterStore<T>,
    vars: impl Fn(&mut Graph<T>, &Bound) -> Result<FusionVars> + Sync,
) -> Result<(T, NamedGrads<T>)> {
    let norm = T::lit(counted_pixels(batch.iter().map(|s| s.y1.as_slice()), ignore) as f64);
    reduce_gradients(batch, batch_id, |s| {
        let mut g = Graph::new();
        let bound = bind(&mut g, leaves);
        let w = vars(&mut g, &bound)?;
        let a = g.constant(s.s1.clone());
        let b = g.constant(s.s2a.clone());
        let out = fuse_on(&mut g, a, b, &w)?;
        let loss = g.cross_entropy(out, s.y1.clone(), ignore, norm)?;
        let grads = g.backward(loss);
        Ok((g.value(loss).data()[0], collect_grads(&grads, &g, &bound)))
    })
}

/// Batch-mean `L(S, Y1)` of the fusion driven by `sigma`, and its gradient
/// with respect to the meta-learner.
pub fn meta_fusion_grad<T: Real>(
    cfg: &MetaLearnerConfig,
    ml: &ParameterStore<T>,
    sigma: &SigmaVector<T>,
    batch: &[FusionInput<'_, T>],
    ignore: u16,
    batch_id: usize,
) -> Result<(T, NamedGrads<T>)> {
    cfg.check(ml)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, ml);
    let s = g.constant(sigma.values.clone());
    let out = generate_on(&mut g, &bound, s)?;
    // The per-sample fusion graphs treat the generated vector as a leaf; their
    // summed gradient is then pushed back through the generator once.
    let mut generated = ParameterStore::new();
    generated.insert("out", g.value(out).clone(), true);
    let (loss, grads) = fusion_loss_grads(batch, ignore, batch_id, &generated, |g, b| {
        split_on(g, cfg, b.get("out")?)
    })?;
    let seed = grads
        .get("out")
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[cfg.d_out()]));
    let back = g.backward_with(out, seed);
    Ok((loss, collect_grads(&back, &g, &bound)))
}

/// Batch-mean `L(S, Y1)` with the fusion kernels as free parameters, stored
/// as `w1`, `w2` (and `b1`, `b2`).
pub fn direct_fusion_grad<T: Real>(
    weights: &ParameterStore<T>,
    batch: &[FusionInput<'_, T>],
    ignore: u16,
    batch_id: usize,
) -> Result<(T, NamedGrads<T>)> {
    fusion_loss_grads(batch, ignore, batch_id, weights, |_, b| {
        Ok(FusionVars {
            w1: b.get("w1")?,
            w2: b.get("w2")?,
            b1: b.get("b1").ok(),
            b2: b.get("b2").ok(),
        })
    })
}

/// Mean of per-batch gradient vectors.
pub fn mean_sigma<T: Real>(sigmas: &[SigmaVector<T>]) -> Result<SigmaVector<T>> {
    let first = sigmas
        .first()
        .ok_or_else(|| MsnError::Empty("sub-training set has no batches".into()))?;
    let mut acc = Tensor::zeros(first.values.shape());
    for s in sigmas {
        if s.values.shape() != first.values.shape() {
            return Err(MsnError::Shape("sigma lengths differ".into()));
        }
        acc.add_assign(&s.values);
    }
    acc.scale(T::one() / T::lit(sigmas.len() as f64));
    Ok(SigmaVector {
        values: acc,
        provenance: u64::MAX,
    })
}

/// Test-time fusion weights generated from the mean gradient vector of the
/// sub-training batches.
pub fn finalize_inference_weights<T: Real>(
    cfg: &MetaLearnerConfig,
    ml: &ParameterStore<T>,
    sigmas: &[SigmaVector<T>],
) -> Result<(SigmaVector<T>, FusionWeights<T>)> {
    let bar = mean_sigma(sigmas)?;
    let w = generate_weights(cfg, ml, &bar)?;
    Ok((bar, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimensions() {
        let cfg = MetaLearnerConfig::new(16, 4, 256);
        assert_eq!(cfg.d_in(), 128);
        assert_eq!(cfg.d_out(), 432);
        assert_eq!(cfg.num_params(), 144_048);
        for n in [2, 3, 4, 8] {
            let c = MetaLearnerConfig::new(8, n, 4);
            assert_eq!(c.d_out(), 9 * 2 * n * n + 9 * n * n);
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let cfg = MetaLearnerConfig::new(4, 2, 8);
        let ml: ParameterStore<f32> = MetaLearnerConfig::new(4, 3, 8).init(0);
        assert!(cfg.check(&ml).is_err());
        let ok: ParameterStore<f32> = cfg.init(0);
        let short = SigmaVector {
            values: Tensor::zeros(&[3]),
            provenance: 0,
        };
        assert!(generate_weights(&cfg, &ok, &short).is_err());
    }

    #[test]
    fn zero_learner_gives_zero_fusion() {
        let cfg = MetaLearnerConfig::new(4, 3, 8);
        let mut ml: ParameterStore<f32> = cfg.init(1);
        let names: Vec<String> = ml.names().cloned().collect();
        for n in names {
            ml.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let sigma = SigmaVector {
            values: Tensor::full(&[cfg.d_in()], 0.3),
            provenance: 0,
        };
        let w = generate_weights(&cfg, &ml, &sigma).unwrap();
        assert_eq!(w, FusionWeights::zeros(3));
        let s = Tensor::full(&[3, 5, 5], 1.0);
        let out = fuse(&s, &s, &w).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_learner_starts_at_passthrough() {
        let cfg = MetaLearnerConfig::new(4, 3, 8);
        let mut ml: ParameterStore<f32> = cfg.init(2);
        ml.get_mut("fc2.weight").unwrap().data_mut().fill(0.0);
        let sigma = SigmaVector {
            values: Tensor::full(&[cfg.d_in()], 0.7),
            provenance: 0,
        };
        assert_eq!(generate_weights(&cfg, &ml, &sigma).unwrap(), FusionWeights::passthrough(3));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = MetaLearnerConfig::new(4, 2, 16);
        let ml: ParameterStore<f32> = cfg.init(5);
        let sigma = SigmaVector {
            values: Tensor::from_vec(&[16], (0..16).map(|i| i as f32 * 0.01).collect()).unwrap(),
            provenance: 0,
        };
        assert_eq!(
            generate_weights(&cfg, &ml, &sigma).unwrap(),
            generate_weights(&cfg, &ml, &sigma).unwrap()
        );
    }

    #[test]
    fn mean_sigma_of_identical_batches() {
        let s = SigmaVector {
            values: Tensor::from_vec(&[3], vec![1.0f32, -2.0, 0.5]).unwrap(),
            provenance: 3,
        };
        assert_eq!(mean_sigma(&[s.clone()]).unwrap().values, s.values);
        assert_eq!(mean_sigma(&[s.clone(), s.clone()]).unwrap().values, s.values);
        assert!(mean_sigma::<f32>(&[]).is_err());
    }

    #[test]
    fn fusion_channel_mismatch() {
        let w = FusionWeights::<f32>::zeros(3);
        let s = Tensor::zeros(&[2, 4, 4]);
        assert!(fuse(&s, &s, &w).is_err());
        let s3 = Tensor::zeros(&[3, 4, 4]);
        assert!(fuse(&s3, &Tensor::zeros(&[3, 4, 5]), &w).is_err());
    }

    fn branch(seed: u64, c: usize, n: usize, side: usize) -> (BranchOutput<f64>, Head<f64>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let features = t(&[c, side, side]).map(|v: f64| v.max(0.0));
        let head = Head {
            weight: t(&[n, c, 1, 1]),
            bias: t(&[n]),
        };
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let w = g.constant(head.weight.clone());
        let b = g.constant(head.bias.clone());
        let z = g.conv2d(f, w, Some(b)).unwrap();
        let logits = g.value(z).clone();
        (BranchOutput { logits, features }, head)
    }

    fn sigma_loss(b1: &BranchOutput<f64>, b2: &BranchOutput<f64>, h1: &Head<f64>, h2: &Head<f64>, y: &Arc<Vec<u16>>, ignore: u16) -> f64 {
        let norm = counted_pixels([y.as_slice()], ignore) as f64;
        let mut g = Graph::new();
        let f1 = g.constant(b1.features.clone());
        let f2 = g.constant(b2.features.clone());
        let w1 = g.constant(h1.weight.clone());
        let w2 = g.constant(h2.weight.clone());
        let c1 = g.constant(h1.bias.clone());
        let c2 = g.constant(h2.bias.clone());
        let z1 = g.conv2d(f1, w1, Some(c1)).unwrap();
        let z2 = g.conv2d(f2, w2, Some(c2)).unwrap();
        let z2 = align_on(&mut g, z2, 4).unwrap();
        let l1 = g.cross_entropy(z1, y.clone(), ignore, norm).unwrap();
        let l2 = g.cross_entropy(z2, y.clone(), ignore, norm).unwrap();
        g.value(l1).data()[0] + g.value(l2).data()[0]
    }

    #[test]
    fn sigma_is_negative_finite_difference() {
        let (c, n, side) = (3, 3, 8);
        let (b1, h1) = branch(1, c, n, side);
        let (b2, h2) = branch(2, c, n, side);
        let y: Arc<Vec<u16>> = Arc::new((0..side * side).map(|i| ((i * 7) % (n + 1)) as u16).collect());
        let sample = SigmaSample { s1: &b1, s2: &b2, y1: y.clone() };
        let sigma = build_sigma(&[sample], &h1, &h2, 4, n as u16, 0).unwrap();
        assert_eq!(sigma.values.len(), 2 * c * n);
        let eps = 1e-3;
        for i in 0..sigma.values.len() {
            let perturbed = |d: f64| {
                let (mut p1, mut p2) = (h1.clone(), h2.clone());
                if i < c * n {
                    p1.weight.data_mut()[i] += d;
                } else {
                    p2.weight.data_mut()[i - c * n] += d;
                }
                sigma_loss(&b1, &b2, &p1, &p2, &y, n as u16)
            };
            let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
            let a = sigma.values.data()[i];
            let rel = (a + fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-5, "coordinate {i}: sigma {a}, fd {fd}");
        }
        // a small step along sigma lowers the loss
        let step = 1e-4;
        let (mut p1, mut p2) = (h1.clone(), h2.clone());
        for (i, v) in sigma.values.data().iter().enumerate() {
            if i < c * n {
                p1.weight.data_mut()[i] += step * v;
            } else {
                p2.weight.data_mut()[i - c * n] += step * v;
            }
        }
        assert!(sigma_loss(&b1, &b2, &p1, &p2, &y, n as u16) < sigma_loss(&b1, &b2, &h1, &h2, &y, n as u16));
    }

    #[test]
    fn fully_ignored_labels_give_zero_sigma() {
        let (b1, h1) = branch(3, 2, 2, 4);
        let y = Arc::new(vec![2u16; 16]);
        let sample = SigmaSample { s1: &b1, s2: &b1, y1: y };
        let sigma = build_sigma(&[sample], &h1, &h1, 4, 2, 0).unwrap();
        assert!(sigma.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn passthrough_kernels_reproduce_softmax() {
        let n = 3;
        let (b1, _) = branch(4, 2, n, 6);
        let (b2, _) = branch(5, 2, n, 6);
        let w = FusionWeights::<f64>::passthrough(n);
        let out = fuse(&b1.logits, &b2.logits, &w).unwrap();
        let mut g = Graph::new();
        let v = g.constant(b1.logits.clone());
        let p = g.softmax(v).unwrap();
        for (a, b) in out.data().iter().zip(g.value(p).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_is_translation_equivariant_inside() {
        let n = 2;
        let side = 10;
        let (b1, _) = branch(6, 2, n, side + 1);
        let (b2, _) = branch(7, 2, n, side + 1);
        let w = FusionWeights::<f64>::kaiming(n, 3);
        let window = |t: &Tensor<f64>, o: usize| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let c = g.crop(v, o, o, side, side).unwrap();
            g.value(c).clone()
        };
        let a = fuse(&window(&b1.logits, 0), &window(&b2.logits, 0), &w).unwrap();
        let b = fuse(&window(&b1.logits, 1), &window(&b2.logits, 1), &w).unwrap();
        for c in 0..n {
            for y in 3..side - 3 {
                for x in 3..side - 3 {
                    let i = (c * side + y + 1) * side + x + 1;
                    let j = (c * side + y) * side + x;
                    assert!((a.data()[i] - b.data()[j]).abs() < 1e-12);
                }
            }
        }
    }
}
