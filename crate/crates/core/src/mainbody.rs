//! The weight-shared multi-resolution body: gap-layer detection, the feature
//! memory filled by the meta-branch, and the memory-recall adapters used by
//! the non-meta branches.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{
    self, activation_stats, bind, collect_grads, counted_pixels, reduce_gradients, BackboneConfig,
    BackboneVars, Bound, LayerActivationStats, SegmentationMap,
};
use crate::error::{MsnError, Result};
use crate::params::{kaiming_normal, NamedGrads, ParameterStore};
use crate::pyramid::PatchTriple;
use crate::tensor::{Real, Tensor};

pub const GAP_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 0.5;
const FALLBACK_COUNT: usize = 2;

/// Per-layer gap scores of one non-meta branch against the meta-branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    /// 1-based branch number (1 = highest magnification).
    pub branch: usize,
    pub tau: f64,
    pub scores: Vec<f64>,
    pub gap_layers: Vec<usize>,
    /// True when no layer exceeded `tau` and the top-scoring layers were used.
    pub fallback: bool,
    pub meta_stats: Vec<LayerActivationStats>,
    pub branch_stats: Vec<LayerActivationStats>,
}

impl GapProfile {
    pub fn file_name(branch: usize) -> String {
        format!("gaps_x{branch}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MsnError::io(dir, e))?;
        let path = dir.join(Self::file_name(self.branch));
        let json = serde_json::to_string_pretty(self).map_err(|e| MsnError::json(&path, e))?;
        fs::write(&path, json).map_err(|e| MsnError::io(&path, e))
    }

    pub fn load(dir: &Path, branch: usize) -> Result<Self> {
        let path = dir.join(Self::file_name(branch));
        let text = fs::read_to_string(&path).map_err(|e| MsnError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| MsnError::json(&path, e))
    }
}

/// Relative mean deviation plus relative variance deviation, per layer.
pub fn gap_scores(meta: &[LayerActivationStats], branch: &[LayerActivationStats]) -> Vec<f64> {
    meta.iter()
        .zip(branch)
        .map(|(m, b)| {
            (b.mean - m.mean).abs() / (m.mean.abs() + GAP_EPS)
                + (b.variance - m.variance).abs() / (m.variance + GAP_EPS)
        })
        .collect()
}

/// Layers scoring above `tau`, excluding `head`. Returns the set and whether
/// the top-2 fallback (ties to the lower index) was needed.
pub fn select_gaps(scores: &[f64], tau: f64, head: usize) -> (Vec<usize>, bool) {
    let above: Vec<usize> = (0..scores.len())
        .filter(|&l| l != head && scores[l] > tau)
        .collect();
    if !above.is_empty() {
        return (above, false);
    }
    let mut ranked: Vec<usize> = (0..scores.len()).filter(|&l| l != head).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranked.truncate(FALLBACK_COUNT);
    ranked.sort_unstable();
    (ranked, true)
}

/// Compares activation statistics of the frozen meta-branch on meta-resolution
/// calibration patches with those on branch `branch`'s patches.
pub fn detect_gaps<T: Real>(
    meta_params: &ParameterStore<T>,
    cfg: &BackboneConfig,
    calib_x3: &[Tensor<f32>],
    calib_xk: &[Tensor<f32>],
    tau: f64,
    branch: usize,
) -> Result<GapProfile> {
    meta_params.ensure_frozen()?;
    let meta_stats = activation_stats(meta_params, cfg, calib_x3)?;
    let branch_stats = activation_stats(meta_params, cfg, calib_xk)?;
    let scores = gap_scores(&meta_stats, &branch_stats);
    let (gap_layers, fallback) = select_gaps(&scores, tau, cfg.head_index());
    Ok(GapProfile {
        branch,
        tau,
        scores,
        gap_layers,
        fallback,
        meta_stats,
        branch_stats,
    })
}

/// Union of the gap layers of several profiles.
pub fn union_gaps(profiles: &[&GapProfile]) -> Vec<usize> {
    profiles
        .iter()
        .flat_map(|p| p.gap_layers.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Meta-features recorded by one meta-branch pass, scoped to one patch triple.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMemory<T> {
    scope: u64,
    entries: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> FeatureMemory<T> {
    pub fn scope(&self) -> u64 {
        self.scope
    }

    pub fn entries(&self) -> &BTreeMap<usize, Tensor<T>> {
        &self.entries
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor<T>> {
        self.entries.get(&layer)
    }

    /// Checks that this memory was filled for `patch_id`.
    pub fn check_scope(&self, patch_id: u64) -> Result<()> {
        if self.scope != patch_id {
            return Err(MsnError::StaleMemory {
                memory_scope: self.scope,
                patch_id,
            });
        }
        Ok(())
    }

    /// Returns a copy with one entry replaced; only used by perturbation probes.
    #[doc(hidden)]
    pub fn with_entry(&self, layer: usize, value: Tensor<T>) -> Self {
        let mut out = self.clone();
        out.entries.insert(layer, value);
        out
    }
}

/// The meta-branch forward on `x3`: its segmentation map and the memory of
/// its outputs at `gaps`.
pub fn meta_forward<T: Real>(
    meta_params: &ParameterStore<T>,
    cfg: &BackboneConfig,
    x3: &Tensor<f32>,
    patch_id: u64,
    gaps: &[usize],
) -> Result<(SegmentationMap<T>, FeatureMemory<T>)> {
    let out = backbone::forward(meta_params, cfg, x3, gaps)?;
    Ok((
        out.logits,
        FeatureMemory {
            scope: patch_id,
            entries: out.tapped,
        },
    ))
}

pub fn conv_a_weight(layer: usize) -> String {
    format!("l{layer}.conv_a.weight")
}

pub fn conv_a_bias(layer: usize) -> String {
    format!("l{layer}.conv_a.bias")
}

pub fn conv_b_weight(layer: usize) -> String {
    format!("l{layer}.conv_b.weight")
}

pub fn conv_b_bias(layer: usize) -> String {
    format!("l{layer}.conv_b.bias")
}

/// Memory-recall adapters of one branch, one per gap layer, initialised as a
/// passthrough: `conv_a` copies `B` (the memory half starts at zero) and
/// `conv_b` is the identity. Gap-layer streams are post-ReLU, so an untrained
/// adapter reproduces the raw meta-branch exactly.
pub fn memrm_init<T: Real>(cfg: &BackboneConfig, gap_layers: &[usize]) -> ParameterStore<T> {
    let layers = cfg.layers();
    let mut store = ParameterStore::new();
    for &l in gap_layers {
        let c = layers[l].out_channels;
        store.insert(conv_a_weight(l), centred_identity(c, 2 * c), true);
        store.insert(conv_a_bias(l), Tensor::zeros(&[c]), true);
        store.insert(conv_b_weight(l), centred_identity(c, c), true);
        store.insert(conv_b_bias(l), Tensor::zeros(&[c]), true);
    }
    store
}

/// Randomly initialised adapters.
pub fn memrm_init_random<T: Real>(cfg: &BackboneConfig, gap_layers: &[usize], seed: u64) -> ParameterStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg.layers();
    let mut store = ParameterStore::new();
    for &l in gap_layers {
        let c = layers[l].out_channels;
        store.insert(conv_a_weight(l), kaiming_normal(&[c, 2 * c, 3, 3], 18 * c, &mut rng), true);
        store.insert(conv_a_bias(l), Tensor::zeros(&[c]), true);
        store.insert(conv_b_weight(l), kaiming_normal(&[c, c, 3, 3], 9 * c, &mut rng), true);
        store.insert(conv_b_bias(l), Tensor::zeros(&[c]), true);
    }
    store
}

/// `[out, in, 3, 3]` kernel mapping input channel `o` to output `o` through
/// the centre tap.
fn centred_identity<T: Real>(out: usize, inp: usize) -> Tensor<T> {
    let mut k = Tensor::zeros(&[out, inp, 3, 3]);
    for o in 0..out {
        k.data_mut()[(o * inp + o) * 9 + 4] = T::one();
    }
    k
}

/// Element count of one adapter for a `C`-channel layer.
pub fn memrm_layer_params(c: usize) -> usize {
    9 * 2 * c * c + c + 9 * c * c + c
}

/// Side of the centred crop for footprint ratio `ratio` (rounded up).
pub fn crop_side(side: usize, ratio: usize) -> usize {
    side.div_ceil(ratio)
}

/// Records `conv_b(ReLU(conv_a(cat(B, up(crop(A))))))` on `g`.
pub fn mem_rm_on<T: Real>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    ratio: usize,
    bound: &Bound,
    layer: usize,
) -> Result<Var> {
    if ratio <= 1 {
        return Err(MsnError::Config(format!(
            "footprint ratio must exceed 1, got {ratio}"
        )));
    }
    let (ca, h, w) = g.value(a).chw()?;
    if g.value(a).shape() != g.value(b).shape() {
        return Err(MsnError::Shape(format!(
            "meta-feature {:?} vs branch feature {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    let (sh, sw) = (crop_side(h, ratio), crop_side(w, ratio));
    let cropped = g.crop(a, (h - sh) / 2, (w - sw) / 2, sh, sw)?;
    let up = g.resize(cropped, h, w)?;
    let cat = g.concat(&[b, up])?;
    debug_assert_eq!(g.value(cat).chw()?.0, 2 * ca);
    let z = g.conv2d(cat, bound.get(&conv_a_weight(layer))?, Some(bound.get(&conv_a_bias(layer))?))?;
    let r = g.relu(z);
    g.conv2d(r, bound.get(&conv_b_weight(layer))?, Some(bound.get(&conv_b_bias(layer))?))
}

/// Tensor-level memory recall for one layer.
pub fn mem_rm<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ratio: usize,
    params: &ParameterStore<T>,
    layer: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = mem_rm_on(&mut g, av, bv, ratio, &bound, layer)?;
    Ok(g.value(out).clone())
}

/// Records a non-meta branch: the meta-branch weights with every gap layer's
/// output replaced by its memory-recall adapter.
#[allow(clippy::too_many_arguments)]
pub fn build_nonmeta<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    meta: &Bound,
    memrm: &Bound,
    memory: &FeatureMemory<T>,
    patch_id: u64,
    x: Var,
    gap_layers: &[usize],
    ratio: usize,
) -> Result<BackboneVars> {
    memory.check_scope(patch_id)?;
    let mut recalled = BTreeMap::new();
    for &l in gap_layers {
        let a = memory
            .get(l)
            .ok_or(MsnError::MissingMemory { layer: l, patch_id })?;
        recalled.insert(l, g.constant(a.clone()));
    }
    backbone::build(g, cfg, meta, x, &mut |g, l, out| match recalled.get(&l) {
        Some(&a) => mem_rm_on(g, a, out, ratio, memrm, l),
        None => Ok(out),
    })
}

/// A labelled input of a non-meta branch with the meta-branch memory of the
/// same triple.
#[derive(Clone, Debug)]
pub struct RecallSample<'a, T> {
    pub x: &'a Tensor<f32>,
    pub patch_id: u64,
    pub memory: &'a FeatureMemory<T>,
    pub y: Arc<Vec<u16>>,
}

/// Mean cross-entropy of a non-meta branch over `batch` and its gradient with
/// respect to the adapter tensors. The meta-branch must be frozen.
pub fn memrm_grad<T: Real>(
    meta: &ParameterStore<T>,
    memrm: &ParameterStore<T>,
    cfg: &BackboneConfig,
    gap_layers: &[usize],
    ratio: usize,
    batch: &[RecallSample<'_, T>],
    batch_id: usize,
) -> Result<(T, NamedGrads<T>)> {
    meta.ensure_frozen()?;
    let ignore = cfg.n_classes as u16;
    let norm = T::lit(counted_pixels(batch.iter().map(|s| s.y.as_slice()), ignore) as f64);
    reduce_gradients(batch, batch_id, |s| {
        let mut g = Graph::new();
        let mb = bind(&mut g, meta);
        let ab = bind(&mut g, memrm);
        let x = g.constant(backbone::prepare_input(s.x, cfg)?);
        let vars = build_nonmeta(&mut g, cfg, &mb, &ab, s.memory, s.patch_id, x, gap_layers, ratio)?;
        let l = g.cross_entropy(vars.logits, s.y.clone(), ignore, norm)?;
        let grads = g.backward(l);
        Ok((g.value(l).data()[0], collect_grads(&grads, &g, &ab)))
    })
}

/// Inference pass of a non-meta branch.
#[allow(clippy::too_many_arguments)]
pub fn nonmeta_forward<T: Real>(
    meta_params: &ParameterStore<T>,
    memrm_params: &ParameterStore<T>,
    cfg: &BackboneConfig,
    memory: &FeatureMemory<T>,
    xk: &Tensor<f32>,
    patch_id: u64,
    profile: &GapProfile,
    ratio: usize,
) -> Result<backbone::ForwardOutput<T>> {
    let mut g = Graph::new();
    let meta = bind(&mut g, &meta_params.clone().freeze());
    let adapters = bind(&mut g, &memrm_params.clone().freeze());
    let x = g.constant(backbone::prepare_input(xk, cfg)?);
    let vars = build_nonmeta(
        &mut g,
        cfg,
        &meta,
        &adapters,
        memory,
        patch_id,
        x,
        &profile.gap_layers,
        ratio,
    )?;
    Ok(backbone::ForwardOutput {
        logits: g.value(vars.logits).clone(),
        tapped: BTreeMap::new(),
        features: g.value(vars.features).clone(),
    })
}

/// Everything needed to run all three branches on a patch triple after step 2.
#[derive(Clone, Debug)]
pub struct MultiBranch {
    pub cfg: BackboneConfig,
    pub factors: [usize; 3],
    /// Frozen meta-branch weights.
    pub meta: ParameterStore<f32>,
    /// Adapters of branches 1 and 2.
    pub memrm: [ParameterStore<f32>; 2],
    pub profiles: [GapProfile; 2],
}

impl MultiBranch {
    /// Magnification ratio of branch `k` (1 or 2) to the meta-branch.
    pub fn ratio(&self, k: usize) -> usize {
        self.factors[k - 1] / self.factors[2]
    }

    /// Meta-branch logits and the memory covering both branches' gap layers.
    pub fn meta_pass(&self, t: &PatchTriple) -> Result<(SegmentationMap<f32>, FeatureMemory<f32>)> {
        let gaps = union_gaps(&[&self.profiles[0], &self.profiles[1]]);
        meta_forward(&self.meta, &self.cfg, &t.x[2], t.patch_id, &gaps)
    }

    /// Output of non-meta branch `k` (1 or 2) given the triple's memory.
    pub fn branch(
        &self,
        k: usize,
        t: &PatchTriple,
        memory: &FeatureMemory<f32>,
    ) -> Result<backbone::ForwardOutput<f32>> {
        nonmeta_forward(
            &self.meta,
            &self.memrm[k - 1],
            &self.cfg,
            memory,
            &t.x[k - 1],
            t.patch_id,
            &self.profiles[k - 1],
            self.ratio(k),
        )
    }
}
