//! Loss, training logs and the three-step training scheme: meta-branch, then
//! the memory-recall adapters, then the fusion meta-learner.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{self, counted_pixels, BackboneConfig, LabelledPatch};
use crate::error::{MsnError, Result};
use crate::evaluation::ConfusionMatrix;
use crate::kernels;
use crate::mainbody::{memrm_grad, memrm_init, FeatureMemory, GapProfile, MultiBranch, RecallSample};
use crate::meta_fusion::{
    self, align_to_top, build_sigma, direct_fusion_grad, meta_fusion_grad, BranchOutput, FusionInput,
    FusionWeights, Head, MetaLearnerConfig, SigmaSample, SigmaVector,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParameterStore;
use crate::pyramid::PatchTriple;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub epochs_step3: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Triples drawn from the training split to select step-2/3 checkpoints.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

fn default_probe() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_step1: 30,
            epochs_step2: 10,
            epochs_step3: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            seed: 0,
            probe_size: default_probe(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_step1 == 0 || self.epochs_step2 == 0 || self.epochs_step3 == 0 {
            return Err(MsnError::Config("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(MsnError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MsnError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `S1`, `S2`, `S3` or `S`.
    pub head: String,
    /// Pixel-mean loss over the fit set, measured after the epoch.
    pub loss: f64,
    /// Probe mIoU after the epoch, if a probe set was given.
    pub miou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(step: usize) -> Self {
        Self {
            step,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if !record.loss.is_finite() {
            return Err(MsnError::NonFinite(format!(
                "{} loss in epoch {}",
                record.head, record.epoch
            )));
        }
        if let Some(last) = self.records.iter().rev().find(|r| r.head == record.head) {
            if record.epoch <= last.epoch {
                return Err(MsnError::Config(format!(
                    "epoch {} logged after {} for {}",
                    record.epoch, last.epoch, record.head
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn losses(&self, head: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.head == head)
            .map(|r| r.loss)
            .collect()
    }

    pub fn heads(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.head) {
                out.push(r.head.clone());
            }
        }
        out
    }

    pub fn file_name(step: usize) -> String {
        format!("log_step{step}.csv")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_to(&dir.join(Self::file_name(self.step)))
    }

    pub fn load(dir: &Path, step: usize) -> Result<Self> {
        Self::load_from(&dir.join(Self::file_name(step)), step)
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| MsnError::io(path, e))
    }

    pub fn load_from(path: &Path, step: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut log = Self::new(step);
        for rec in r.deserialize() {
            log.push(rec.map_err(|e| csv_err(path, e))?)?;
        }
        Ok(log)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> MsnError {
    MsnError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Mean cross-entropy of `[N_c, H, W]` logits against labels, with label
/// `N_c` ignored.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u16]) -> Result<T> {
    let (c, _, _) = logits.chw()?;
    let ignore = c as u16;
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let norm = T::lit(counted_pixels([labels], ignore) as f64);
    let l = g.cross_entropy(z, Arc::new(labels.to_vec()), ignore, norm)?;
    Ok(g.value(l).data()[0])
}

/// Shuffled index batches for one epoch; the order depends only on `seed`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// In-order batches, used where a fixed partition is needed.
pub fn ordered_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn mix(seed: u64, step: u64, epoch: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn probe_miou<F>(n_classes: usize, items: usize, mut predict: F) -> Result<Option<f64>>
where
    F: FnMut(usize, &mut ConfusionMatrix) -> Result<()>,
{
    if items == 0 {
        return Ok(None);
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for i in 0..items {
        predict(i, &mut cm)?;
    }
    Ok(cm.miou().ok().map(|m| m.miou))
}

/// Keeps the parameters of the epoch with the best probe score (the earliest
/// on ties, the latest when there is no probe).
struct Best<S> {
    state: Option<S>,
    score: f64,
}

impl<S> Best<S> {
    fn new() -> Self {
        Self {
            state: None,
            score: f64::NEG_INFINITY,
        }
    }

    fn offer(&mut self, miou: Option<f64>, state: impl FnOnce() -> S) {
        match miou {
            Some(m) if m > self.score => {
                self.score = m;
                self.state = Some(state());
            }
            None => self.state = Some(state()),
            _ => {}
        }
    }
}

/// Pixel-mean cross-entropy over a whole set, from each item's logits and
/// labels (label `N_c` ignored).
fn set_loss<F>(items: usize, mut item: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<(Tensor<f32>, Arc<Vec<u16>>)>,
{
    let (mut sum, mut count) = (0f64, 0usize);
    for i in 0..items {
        let (z, y) = item(i)?;
        let (c, h, w) = z.chw()?;
        let (s, _) = kernels::nll_sum(z.data(), c, h * w, &y, c as u16);
        sum += s as f64;
        count += counted_pixels([y.as_slice()], c as u16);
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Fit-set loss of the meta-fusion, each in-order batch fused with the weights
/// generated from its own gradient vector.
fn meta_fusion_set_loss(
    ml_cfg: &MetaLearnerConfig,
    ml: &ParameterStore<f32>,
    sigmas: &[SigmaVector<f32>],
    fit: &[FusionSample],
    batch_size: usize,
) -> Result<f64> {
    let batches = ordered_batches(fit.len(), batch_size);
    let mut order = Vec::with_capacity(fit.len());
    let mut weights = Vec::with_capacity(batches.len());
    for (idx, sigma) in batches.iter().zip(sigmas) {
        weights.push(meta_fusion::generate_weights(ml_cfg, ml, sigma)?);
        order.extend(idx.iter().map(|&i| (i, weights.len() - 1)));
    }
    set_loss(order.len(), |j| {
        let (i, b) = order[j];
        Ok((meta_fusion::fuse(&fit[i].s1.logits, &fit[i].s2_aligned, &weights[b])?, fit[i].y1.clone()))
    })
}

struct Stopwatch(Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(Instant::now())
    }

    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn labelled(triples: &[PatchTriple], level: usize) -> Vec<LabelledPatch> {
    triples
        .iter()
        .map(|t| LabelledPatch {
            x: t.x[level].clone(),
            y: Arc::new(t.y[level].clone()),
        })
        .collect()
}

fn backbone_probe(
    params: &ParameterStore<f32>,
    cfg: &BackboneConfig,
    probe: &[LabelledPatch],
) -> Result<Option<f64>> {
    let ignore = cfg.n_classes as u16;
    probe_miou(cfg.n_classes, probe.len(), |i, cm| {
        let out = backbone::forward(params, cfg, &probe[i].x, &[])?;
        cm.add(&out.logits.argmax_channels()?, &probe[i].y, ignore)
    })
}

/// Trains a full backbone on level `level` of `fit`. Used for the meta-branch
/// and for the independently trained branches of the multi-branch baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_backbone(
    fit: &[PatchTriple],
    probe: &[PatchTriple],
    level: usize,
    cfg: &BackboneConfig,
    tc: &TrainConfig,
    init_seed: u64,
    order_seed: u64,
    head: &str,
) -> Result<(ParameterStore<f32>, TrainLog)> {
    tc.validate()?;
    cfg.validate()?;
    if fit.is_empty() {
        return Err(MsnError::Empty("no training triples".into()));
    }
    let data = labelled(fit, level);
    let probe = labelled(probe, level);
    let mut params: ParameterStore<f32> = cfg.init(init_seed);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut log = TrainLog::new(1);
    let mut best = Best::new();
    let mut batch_id = 0;
    for epoch in 1..=tc.epochs_step1 {
        let clock = Stopwatch::start();
        let batches = epoch_batches(data.len(), tc.batch_size, mix(order_seed, 1, epoch as u64));
        for idx in &batches {
            let batch: Vec<LabelledPatch> = idx.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = backbone::grad(&params, cfg, &batch, batch_id)?;
            if batch_id == 0 {
                loss_sanity(loss as f64, cfg.n_classes);
            }
            adam_step(&mut params, &grads, &mut adam, tc.learning_rate)?;
            batch_id += 1;
        }
        let loss = set_loss(data.len(), |i| {
            Ok((backbone::forward(&params, cfg, &data[i].x, &[])?.logits, data[i].y.clone()))
        })?;
        let miou = backbone_probe(&params, cfg, &probe)?;
        let rec = EpochRecord {
            epoch,
            head: head.into(),
            loss,
            miou,
            seconds: clock.seconds(),
        };
        info!("{head} epoch {epoch}: loss {:.4}, probe mIoU {:?}", rec.loss, miou);
        log.push(rec)?;
        best.offer(miou, || params.clone());
    }
    let params = best.state.unwrap_or(params);
    Ok((params.freeze(), log))
}

/// Under Kaiming init on centred inputs the first loss should sit near `ln N_c`.
fn loss_sanity(loss: f64, n_classes: usize) {
    let expected = (n_classes as f64).ln();
    if (loss - expected).abs() > 0.05 * expected {
        warn!("initial loss {loss:.4} is more than 5% away from ln {n_classes} = {expected:.4}");
    }
}

/// Step 1: trains the meta-branch on the lowest-magnification level and
/// returns it fully frozen.
pub fn step1_train_meta(
    fit: &[PatchTriple],
    probe: &[PatchTriple],
    cfg: &BackboneConfig,
    tc: &TrainConfig,
) -> Result<(ParameterStore<f32>, TrainLog)> {
    train_backbone(fit, probe, 2, cfg, tc, tc.seed, tc.seed, "S3")
}

fn verify_unchanged(before: &str, store: &ParameterStore<f32>) -> Result<()> {
    let after = store.checksum();
    if after != before {
        return Err(MsnError::FrozenChanged {
            before: before.to_string(),
            after,
        });
    }
    Ok(())
}

/// Step 2: trains each non-meta branch's memory-recall adapters with the
/// meta-branch frozen. Returns the adapters of branches 1 and 2.
#[allow(clippy::too_many_arguments)]
pub fn step2_train_memrm(
    fit: &[PatchTriple],
    probe: &[PatchTriple],
    meta: &ParameterStore<f32>,
    cfg: &BackboneConfig,
    profiles: &[GapProfile; 2],
    factors: [usize; 3],
    tc: &TrainConfig,
) -> Result<([ParameterStore<f32>; 2], TrainLog)> {
    tc.validate()?;
    meta.ensure_frozen()?;
    if fit.is_empty() {
        return Err(MsnError::Empty("no sub-training triples".into()));
    }
    let meta_sum = meta.checksum();
    let mut model = MultiBranch {
        cfg: cfg.clone(),
        factors,
        meta: meta.clone(),
        memrm: [ParameterStore::new(), ParameterStore::new()],
        profiles: profiles.clone(),
    };
    let memories = |ts: &[PatchTriple]| -> Result<Vec<FeatureMemory<f32>>> {
        ts.iter().map(|t| model.meta_pass(t).map(|(_, m)| m)).collect()
    };
    let fit_mem = memories(fit)?;
    let probe_mem = memories(probe)?;
    let ignore = cfg.n_classes as u16;
    let mut log = TrainLog::new(2);
    let mut out = [ParameterStore::new(), ParameterStore::new()];
    let mut batch_id = 0;
    for k in 1..=2usize {
        let level = k - 1;
        let head = format!("S{k}");
        let profile = &profiles[level];
        let ratio = model.ratio(k);
        let data = labelled(fit, level);
        let probe_data = labelled(probe, level);
        let mut memrm: ParameterStore<f32> = memrm_init(cfg, &profile.gap_layers);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut best = Best::new();
        let frozen_meta = meta.clone().freeze();
        for epoch in 1..=tc.epochs_step2 {
            let clock = Stopwatch::start();
            let batches = epoch_batches(data.len(), tc.batch_size, mix(tc.seed, 2 + 10 * k as u64, epoch as u64));
            for idx in &batches {
                let batch: Vec<RecallSample<'_, f32>> = idx
                    .iter()
                    .map(|&i| RecallSample {
                        x: &fit[i].x[level],
                        patch_id: fit[i].patch_id,
                        memory: &fit_mem[i],
                        y: data[i].y.clone(),
                    })
                    .collect();
                let (_, grads) = memrm_grad(&frozen_meta, &memrm, cfg, &profile.gap_layers, ratio, &batch, batch_id)?;
                adam_step(&mut memrm, &grads, &mut adam, tc.learning_rate)?;
                batch_id += 1;
            }
            verify_unchanged(&meta_sum, meta)?;
            model.memrm[level] = memrm.clone();
            let loss = set_loss(fit.len(), |i| {
                Ok((model.branch(k, &fit[i], &fit_mem[i])?.logits, data[i].y.clone()))
            })?;
            let miou = probe_miou(cfg.n_classes, probe.len(), |i, cm| {
                let o = model.branch(k, &probe[i], &probe_mem[i])?;
                cm.add(&o.logits.argmax_channels()?, &probe_data[i].y, ignore)
            })?;
            let rec = EpochRecord {
                epoch,
                head: head.clone(),
                loss,
                miou,
                seconds: clock.seconds(),
            };
            info!("{head} epoch {epoch}: loss {:.4}, probe mIoU {:?}", rec.loss, miou);
            log.push(rec)?;
            best.offer(miou, || memrm.clone());
        }
        let chosen = best.state.unwrap_or(memrm).freeze();
        model.memrm[level] = chosen.clone();
        out[level] = chosen;
    }
    verify_unchanged(&meta_sum, meta)?;
    Ok((out, log))
}

/// Frozen branch outputs of one triple as consumed by the fusion stage.
#[derive(Clone, Debug)]
pub struct FusionSample {
    pub patch_id: u64,
    pub s1: BranchOutput<f32>,
    pub s2: BranchOutput<f32>,
    /// `S2` mapped onto the X1 footprint.
    pub s2_aligned: Tensor<f32>,
    pub y1: Arc<Vec<u16>>,
}

/// Runs branches 1 and 2 on every triple.
pub fn fusion_samples(model: &MultiBranch, triples: &[PatchTriple]) -> Result<Vec<FusionSample>> {
    let ratio12 = model.factors[0] / model.factors[1];
    triples
        .iter()
        .map(|t| {
            let (_, memory) = model.meta_pass(t)?;
            let o1 = model.branch(1, t, &memory)?;
            let o2 = model.branch(2, t, &memory)?;
            let s2_aligned = align_to_top(&o2.logits, ratio12)?;
            Ok(FusionSample {
                patch_id: t.patch_id,
                s1: BranchOutput {
                    logits: o1.logits,
                    features: o1.features,
                },
                s2: BranchOutput {
                    logits: o2.logits,
                    features: o2.features,
                },
                s2_aligned,
                y1: Arc::new(t.y[0].clone()),
            })
        })
        .collect()
}

/// The shared output head of the weight-shared branches.
pub fn shared_head(model: &MultiBranch) -> Result<Head<f32>> {
    let (w, b) = model.cfg.head_names();
    Ok(Head {
        weight: model.meta.get(&w)?.clone(),
        bias: model.meta.get(&b)?.clone(),
    })
}

/// Gradient vector of a batch of fusion samples.
pub fn batch_sigma(model: &MultiBranch, samples: &[FusionSample], idx: &[usize], batch_id: u64) -> Result<SigmaVector<f32>> {
    let head = shared_head(model)?;
    let sig: Vec<SigmaSample<'_, f32>> = idx
        .iter()
        .map(|&i| SigmaSample {
            s1: &samples[i].s1,
            s2: &samples[i].s2,
            y1: samples[i].y1.clone(),
        })
        .collect();
    build_sigma(
        &sig,
        &head,
        &head,
        model.factors[0] / model.factors[1],
        model.cfg.n_classes as u16,
        batch_id,
    )
}

/// Per-batch gradient vectors over a fixed in-order partition of `samples`.
pub fn partition_sigmas(model: &MultiBranch, samples: &[FusionSample], batch_size: usize) -> Result<Vec<SigmaVector<f32>>> {
    ordered_batches(samples.len(), batch_size)
        .iter()
        .enumerate()
        .map(|(b, idx)| batch_sigma(model, samples, idx, b as u64))
        .collect()
}

fn fusion_inputs<'a>(samples: &'a [FusionSample], idx: &[usize]) -> Vec<FusionInput<'a, f32>> {
    idx.iter()
        .map(|&i| FusionInput {
            s1: &samples[i].s1.logits,
            s2a: &samples[i].s2_aligned,
            y1: samples[i].y1.clone(),
        })
        .collect()
}

fn fusion_probe(weights: &FusionWeights<f32>, probe: &[FusionSample], n_classes: usize) -> Result<Option<f64>> {
    probe_miou(n_classes, probe.len(), |i, cm| {
        let s = meta_fusion::fuse(&probe[i].s1.logits, &probe[i].s2_aligned, weights)?;
        cm.add(&s.argmax_channels()?, &probe[i].y1, n_classes as u16)
    })
}

#[derive(Clone, Debug)]
pub struct Step3Output {
    pub meta_learner: ParameterStore<f32>,
    pub sigma_bar: SigmaVector<f32>,
    pub weights: FusionWeights<f32>,
    pub log: TrainLog,
}

/// Step 3: trains the meta-learner on `L(S, Y1)` with per-batch gradient
/// vectors, everything else frozen, then fixes the test-time weights from the
/// mean gradient vector of the fit set.
pub fn step3_train_fusion(
    fit: &[FusionSample],
    probe: &[FusionSample],
    model: &MultiBranch,
    ml_cfg: &MetaLearnerConfig,
    tc: &TrainConfig,
) -> Result<Step3Output> {
    tc.validate()?;
    if fit.is_empty() {
        return Err(MsnError::Empty("no sub-training samples".into()));
    }
    model.meta.ensure_frozen()?;
    for m in &model.memrm {
        m.ensure_frozen()?;
    }
    let frozen_sum = frozen_checksum(model);
    let ignore = model.cfg.n_classes as u16;
    let fixed = partition_sigmas(model, fit, tc.batch_size)?;
    let bar = meta_fusion::mean_sigma(&fixed)?;
    let mut ml: ParameterStore<f32> = ml_cfg.init(tc.seed.wrapping_add(3));
    let mut adam = AdamState::new(AdamConfig::default());
    let mut log = TrainLog::new(3);
    let mut best = Best::new();
    let mut batch_id = 0;
    for epoch in 1..=tc.epochs_step3 {
        let clock = Stopwatch::start();
        let batches = epoch_batches(fit.len(), tc.batch_size, mix(tc.seed, 3, epoch as u64));
        for idx in &batches {
            let sigma = batch_sigma(model, fit, idx, batch_id as u64)?;
            let (_, grads) = meta_fusion_grad(ml_cfg, &ml, &sigma, &fusion_inputs(fit, idx), ignore, batch_id)?;
            adam_step(&mut ml, &grads, &mut adam, tc.learning_rate)?;
            batch_id += 1;
        }
        if frozen_checksum(model) != frozen_sum {
            return Err(MsnError::FrozenChanged {
                before: frozen_sum,
                after: frozen_checksum(model),
            });
        }
        let loss = meta_fusion_set_loss(ml_cfg, &ml, &fixed, fit, tc.batch_size)?;
        let weights = meta_fusion::generate_weights(ml_cfg, &ml, &bar)?;
        let miou = fusion_probe(&weights, probe, model.cfg.n_classes)?;
        let rec = EpochRecord {
            epoch,
            head: "S".into(),
            loss,
            miou,
            seconds: clock.seconds(),
        };
        info!("S epoch {epoch}: loss {:.4}, probe mIoU {:?}", rec.loss, miou);
        log.push(rec)?;
        best.offer(miou, || ml.clone());
    }
    let ml = best.state.unwrap_or(ml).freeze();
    let (sigma_bar, weights) = meta_fusion::finalize_inference_weights(ml_cfg, &ml, &fixed)?;
    Ok(Step3Output {
        meta_learner: ml,
        sigma_bar,
        weights,
        log,
    })
}

fn frozen_checksum(model: &MultiBranch) -> String {
    format!(
        "{}:{}:{}",
        model.meta.checksum(),
        model.memrm[0].checksum(),
        model.memrm[1].checksum()
    )
}

/// The "w/o Meta" baseline: the same two fusion convolutions, started from the
/// same passthrough kernels and trained directly with the same data order and
/// optimizer.
pub fn train_direct_fusion(
    fit: &[FusionSample],
    probe: &[FusionSample],
    n_classes: usize,
    tc: &TrainConfig,
    epochs: usize,
) -> Result<(FusionWeights<f32>, TrainLog)> {
    tc.validate()?;
    if fit.is_empty() {
        return Err(MsnError::Empty("no sub-training samples".into()));
    }
    let ignore = n_classes as u16;
    let mut store = FusionWeights::<f32>::passthrough(n_classes).to_store(true);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut log = TrainLog::new(3);
    let mut best = Best::new();
    let mut batch_id = 0;
    for epoch in 1..=epochs {
        let clock = Stopwatch::start();
        let batches = epoch_batches(fit.len(), tc.batch_size, mix(tc.seed, 3, epoch as u64));
        for idx in &batches {
            let (_, grads) = direct_fusion_grad(&store, &fusion_inputs(fit, idx), ignore, batch_id)?;
            adam_step(&mut store, &grads, &mut adam, tc.learning_rate)?;
            batch_id += 1;
        }
        let weights = FusionWeights::from_store(&store)?;
        let loss = set_loss(fit.len(), |i| {
            Ok((meta_fusion::fuse(&fit[i].s1.logits, &fit[i].s2_aligned, &weights)?, fit[i].y1.clone()))
        })?;
        let miou = fusion_probe(&weights, probe, n_classes)?;
        log.push(EpochRecord {
            epoch,
            head: "S".into(),
            loss,
            miou,
            seconds: clock.seconds(),
        })?;
        best.offer(miou, || weights.clone());
    }
    let weights = match best.state {
        Some(w) => w,
        None => FusionWeights::from_store(&store)?,
    };
    Ok((weights, log))
}
