//! Run configuration, the run-directory layout and the end-to-end stages
//! (data generation, gap analysis, the three training steps, evaluation).

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::error::{MsnError, Result};
use crate::evaluation::{self, count_params, stitched_score, EvalReport, MiouResult};
use crate::mainbody::{detect_gaps, GapProfile, MultiBranch};
use crate::meta_fusion::{align_to_top, fuse, FusionWeights, MetaLearnerConfig, DEFAULT_HIDDEN};
use crate::params::{checkpoint_digest, load_checkpoint, save_checkpoint, ParameterStore, MANIFEST};
use crate::pyramid::{
    generate_virtual_slide, load_slide, save_label_map, save_slide, DatasetSplit, PatchTriple,
    PyramidImage, ResolutionSpec, Split, SplitManifest,
};
use crate::tensor::Tensor;
use crate::training::{
    fusion_samples, step1_train_meta, step2_train_memrm, step3_train_fusion, train_backbone,
    train_direct_fusion, TrainConfig, TrainLog,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_slides: usize,
    /// Side of the top pyramid level in pixels.
    pub base_side: usize,
    pub n_train: usize,
    pub n_subtrain: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub resolution: ResolutionSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Gap-score threshold.
    pub tau: f64,
    /// Training triples used for gap calibration.
    pub calibration_size: usize,
    pub meta_hidden: usize,
    #[serde(default)]
    pub generate_bias: bool,
}

impl RunConfig {
    /// Ten 512x512 slides, 64-pixel patches and an 8-channel backbone.
    pub fn desk() -> Self {
        Self {
            resolution: ResolutionSpec {
                factors: [16, 4, 1],
                patch_size: 64,
            },
            backbone: BackboneConfig {
                n_classes: 4,
                base_channels: 8,
                encoder_blocks: 3,
                decoder_blocks: 3,
            },
            train: TrainConfig {
                epochs_step1: 30,
                epochs_step2: 10,
                epochs_step3: 10,
                batch_size: 8,
                learning_rate: 1e-3,
                seed: 7,
                probe_size: 64,
            },
            data: DataConfig {
                n_slides: 10,
                base_side: 512,
                n_train: 7,
                n_subtrain: 1,
                seed: 2024,
            },
            tau: crate::mainbody::DEFAULT_TAU,
            calibration_size: 32,
            meta_hidden: DEFAULT_HIDDEN,
            generate_bias: false,
        }
    }

    /// Full-size 8192-pixel slides, 256-pixel patches and a 16-channel backbone.
    pub fn full() -> Self {
        Self {
            resolution: ResolutionSpec::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                n_slides: 10,
                base_side: 8192,
                n_train: 7,
                n_subtrain: 1,
                seed: 2024,
            },
            tau: crate::mainbody::DEFAULT_TAU,
            calibration_size: 64,
            meta_hidden: DEFAULT_HIDDEN,
            generate_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolution.validate()?;
        self.backbone.validate()?;
        self.backbone.validate_input(self.resolution.patch_size)?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_train == 0 || d.n_subtrain == 0 || d.n_train + d.n_subtrain >= d.n_slides {
            return Err(MsnError::Config(format!(
                "{} slides cannot be split {}/{}/rest with a non-empty test split",
                d.n_slides, d.n_train, d.n_subtrain
            )));
        }
        let span = self.resolution.span();
        if d.base_side == 0 || d.base_side % span != 0 {
            return Err(MsnError::Config(format!(
                "base_side {} is not divisible by the factor span {span}",
                d.base_side
            )));
        }
        if d.base_side < self.resolution.patch_size {
            return Err(MsnError::Config(format!(
                "base_side {} is smaller than the patch size",
                d.base_side
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MsnError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.calibration_size == 0 || self.meta_hidden == 0 {
            return Err(MsnError::Config(
                "calibration_size and meta_hidden must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn meta_learner(&self) -> MetaLearnerConfig {
        MetaLearnerConfig {
            generate_bias: self.generate_bias,
            ..MetaLearnerConfig::new(
                self.backbone.last_channels(),
                self.backbone.n_classes,
                self.meta_hidden,
            )
        }
    }

    /// Reads and validates a JSON config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MsnError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| MsnError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| MsnError::json(path, e))?;
    fs::write(path, json).map_err(|e| MsnError::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|e| MsnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| MsnError::json(path, e))
}

/// Training split variant for steps 2 and 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Steps 2 and 3 on the sub-training split.
    Subtrain,
    /// Steps 2 and 3 on the training split.
    TrainSplit,
}

impl Variant {
    pub fn from_flag(use_train_split: bool) -> Self {
        if use_train_split {
            Self::TrainSplit
        } else {
            Self::Subtrain
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Self::Subtrain => "",
            Self::TrainSplit => "-trainsplit",
        }
    }
}

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

pub const LOCK_FILE: &str = ".lock";

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn slide(&self, id: u32) -> PathBuf {
        self.data().join(format!("slide_{id:010}"))
    }

    pub fn splits(&self) -> PathBuf {
        self.data().join("splits.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn step(&self, k: usize, variant: Variant) -> PathBuf {
        let suffix = if k == 1 { "" } else { variant.suffix() };
        self.checkpoints().join(format!("step{k}{suffix}"))
    }

    pub fn multibranch(&self) -> PathBuf {
        self.checkpoints().join("multibranch")
    }

    pub fn gaps(&self) -> PathBuf {
        self.root.join("gaps")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        let path = self.config();
        if !path.exists() {
            return Err(MsnError::MissingPrerequisite(format!(
                "{} (run gen-data first)",
                path.display()
            )));
        }
        RunConfig::load(&path)
    }

    /// Holds the directory's lockfile until dropped.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(|e| MsnError::io(&self.root, e))?;
        let path = self.root.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => MsnError::Locked(path.clone()),
                _ => MsnError::io(&path, e),
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path })
    }
}

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn is_complete(dir: &Path) -> bool {
    dir.join(MANIFEST).exists()
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(MsnError::AlreadyExists(path.to_path_buf()));
    }
    Ok(())
}

fn require_checkpoint(dir: &Path, what: &str) -> Result<()> {
    if !is_complete(dir) {
        return Err(MsnError::MissingPrerequisite(format!(
            "{} ({what})",
            dir.display()
        )));
    }
    Ok(())
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| MsnError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| MsnError::io(dir, e))
}

/// Per-slide digests of the generated data.
pub type SlideDigests = BTreeMap<u32, String>;

/// Generates the virtual slides and their split into `run/data`, and writes
/// the run config.
pub fn gen_data(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<SlideDigests> {
    cfg.validate()?;
    refuse_overwrite(&run.data(), force)?;
    reset_dir(&run.data())?;
    let mut digests = SlideDigests::new();
    for i in 0..cfg.data.n_slides {
        let seed = cfg.data.seed.wrapping_mul(1000).wrapping_add(i as u64 + 1);
        let slide = generate_virtual_slide(
            seed,
            cfg.data.base_side,
            cfg.backbone.n_classes,
            &cfg.resolution,
        )?;
        let dir = run.slide(slide.slide_id);
        save_slide(&slide, &dir)?;
        digests.insert(slide.slide_id, slide_digest(&dir)?);
    }
    let ids: Vec<u32> = digests.keys().copied().collect();
    let manifest = SplitManifest::assign(&ids, cfg.data.n_train, cfg.data.n_subtrain, cfg.data.seed)?;
    write_json(&run.splits(), &manifest)?;
    cfg.save(&run.config())?;
    info!("generated {} slides in {}", ids.len(), run.data().display());
    Ok(digests)
}

/// SHA-256 over the files of one saved slide.
pub fn slide_digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| MsnError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        h.update(fs::read(&p).map_err(|e| MsnError::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Loaded slides and their patch triples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub slides: Vec<PyramidImage>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn slides_in(&self, split: Split) -> Vec<&PyramidImage> {
        let ids = self.split.slide_assignment.slides_in(split);
        self.slides.iter().filter(|s| ids.contains(&s.slide_id)).collect()
    }
}

pub fn load_dataset(run: &RunDir, cfg: &RunConfig) -> Result<Dataset> {
    if !run.splits().exists() {
        return Err(MsnError::MissingPrerequisite(format!(
            "{} (run gen-data first)",
            run.splits().display()
        )));
    }
    let manifest: SplitManifest = read_json(&run.splits())?;
    let slides = manifest
        .slides
        .keys()
        .map(|&id| load_slide(&run.slide(id)))
        .collect::<Result<Vec<_>>>()?;
    let split = DatasetSplit::build(&slides, &manifest, &cfg.resolution)?;
    Ok(Dataset { slides, split })
}

/// Up to `k` evenly spaced items of `items`.
pub fn spread<T: Clone>(items: &[T], k: usize) -> Vec<T> {
    let n = items.len();
    if k >= n {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * n / k].clone()).collect()
}

/// Fit and probe triples of a training step.
pub fn step_splits(data: &Dataset, cfg: &RunConfig, step: usize, variant: Variant) -> (Vec<PatchTriple>, Vec<PatchTriple>) {
    let s = &data.split;
    match (step, variant) {
        (1, _) | (_, Variant::TrainSplit) => (s.train.clone(), s.subtrain.clone()),
        _ => (s.subtrain.clone(), spread(&s.train, cfg.train.probe_size)),
    }
}

pub fn train_step1(run: &RunDir, force: bool) -> Result<TrainLog> {
    let cfg = run.read_config()?;
    let data = load_dataset(run, &cfg)?;
    let dir = run.step(1, Variant::Subtrain);
    refuse_overwrite(&dir, force)?;
    let (fit, probe) = step_splits(&data, &cfg, 1, Variant::Subtrain);
    let (meta, log) = step1_train_meta(&fit, &probe, &cfg.backbone, &cfg.train)?;
    reset_dir(&dir)?;
    log.save(&dir)?;
    save_checkpoint(&meta, &dir, &BTreeMap::new())?;
    Ok(log)
}

pub fn load_meta(run: &RunDir) -> Result<ParameterStore<f32>> {
    let dir = run.step(1, Variant::Subtrain);
    require_checkpoint(&dir, "meta-branch checkpoint; run `train --step 1`")?;
    Ok(load_checkpoint::<f32>(&dir)?.freeze())
}

/// Detects the gap layers of branches 1 and 2 and writes `gaps/gaps_x<k>.json`.
pub fn analyze_gaps(run: &RunDir, force: bool) -> Result<[GapProfile; 2]> {
    let cfg = run.read_config()?;
    let meta = load_meta(run)?;
    let data = load_dataset(run, &cfg)?;
    let dir = run.gaps();
    refuse_overwrite(&dir.join(GapProfile::file_name(1)), force)?;
    let calib = spread(&data.split.train, cfg.calibration_size);
    let level = |k: usize| -> Vec<Tensor<f32>> { calib.iter().map(|t| t.x[k].clone()).collect() };
    let x3 = level(2);
    let mut out = Vec::new();
    for k in 1..=2 {
        out.push(detect_gaps(&meta, &cfg.backbone, &x3, &level(k - 1), cfg.tau, k)?);
    }
    fs::create_dir_all(&dir).map_err(|e| MsnError::io(&dir, e))?;
    for p in &out {
        p.save(&dir)?;
    }
    Ok(out.try_into().expect("two profiles"))
}

fn load_profiles(dir: &Path, hint: &str) -> Result<[GapProfile; 2]> {
    let mut out = Vec::new();
    for k in 1..=2 {
        let path = dir.join(GapProfile::file_name(k));
        if !path.exists() {
            return Err(MsnError::MissingPrerequisite(format!("{} ({hint})", path.display())));
        }
        out.push(GapProfile::load(dir, k)?);
    }
    Ok(out.try_into().expect("two profiles"))
}

pub fn train_step2(run: &RunDir, variant: Variant, force: bool) -> Result<TrainLog> {
    let cfg = run.read_config()?;
    let meta = load_meta(run)?;
    let profiles = load_profiles(&run.gaps(), "gap profiles; run `analyze-gaps`")?;
    let data = load_dataset(run, &cfg)?;
    let dir = run.step(2, variant);
    refuse_overwrite(&dir, force)?;
    let (fit, probe) = step_splits(&data, &cfg, 2, variant);
    let (memrm, log) = step2_train_memrm(
        &fit,
        &probe,
        &meta,
        &cfg.backbone,
        &profiles,
        cfg.resolution.factors,
        &cfg.train,
    )?;
    reset_dir(&dir)?;
    log.save(&dir)?;
    for p in &profiles {
        p.save(&dir)?;
    }
    let mut store = ParameterStore::new();
    store.merge_prefixed("x1.", &memrm[0]);
    store.merge_prefixed("x2.", &memrm[1]);
    save_checkpoint(&store, &dir, &BTreeMap::new())?;
    Ok(log)
}

/// The frozen meta-branch with the step-2 adapters of `variant`.
pub fn load_branches(run: &RunDir, cfg: &RunConfig, variant: Variant) -> Result<MultiBranch> {
    let meta = load_meta(run)?;
    let dir = run.step(2, variant);
    let flag = if variant == Variant::TrainSplit { " --use-train-split" } else { "" };
    require_checkpoint(&dir, &format!("adapter checkpoint; run `train --step 2{flag}`"))?;
    let store = load_checkpoint::<f32>(&dir)?;
    let profiles = load_profiles(&dir, "gap profiles used by step 2")?;
    Ok(MultiBranch {
        cfg: cfg.backbone.clone(),
        factors: cfg.resolution.factors,
        meta,
        memrm: [
            store.extract_prefixed("x1.").freeze(),
            store.extract_prefixed("x2.").freeze(),
        ],
        profiles,
    })
}

pub const DIRECT_LOG: &str = "log_direct.csv";

/// Output of step 3: the meta-fusion log and the "w/o Meta" baseline log.
#[derive(Clone, Debug)]
pub struct Step3Logs {
    pub meta: TrainLog,
    pub direct: TrainLog,
}

pub fn train_step3(run: &RunDir, variant: Variant, force: bool) -> Result<Step3Logs> {
    let cfg = run.read_config()?;
    let model = load_branches(run, &cfg, variant)?;
    let data = load_dataset(run, &cfg)?;
    let dir = run.step(3, variant);
    refuse_overwrite(&dir, force)?;
    let (fit, probe) = step_splits(&data, &cfg, 3, variant);
    let fit = fusion_samples(&model, &fit)?;
    let probe = fusion_samples(&model, &probe)?;
    let out = step3_train_fusion(&fit, &probe, &model, &cfg.meta_learner(), &cfg.train)?;
    let direct_epochs = cfg.train.epochs_step3.max(5);
    let (direct, direct_log) = train_direct_fusion(&fit, &probe, cfg.backbone.n_classes, &cfg.train, direct_epochs)?;
    reset_dir(&dir)?;
    out.log.save(&dir)?;
    direct_log.save_to(&dir.join(DIRECT_LOG))?;
    let mut store = ParameterStore::new();
    store.merge_prefixed("meta_fm.", &out.meta_learner);
    let mut extra = BTreeMap::new();
    extra.insert("sigma_bar".to_string(), out.sigma_bar.values.clone());
    for (prefix, w) in [("fusion.", &out.weights), ("direct.", &direct)] {
        for (name, p) in w.to_store(false).iter() {
            extra.insert(format!("{prefix}{name}"), p.tensor.clone());
        }
    }
    save_checkpoint(&store, &dir, &extra)?;
    Ok(Step3Logs {
        meta: out.log,
        direct: direct_log,
    })
}

/// Trained step-3 artifacts.
#[derive(Clone, Debug)]
pub struct FusionArtifacts {
    pub meta_learner: ParameterStore<f32>,
    pub weights: FusionWeights<f32>,
    pub direct: FusionWeights<f32>,
}

pub fn load_fusion(run: &RunDir, variant: Variant) -> Result<FusionArtifacts> {
    let dir = run.step(3, variant);
    let flag = if variant == Variant::TrainSplit { " --use-train-split" } else { "" };
    require_checkpoint(&dir, &format!("fusion checkpoint; run `train --step 3{flag}`"))?;
    let all = load_checkpoint::<f32>(&dir)?;
    Ok(FusionArtifacts {
        meta_learner: all.extract_prefixed("meta_fm.").freeze(),
        weights: FusionWeights::from_store(&all.extract_prefixed("fusion."))?,
        direct: FusionWeights::from_store(&all.extract_prefixed("direct."))?,
    })
}

/// Digest of the step-1 checkpoint files.
pub fn meta_digest(run: &RunDir) -> Result<String> {
    checkpoint_digest(&run.step(1, Variant::Subtrain))
}

/// Logits of each branch and of the fusion, all on the X1 footprint.
#[derive(Clone, Debug, Default)]
pub struct FootprintPredictions {
    pub branches: [BTreeMap<u64, Tensor<f32>>; 3],
    pub fusion: BTreeMap<u64, Tensor<f32>>,
}

fn ratio_to_top(cfg: &RunConfig, level: usize) -> usize {
    cfg.resolution.factors[0] / cfg.resolution.factors[level]
}

/// Predictions of the full model (and of a second fusion) on `triples`.
pub fn predict_msn(
    model: &MultiBranch,
    cfg: &RunConfig,
    weights: &[&FusionWeights<f32>],
    triples: &[PatchTriple],
) -> Result<Vec<FootprintPredictions>> {
    let mut out = vec![FootprintPredictions::default(); weights.len()];
    for t in triples {
        let (s3, memory) = model.meta_pass(t)?;
        let s1 = model.branch(1, t, &memory)?.logits;
        let s2 = align_to_top(&model.branch(2, t, &memory)?.logits, ratio_to_top(cfg, 1))?;
        let s3 = align_to_top(&s3, ratio_to_top(cfg, 2))?;
        for (o, w) in out.iter_mut().zip(weights) {
            o.fusion.insert(t.patch_id, fuse(&s1, &s2, w)?);
            o.branches[0].insert(t.patch_id, s1.clone());
            o.branches[1].insert(t.patch_id, s2.clone());
            o.branches[2].insert(t.patch_id, s3.clone());
        }
    }
    Ok(out)
}

/// Predictions of plain backbones, one per level, on their own inputs.
pub fn predict_backbones(
    stores: [&ParameterStore<f32>; 3],
    cfg: &RunConfig,
    triples: &[PatchTriple],
) -> Result<FootprintPredictions> {
    let mut out = FootprintPredictions::default();
    for t in triples {
        for (k, store) in stores.iter().enumerate() {
            let z = backbone::forward(store, &cfg.backbone, &t.x[k], &[])?.logits;
            out.branches[k].insert(t.patch_id, align_to_top(&z, ratio_to_top(cfg, k))?);
        }
    }
    Ok(out)
}

/// Stitched test-split scores.
pub struct Scored {
    pub branches: [MiouResult; 3],
    pub fusion: Option<(MiouResult, Vec<(u32, crate::pyramid::LabelMap)>)>,
}

pub fn score(data: &Dataset, cfg: &RunConfig, p: &FootprintPredictions) -> Result<Scored> {
    let slides = data.slides_in(Split::Test);
    let triples = &data.split.test;
    let patch = cfg.resolution.patch_size;
    let b = |k: usize| stitched_score(&slides, triples, patch, &p.branches[k]).map(|r| r.0);
    let fusion = if p.fusion.is_empty() {
        None
    } else {
        Some(stitched_score(&slides, triples, patch, &p.fusion)?)
    };
    Ok(Scored {
        branches: [b(0)?, b(1)?, b(2)?],
        fusion,
    })
}

fn report(method: &str, s: &Scored, params: evaluation::ParamCounts) -> EvalReport {
    let final_iou = match &s.fusion {
        Some((m, _)) => m.per_class.clone(),
        None => s
            .branches
            .iter()
            .max_by(|a, b| a.miou.total_cmp(&b.miou))
            .map(|m| m.per_class.clone())
            .unwrap_or_default(),
    };
    EvalReport {
        method: method.into(),
        branch_miou: [0, 1, 2].map(|k| Some(s.branches[k].miou)),
        fusion_miou: s.fusion.as_ref().map(|(m, _)| m.miou),
        per_class_iou: final_iou,
        params,
    }
}

/// Trains (or loads) the three independently trained backbones.
pub fn multibranch(run: &RunDir, cfg: &RunConfig, data: &Dataset) -> Result<[ParameterStore<f32>; 3]> {
    let dir = run.multibranch();
    if is_complete(&dir) {
        let all = load_checkpoint::<f32>(&dir)?;
        return Ok([1, 2, 3].map(|k| all.extract_prefixed(&format!("x{k}.")).freeze()));
    }
    let mut all = ParameterStore::new();
    let mut out = Vec::new();
    reset_dir(&dir)?;
    for level in 0..3 {
        let tc = &cfg.train;
        let head = format!("S{}", level + 1);
        let (p, log) = train_backbone(
            &data.split.train,
            &data.split.subtrain,
            level,
            &cfg.backbone,
            tc,
            tc.seed,
            tc.seed.wrapping_add(101 + level as u64),
            &head,
        )?;
        log.save_to(&dir.join(format!("log_x{}.csv", level + 1)))?;
        all.merge_prefixed(&format!("x{}.", level + 1), &p);
        out.push(p);
    }
    save_checkpoint(&all, &dir, &BTreeMap::new())?;
    Ok(out.try_into().expect("three branches"))
}

pub const METHOD_MSN: &str = "MSN";
pub const METHOD_META: &str = "Meta-branch";
pub const METHOD_MULTI: &str = "Multi-branch";
pub const METHOD_MSN_TRAIN: &str = "MSN*";
pub const METHOD_DIRECT: &str = "w/o Meta";

/// Scores the trained model on the test split; with `ablations`, also the raw
/// meta-branch, the multi-branch baseline, the train-split variant and the
/// directly trained fusion. Writes `reports/report.{json,md}` and stitched maps.
pub fn evaluate(run: &RunDir, ablations: bool, force: bool) -> Result<Vec<EvalReport>> {
    let cfg = run.read_config()?;
    let model = load_branches(run, &cfg, Variant::Subtrain)?;
    let fusion = load_fusion(run, Variant::Subtrain)?;
    let trainsplit = if ablations {
        Some((
            load_branches(run, &cfg, Variant::TrainSplit)?,
            load_fusion(run, Variant::TrainSplit)?,
        ))
    } else {
        None
    };
    let data = load_dataset(run, &cfg)?;
    let dir = run.reports();
    refuse_overwrite(&dir.join("report.json"), force)?;
    let test = &data.split.test;

    let memrm: Vec<&ParameterStore<f32>> = model.memrm.iter().collect();
    let msn_params = count_params(&[&model.meta], &memrm, &[&fusion.meta_learner], &[]);
    let direct_store = fusion.direct.to_store(true);
    let direct_params = count_params(&[&model.meta], &memrm, &[], &[&direct_store]);

    let preds = predict_msn(&model, &cfg, &[&fusion.weights, &fusion.direct], test)?;
    let msn = score(&data, &cfg, &preds[0])?;
    let mut reports = vec![report(METHOD_MSN, &msn, msn_params)];
    if let Some((_, maps)) = &msn.fusion {
        let out = dir.join("stitched");
        reset_dir(&out)?;
        for (id, map) in maps {
            save_label_map(map, &out.join(format!("slide_{id:010}_msn.png")))?;
        }
    }

    if let Some((model_t, fusion_t)) = &trainsplit {
        let meta = &model.meta;
        let raw = score(&data, &cfg, &predict_backbones([meta, meta, meta], &cfg, test)?)?;
        reports.insert(0, report(METHOD_META, &raw, count_params(&[meta], &[], &[], &[])));
        let mb = multibranch(run, &cfg, &data)?;
        let mb_preds = predict_backbones([&mb[0], &mb[1], &mb[2]], &cfg, test)?;
        let mb_refs: Vec<&ParameterStore<f32>> = mb.iter().collect();
        reports.insert(
            1,
            report(METHOD_MULTI, &score(&data, &cfg, &mb_preds)?, count_params(&mb_refs, &[], &[], &[])),
        );
        let memrm_t: Vec<&ParameterStore<f32>> = model_t.memrm.iter().collect();
        let p = predict_msn(model_t, &cfg, &[&fusion_t.weights], test)?;
        reports.push(report(
            METHOD_MSN_TRAIN,
            &score(&data, &cfg, &p[0])?,
            count_params(&[&model_t.meta], &memrm_t, &[&fusion_t.meta_learner], &[]),
        ));
        reports.push(report(METHOD_DIRECT, &score(&data, &cfg, &preds[1])?, direct_params));
    }
    evaluation::save_reports(&reports, &dir)?;
    Ok(reports)
}
