//! mIoU, parameter accounting and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MsnError, Result};
use crate::kernels;
use crate::params::ParameterStore;
use crate::pyramid::{stitch, LabelMap, PatchTriple, PyramidImage, TileGeometry};
use crate::tensor::{Real, Tensor};

/// Pixel counts indexed `[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    /// Adds every pixel whose truth is not `ignore`.
    pub fn add(&mut self, pred: &[u16], truth: &[u16], ignore: u16) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(MsnError::Shape(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let n = self.n_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if t >= n || p >= n {
                return Err(MsnError::LabelOutOfRange {
                    label: t.max(p),
                    n_classes: n,
                });
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both maps.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.n_classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<MiouResult> {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(MsnError::Empty("no labelled pixels to score".into()));
        }
        Ok(MiouResult {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over the classes present in either map, ignoring pixels whose
/// truth is `ignore`.
pub fn miou(pred: &[u16], truth: &[u16], n_classes: usize, ignore: u16) -> Result<MiouResult> {
    let mut cm = ConfusionMatrix::new(n_classes);
    cm.add(pred, truth, ignore)?;
    cm.miou()
}

/// Stitches each slide's patch logits on the top level and scores all slides
/// with one confusion matrix against the top-level labels.
pub fn stitched_score(
    slides: &[&PyramidImage],
    triples: &[PatchTriple],
    patch_size: usize,
    logits: &BTreeMap<u64, Tensor<f32>>,
) -> Result<(MiouResult, Vec<(u32, LabelMap)>)> {
    let n_classes = slides
        .first()
        .ok_or_else(|| MsnError::Empty("no slides to score".into()))?
        .n_classes;
    let mut cm = ConfusionMatrix::new(n_classes);
    let mut maps = Vec::new();
    for slide in slides {
        let own: Vec<PatchTriple> = triples
            .iter()
            .filter(|t| t.slide_id == slide.slide_id)
            .cloned()
            .collect();
        let geometry = TileGeometry::of(&own, slide.side(0), patch_size);
        let probs = own
            .iter()
            .map(|t| {
                let z = logits
                    .get(&t.patch_id)
                    .ok_or_else(|| MsnError::Uncovered(format!("no prediction for patch {}", t.patch_id)))?;
                let (c, h, w) = z.chw()?;
                let p = Tensor::from_vec(z.shape(), kernels::softmax_channels(z.data(), c, h * w))?;
                Ok((t.patch_id, p))
            })
            .collect::<Result<Vec<_>>>()?;
        let map = stitch(&probs, &geometry)?;
        cm.add(&map.data, &slide.label_levels[0].data, slide.ignore_label())?;
        maps.push((slide.slide_id, map));
    }
    Ok((cm.miou()?, maps))
}

/// Trainable element counts per component of a model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub memrm: usize,
    pub meta_fm: usize,
    pub fusion: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn ratio_to(&self, reference: usize) -> f64 {
        self.total as f64 / reference as f64
    }
}

fn elements<T: Real>(stores: &[&ParameterStore<T>]) -> usize {
    stores.iter().map(|s| s.num_elements()).sum()
}

/// Element counts of each component's stores.
pub fn count_params<T: Real>(
    backbone: &[&ParameterStore<T>],
    memrm: &[&ParameterStore<T>],
    meta_fm: &[&ParameterStore<T>],
    fusion: &[&ParameterStore<T>],
) -> ParamCounts {
    let mut c = ParamCounts {
        backbone: elements(backbone),
        memrm: elements(memrm),
        meta_fm: elements(meta_fm),
        fusion: elements(fusion),
        total: 0,
    };
    c.total = c.backbone + c.memrm + c.meta_fm + c.fusion;
    c
}

/// Scores of one method on the test split, all on the top branch's footprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// mIoU of each branch's own prediction, X1 to X3.
    pub branch_miou: [Option<f64>; 3],
    pub fusion_miou: Option<f64>,
    /// Per-class IoU of the method's final prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub params: ParamCounts,
}

impl EvalReport {
    /// The method's final score: fusion if present, else its best branch.
    pub fn headline(&self) -> Option<f64> {
        self.fusion_miou.or_else(|| self.best_branch())
    }

    pub fn best_branch(&self) -> Option<f64> {
        self.branch_miou.iter().flatten().copied().reduce(f64::max)
    }
}

fn pts(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

/// Markdown table with one row per method.
pub fn render_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Method | X1 | X2 | X3 | Fusion | # Params | Backbone | Mem-RM | Meta-FM | Fusion convs |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let p = &r.params;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.method,
            pts(r.branch_miou[0]),
            pts(r.branch_miou[1]),
            pts(r.branch_miou[2]),
            pts(r.fusion_miou),
            p.total,
            p.backbone,
            p.memrm,
            p.meta_fm,
            p.fusion
        );
    }
    s.push_str("\nmIoU in points (x100) on the test split, measured on the X1 footprint.\n");
    s
}

pub fn save_reports(reports: &[EvalReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MsnError::io(dir, e))?;
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(reports).map_err(|e| MsnError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| MsnError::io(&path, e))?;
    let path = dir.join("report.md");
    fs::write(&path, render_markdown(reports)).map_err(|e| MsnError::io(&path, e))
}

pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| MsnError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MsnError::json(&path, e))
}
