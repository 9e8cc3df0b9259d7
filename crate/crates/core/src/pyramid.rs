//! Synthetic multi-resolution slides, aligned patch-triple extraction and
//! stitching of patch predictions back into whole-image label maps.
//!
//! Level `0` is always the highest magnification (`factors[0]`); every other
//! level is a box-averaged (images) or majority-voted (labels) reduction of it.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsnError, Result};
use crate::tensor::Tensor;

/// Magnification factors of the three branches and the square patch side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionSpec {
    /// Linear magnifications, highest first (e.g. `[16, 4, 1]`).
    pub factors: [usize; 3],
    pub patch_size: usize,
}

impl Default for ResolutionSpec {
    fn default() -> Self {
        Self {
            factors: [16, 4, 1],
            patch_size: 256,
        }
    }
}

impl ResolutionSpec {
    pub fn validate(&self) -> Result<()> {
        let [m1, m2, m3] = self.factors;
        if m3 == 0 || !(m1 > m2 && m2 > m3) {
            return Err(MsnError::Config(format!(
                "factors must be strictly decreasing and positive, got {:?}",
                self.factors
            )));
        }
        if m1 % m2 != 0 || m2 % m3 != 0 {
            return Err(MsnError::Config(format!(
                "each factor must divide the previous one, got {:?}",
                self.factors
            )));
        }
        if self.patch_size < 16 || self.patch_size % 2 != 0 {
            return Err(MsnError::Config(format!(
                "patch size must be even and >= 16, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Ratio between the highest and lowest magnification.
    pub fn span(&self) -> usize {
        self.factors[0] / self.factors[2]
    }

    /// Footprint of branch `k` relative to the meta (lowest magnification) branch's.
    /// Branch `k`'s patch covers `1 / ratio` of the meta patch's side.
    pub fn ratio_to_meta(&self, k: usize) -> usize {
        self.factors[k] / self.factors[2]
    }

    /// Side of branch `k`'s patch footprint in top-level pixels.
    pub fn footprint(&self, k: usize) -> usize {
        self.patch_size * self.factors[0] / self.factors[k]
    }
}

/// A single-channel class-index map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, fill: u16) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }
}

/// One virtual slide stored as a three-level pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidImage {
    pub slide_id: u32,
    pub seed: u64,
    pub n_classes: usize,
    pub factors: [usize; 3],
    /// `[3, side_k, side_k]` RGB in `[0, 1]`, one per factor.
    pub levels: Vec<Tensor<f32>>,
    pub label_levels: Vec<LabelMap>,
}

impl PyramidImage {
    pub fn side(&self, level: usize) -> usize {
        self.label_levels[level].width
    }

    /// Linear scale of each level relative to the top level.
    pub fn level_scale(&self) -> [f64; 3] {
        let m1 = self.factors[0] as f64;
        self.factors.map(|m| m as f64 / m1)
    }

    pub fn ignore_label(&self) -> u16 {
        self.n_classes as u16
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn class_color(k: usize, n: usize) -> [f64; 3] {
    let phase = 2.0 * PI * k as f64 / n as f64;
    [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0].map(|o| 0.5 + 0.12 * (phase + o).cos())
}

/// Zero-mean high-frequency pattern of class `k`; its period divides 4 so a
/// 4x4 box average removes it completely.
fn class_pattern(k: usize, y: usize, x: usize, phase: usize) -> f64 {
    let q = |v: usize| ((v + phase) % 4) as f64;
    let wave = |t: f64| (PI / 2.0 * t).sin() + (PI / 2.0 * t).cos();
    match k % 4 {
        0 => wave(q(y)),
        1 => wave(q(x)),
        2 => wave(q(x + y)),
        _ => wave(q(x)) * wave(q(y)) * 0.7,
    }
}

struct LowFrequencyField {
    terms: Vec<[f64; 5]>,
}

impl LowFrequencyField {
    fn new(rng: &mut ChaCha8Rng, side: usize) -> Self {
        let terms = (0..3)
            .map(|_| {
                let wavelength = side as f64 * rng.random_range(0.35..1.0);
                let angle = rng.random_range(0.0..PI);
                [
                    angle.cos() * 2.0 * PI / wavelength,
                    angle.sin() * 2.0 * PI / wavelength,
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.03..0.06),
                    0.0,
                ]
            })
            .collect();
        Self { terms }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.terms
            .iter()
            .map(|t| t[3] * (t[0] * x as f64 + t[1] * y as f64 + t[2]).sin())
            .sum()
    }
}

/// Seeded Voronoi label map with every class present (when `sites >= n_classes`).
fn voronoi_labels(rng: &mut ChaCha8Rng, side: usize, n_classes: usize) -> LabelMap {
    let n_sites = (2 * n_classes).max(8);
    let mut classes: Vec<u16> = (0..n_sites).map(|i| (i % n_classes) as u16).collect();
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let sites: Vec<(f64, f64)> = (0..n_sites)
        .map(|_| {
            (
                rng.random_range(0.0..side as f64),
                rng.random_range(0.0..side as f64),
            )
        })
        .collect();
    let mut map = LabelMap::new(side, side, 0);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (fy - sy).powi(2) + (fx - sx).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            map.data[y * side + x] = classes[best.1];
        }
    }
    map
}

/// Majority vote over `f x f` blocks; ties go to the lower class index.
pub fn downsample_labels(labels: &LabelMap, f: usize, n_classes: usize) -> LabelMap {
    let (h, w) = (labels.height / f, labels.width / f);
    let mut out = LabelMap::new(h, w, 0);
    let mut counts = vec![0usize; n_classes + 1];
    for by in 0..h {
        for bx in 0..w {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in by * f..(by + 1) * f {
                for x in bx * f..(bx + 1) * f {
                    counts[labels.at(y, x) as usize] += 1;
                }
            }
            let mut best = 0;
            for (k, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = k;
                }
            }
            out.data[by * w + bx] = best as u16;
        }
    }
    out
}

/// Box average over `f x f` blocks of a `[C, H, W]` image.
pub fn downsample_image(img: &Tensor<f32>, f: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = img.chw()?;
    let (oh, ow) = (h / f, w / f);
    let src = img.data();
    let norm = 1.0 / (f * f) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for by in 0..oh {
            for bx in 0..ow {
                let mut acc = 0.0f64;
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        acc += src[(ch * h + y) * w + x] as f64;
                    }
                }
                out.push(quantize(acc * norm));
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Generates one seeded virtual slide.
///
/// Each class carries two cues: a base colour perturbed by a smooth
/// low-frequency field (survives downsampling) and a period-4 luminance
/// pattern (visible only at the top level).
pub fn generate_virtual_slide(
    seed: u64,
    base_side: usize,
    n_classes: usize,
    spec: &ResolutionSpec,
) -> Result<PyramidImage> {
    spec.validate()?;
    if n_classes < 2 {
        return Err(MsnError::Config(format!(
            "need at least 2 classes, got {n_classes}"
        )));
    }
    let span = spec.span();
    if base_side == 0 || base_side % span != 0 {
        return Err(MsnError::Config(format!(
            "base side {base_side} is not divisible by the factor span {span}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = voronoi_labels(&mut rng, base_side, n_classes);
    let fields: Vec<LowFrequencyField> = (0..3)
        .map(|_| LowFrequencyField::new(&mut rng, base_side))
        .collect();
    let phase = rng.random_range(0..4);
    let noise_amp = 0.04;
    let pattern_amp = 0.14;
    let colors: Vec<[f64; 3]> = (0..n_classes).map(|k| class_color(k, n_classes)).collect();

    let plane = base_side * base_side;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..base_side {
        for x in 0..base_side {
            let k = labels.at(y, x) as usize;
            let pattern = pattern_amp * class_pattern(k, y, x, phase);
            for ch in 0..3 {
                let noise = noise_amp * (rng.random::<f64>() - 0.5) * 2.0;
                let v = colors[k][ch] + fields[ch].at(y, x) + pattern + noise;
                data[ch * plane + y * base_side + x] = quantize(v);
            }
        }
    }
    let base = Tensor::from_vec(&[3, base_side, base_side], data)?;

    let m1 = spec.factors[0];
    let mut levels = Vec::with_capacity(3);
    let mut label_levels = Vec::with_capacity(3);
    for &m in &spec.factors {
        let f = m1 / m;
        if f == 1 {
            levels.push(base.clone());
            label_levels.push(labels.clone());
        } else {
            levels.push(downsample_image(&base, f)?);
            label_levels.push(downsample_labels(&labels, f, n_classes));
        }
    }
    Ok(PyramidImage {
        slide_id: seed as u32,
        seed,
        n_classes,
        factors: spec.factors,
        levels,
        label_levels,
    })
}

/// Crop origins along one axis: non-overlapping steps of `patch`, with the
/// last crop shifted inward so it ends exactly at `side`.
pub fn tile_origins(side: usize, patch: usize) -> Result<Vec<usize>> {
    if side < patch {
        return Err(MsnError::Shape(format!(
            "level of side {side} is smaller than one {patch}px patch"
        )));
    }
    let mut origins: Vec<usize> = (0..side / patch).map(|i| i * patch).collect();
    if side % patch != 0 {
        origins.push(side - patch);
    }
    Ok(origins)
}

/// Center-aligned crops of one location at three magnifications.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriple {
    pub patch_id: u64,
    pub slide_id: u32,
    /// Crop origin `(y, x)` on the top level.
    pub origin: (usize, usize),
    /// Patch centre `(y, x)` in top-level pixels.
    pub center: (usize, usize),
    /// Crop origin of each level in that level's pixels (may be negative).
    pub level_origins: [(isize, isize); 3],
    /// `[3, P, P]` images for branches 1..3.
    pub x: [Tensor<f32>; 3],
    /// `P * P` labels; padded pixels carry the ignore label.
    pub y: [Vec<u16>; 3],
    pub padding_mask: [Vec<bool>; 3],
}

fn to3<V>(v: Vec<V>) -> [V; 3] {
    v.try_into().ok().expect("three levels")
}

fn crop_level(
    img: &Tensor<f32>,
    labels: &LabelMap,
    oy: isize,
    ox: isize,
    p: usize,
    ignore: u16,
) -> (Tensor<f32>, Vec<u16>, Vec<bool>) {
    let side = labels.width as isize;
    let plane = labels.width * labels.height;
    let mut x = vec![0f32; 3 * p * p];
    let mut y = vec![ignore; p * p];
    let mut mask = vec![true; p * p];
    for r in 0..p {
        let sy = oy + r as isize;
        if sy < 0 || sy >= side {
            continue;
        }
        for c in 0..p {
            let sx = ox + c as isize;
            if sx < 0 || sx >= side {
                continue;
            }
            let src = sy as usize * labels.width + sx as usize;
            for ch in 0..3 {
                x[ch * p * p + r * p + c] = img.data()[ch * plane + src];
            }
            y[r * p + c] = labels.data[src];
            mask[r * p + c] = false;
        }
    }
    (
        Tensor::from_vec(&[3, p, p], x).expect("patch shape"),
        y,
        mask,
    )
}

/// Extracts every patch triple of a slide in row-major order.
pub fn extract_triples(img: &PyramidImage, spec: &ResolutionSpec) -> Result<Vec<PatchTriple>> {
    spec.validate()?;
    if img.factors != spec.factors {
        return Err(MsnError::Config(format!(
            "pyramid factors {:?} differ from spec {:?}",
            img.factors, spec.factors
        )));
    }
    let p = spec.patch_size;
    let side = img.side(0);
    let origins = tile_origins(side, p)?;
    let m1 = spec.factors[0];
    let ignore = img.ignore_label();
    let mut out = Vec::with_capacity(origins.len() * origins.len());
    for &oy in &origins {
        for &ox in &origins {
            let center = (oy + p / 2, ox + p / 2);
            let mut level_origins = [(0isize, 0isize); 3];
            let mut xs = Vec::with_capacity(3);
            let mut ys = Vec::with_capacity(3);
            let mut masks = Vec::with_capacity(3);
            for (k, &m) in spec.factors.iter().enumerate() {
                let cy = (center.0 * m / m1) as isize;
                let cx = (center.1 * m / m1) as isize;
                let o = (cy - (p / 2) as isize, cx - (p / 2) as isize);
                level_origins[k] = o;
                let (x, y, mask) =
                    crop_level(&img.levels[k], &img.label_levels[k], o.0, o.1, p, ignore);
                xs.push(x);
                ys.push(y);
                masks.push(mask);
            }
            let index = out.len() as u64;
            out.push(PatchTriple {
                patch_id: ((img.slide_id as u64) << 32) | index,
                slide_id: img.slide_id,
                origin: (oy, ox),
                center,
                level_origins,
                x: to3(xs),
                y: to3(ys),
                padding_mask: to3(masks),
            });
        }
    }
    Ok(out)
}

/// Where each patch sits on the top level of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGeometry {
    pub side: usize,
    pub patch_size: usize,
    pub tiles: BTreeMap<u64, (usize, usize)>,
}

impl TileGeometry {
    pub fn of(triples: &[PatchTriple], side: usize, patch_size: usize) -> Self {
        Self {
            side,
            patch_size,
            tiles: triples.iter().map(|t| (t.patch_id, t.origin)).collect(),
        }
    }
}

/// Averages per-pixel class probabilities (`[N_c, P, P]`) over all covering
/// patches and takes the argmax (ties to the lower class).
pub fn stitch(predictions: &[(u64, Tensor<f32>)], geometry: &TileGeometry) -> Result<LabelMap> {
    let side = geometry.side;
    let p = geometry.patch_size;
    let n_classes = match predictions.first() {
        Some((_, t)) => t.chw()?.0,
        None => {
            return Err(MsnError::Uncovered(format!(
                "no predictions for a {side}x{side} image"
            )))
        }
    };
    let plane = side * side;
    let mut sums = vec![0f64; n_classes * plane];
    let mut counts = vec![0u32; plane];
    for (id, probs) in predictions {
        let &(oy, ox) = geometry
            .tiles
            .get(id)
            .ok_or_else(|| MsnError::Uncovered(format!("prediction for unknown patch {id}")))?;
        if probs.shape() != [n_classes, p, p] {
            return Err(MsnError::Shape(format!(
                "prediction {:?} for patch {id}, expected [{n_classes}, {p}, {p}]",
                probs.shape()
            )));
        }
        for r in 0..p {
            for c in 0..p {
                let dst = (oy + r) * side + ox + c;
                counts[dst] += 1;
                for k in 0..n_classes {
                    sums[k * plane + dst] += probs.data()[(k * p + r) * p + c] as f64;
                }
            }
        }
    }
    let uncovered: Vec<usize> = (0..plane).filter(|&i| counts[i] == 0).collect();
    if !uncovered.is_empty() {
        let ys = uncovered.iter().map(|i| i / side);
        let xs = uncovered.iter().map(|i| i % side);
        let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
        let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
        let covered: std::collections::BTreeSet<u64> =
            predictions.iter().map(|(id, _)| *id).collect();
        let missing: Vec<u64> = geometry
            .tiles
            .keys()
            .filter(|id| !covered.contains(id))
            .copied()
            .collect();
        return Err(MsnError::Uncovered(format!(
            "{} pixels uncovered within rows {y0}..={y1}, cols {x0}..={x1}; missing patches {:?}",
            uncovered.len(),
            missing
        )));
    }
    let mut out = LabelMap::new(side, side, 0);
    for i in 0..plane {
        let mut best = 0;
        for k in 1..n_classes {
            if sums[k * plane + i] > sums[best * plane + i] {
                best = k;
            }
        }
        out.data[i] = best as u16;
    }
    Ok(out)
}

/// One-hot `[N_c, P, P]` encoding of a label patch.
pub fn one_hot(labels: &[u16], n_classes: usize, p: usize) -> Tensor<f32> {
    let mut data = vec![0f32; n_classes * p * p];
    for (i, &y) in labels.iter().enumerate() {
        if (y as usize) < n_classes {
            data[y as usize * p * p + i] = 1.0;
        }
    }
    Tensor::from_vec(&[n_classes, p, p], data).expect("one-hot shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Subtrain,
    Test,
}

/// Slide-level split assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub slides: BTreeMap<u32, Split>,
}

impl SplitManifest {
    /// Seeded shuffle of `slide_ids` into `(n_train, n_subtrain, rest)`.
    pub fn assign(slide_ids: &[u32], n_train: usize, n_subtrain: usize, seed: u64) -> Result<Self> {
        if n_train + n_subtrain >= slide_ids.len() || n_train == 0 || n_subtrain == 0 {
            return Err(MsnError::Config(format!(
                "cannot split {} slides into {n_train} train / {n_subtrain} subtrain / >=1 test",
                slide_ids.len()
            )));
        }
        let mut ids = slide_ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5_11);
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        let slides = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let s = if i < n_train {
                    Split::Train
                } else if i < n_train + n_subtrain {
                    Split::Subtrain
                } else {
                    Split::Test
                };
                (id, s)
            })
            .collect();
        Ok(Self { slides })
    }

    pub fn slides_in(&self, split: Split) -> Vec<u32> {
        self.slides
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Patch triples grouped by split, with the geometry needed to stitch them.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<PatchTriple>,
    pub subtrain: Vec<PatchTriple>,
    pub test: Vec<PatchTriple>,
    pub slide_assignment: SplitManifest,
}

impl DatasetSplit {
    pub fn build(slides: &[PyramidImage], manifest: &SplitManifest, spec: &ResolutionSpec) -> Result<Self> {
        let mut out = Self {
            train: Vec::new(),
            subtrain: Vec::new(),
            test: Vec::new(),
            slide_assignment: manifest.clone(),
        };
        for slide in slides {
            let split = manifest.slides.get(&slide.slide_id).ok_or_else(|| {
                MsnError::Config(format!("slide {} has no split assignment", slide.slide_id))
            })?;
            let triples = extract_triples(slide, spec)?;
            match split {
                Split::Train => out.train.extend(triples),
                Split::Subtrain => out.subtrain.extend(triples),
                Split::Test => out.test.extend(triples),
            }
        }
        Ok(out)
    }

    pub fn get(&self, split: Split) -> &[PatchTriple] {
        match split {
            Split::Train => &self.train,
            Split::Subtrain => &self.subtrain,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: u32,
    pub seed: u64,
    pub n_classes: usize,
    pub factors: [usize; 3],
    pub sides: [usize; 3],
}

/// Writes labels as an 8-bit grayscale PNG holding the raw class index.
pub fn save_label_map(labels: &LabelMap, path: &Path) -> Result<()> {
    let gray = image::GrayImage::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.data.iter().map(|&v| v as u8).collect(),
    )
    .ok_or_else(|| MsnError::Shape(format!("{} labels for {}x{}", labels.data.len(), labels.height, labels.width)))?;
    gray.save(path).map_err(|source| MsnError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `level_<m>.png`, `labels_<m>.png` and `meta.json` into `dir`.
pub fn save_slide(img: &PyramidImage, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MsnError::io(dir, e))?;
    for (k, &m) in img.factors.iter().enumerate() {
        let side = img.side(k);
        let plane = side * side;
        let src = img.levels[k].data();
        let mut rgb = image::RgbImage::new(side as u32, side as u32);
        for (i, px) in rgb.pixels_mut().enumerate() {
            *px = image::Rgb([0, 1, 2].map(|ch| (src[ch * plane + i] * 255.0).round() as u8));
        }
        let path = dir.join(format!("level_{m}.png"));
        rgb.save(&path).map_err(|source| MsnError::Image {
            path: path.clone(),
            source,
        })?;
        save_label_map(&img.label_levels[k], &dir.join(format!("labels_{m}.png")))?;
    }
    let meta = SlideMeta {
        slide_id: img.slide_id,
        seed: img.seed,
        n_classes: img.n_classes,
        factors: img.factors,
        sides: [0, 1, 2].map(|k| img.side(k)),
    };
    let path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| MsnError::json(&path, e))?;
    fs::write(&path, json).map_err(|e| MsnError::io(&path, e))
}

pub fn load_slide(dir: &Path) -> Result<PyramidImage> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| MsnError::io(&path, e))?;
    let meta: SlideMeta = serde_json::from_str(&text).map_err(|e| MsnError::json(&path, e))?;
    let mut levels = Vec::new();
    let mut label_levels = Vec::new();
    for (k, &m) in meta.factors.iter().enumerate() {
        let side = meta.sides[k];
        let path = dir.join(format!("level_{m}.png"));
        let rgb = image::open(&path)
            .map_err(|source| MsnError::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        if rgb.width() as usize != side || rgb.height() as usize != side {
            return Err(MsnError::Corrupt {
                path,
                reason: format!("expected {side}x{side}"),
            });
        }
        let plane = side * side;
        let mut data = vec![0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = px[ch] as f32 / 255.0;
            }
        }
        levels.push(Tensor::from_vec(&[3, side, side], data)?);
        let path = dir.join(format!("labels_{m}.png"));
        let gray = image::open(&path)
            .map_err(|source| MsnError::Image {
                path: path.clone(),
                source,
            })?
            .to_luma8();
        label_levels.push(LabelMap {
            height: side,
            width: side,
            data: gray.into_raw().into_iter().map(u16::from).collect(),
        });
    }
    Ok(PyramidImage {
        slide_id: meta.slide_id,
        seed: meta.seed,
        n_classes: meta.n_classes,
        factors: meta.factors,
        levels,
        label_levels,
    })
}
