//! Anomaly scoring and fusion: nearest-neighbour visual scores, text-similarity
//! scores, sigmoid normalization with a greedily searched center, and the
//! convex combination of both branches.

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::kernels::{bilinear_upsample, dot, norm, squared_l2};
use crate::memory::{Calibration, MemoryBank, TaskMemory};
use crate::metrics::aupr;
use crate::scalar::Scalar;
use crate::tensor::{FeatureGrid, Image, PatchSet, ScoreMap};

/// Side of the final anomaly map.
pub const OUTPUT_HW: usize = 224;

/// Default fusion weight on the visual branch.
pub const DEFAULT_ALPHA: f64 = 0.9;

/// Candidate offsets for the sigmoid center.
pub const DELTA_SET: [f64; 9] = [0.0, 0.1, -0.1, 0.5, -0.5, 1.0, -1.0, 3.0, -3.0];

/// Calibration plus the center accepted after each search round.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibState<T> {
    pub k: T,
    pub b: T,
    pub history: Vec<T>,
}

impl<T: Scalar> CalibState<T> {
    pub fn new(calib: Calibration<T>) -> Self {
        Self { k: calib.k, b: calib.b, history: Vec::new() }
    }

    pub fn calibration(&self) -> Calibration<T> {
        Calibration { k: self.k, b: self.b }
    }
}

/// Distance from each patch to its nearest bank row.
pub fn score_visual<T: Scalar>(features: &FeatureGrid<T>, bank: &PatchSet<T>) -> Result<ScoreMap<T>> {
    if bank.count() == 0 {
        return Err(Error::InvalidArgument("empty feature bank".into()));
    }
    if bank.channels() != features.channels() {
        return Err(Error::DimensionMismatch(format!(
            "feature width {} vs bank width {}",
            features.channels(),
            bank.channels()
        )));
    }
    let values = (0..features.num_patches())
        .map(|i| {
            let p = features.patch_flat(i);
            bank.rows().map(|r| squared_l2(p, r)).fold(T::infinity(), T::min).sqrt()
        })
        .collect();
    ScoreMap::new(features.grid_h(), features.grid_w(), values)
}

/// `1 - cos(patch, text)` per patch of already projected features. A zero
/// patch scores 1.
pub fn score_text<T: Scalar>(projected: &FeatureGrid<T>, text: &[T]) -> Result<ScoreMap<T>> {
    if projected.channels() != text.len() {
        return Err(Error::DimensionMismatch(format!(
            "projected width {} vs text width {}",
            projected.channels(),
            text.len()
        )));
    }
    let tn = norm(text);
    if tn == T::zero() {
        return Err(Error::DegenerateVector);
    }
    let values = (0..projected.num_patches())
        .map(|i| {
            let p = projected.patch_flat(i);
            let pn = norm(p);
            if pn == T::zero() {
                log::debug!("zero patch {i} in text scoring");
                return T::one();
            }
            let c = (dot(p, text) / (pn * tn)).max(-T::one()).min(T::one());
            T::one() - c
        })
        .collect();
    ScoreMap::new(projected.grid_h(), projected.grid_w(), values)
}

pub fn sigmoid<T: Scalar>(x: T, calib: &Calibration<T>) -> T {
    T::one() / (T::one() + (-calib.k * (x - calib.b)).exp())
}

/// Elementwise `1 / (1 + exp(-k (x - b)))`.
pub fn anm<T: Scalar>(map: &ScoreMap<T>, calib: &Calibration<T>) -> Result<ScoreMap<T>> {
    if !(calib.k > T::zero()) || !calib.k.is_finite() || !calib.b.is_finite() {
        return Err(Error::NonFinite(format!("calibration k={} b={}", calib.k, calib.b)));
    }
    let values = map.values().iter().map(|&x| sigmoid(x, calib)).collect();
    ScoreMap::new_normalized(map.height(), map.width(), values)
}

/// Convex combination `alpha * v + (1 - alpha) * t` of normalized maps.
pub fn fuse<T: Scalar>(map_v: &ScoreMap<T>, map_t: &ScoreMap<T>, alpha: T) -> Result<ScoreMap<T>> {
    if !map_v.is_normalized() || !map_t.is_normalized() {
        return Err(Error::InvalidArgument("fusion inputs must be normalized".into()));
    }
    let out = mix(map_v, map_t, alpha)?;
    ScoreMap::new_normalized(out.height(), out.width(), out.into_values())
}

/// The same combination without the normalization requirement.
pub fn mix<T: Scalar>(map_v: &ScoreMap<T>, map_t: &ScoreMap<T>, alpha: T) -> Result<ScoreMap<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if (map_v.height(), map_v.width()) != (map_t.height(), map_t.width()) {
        return Err(Error::DimensionMismatch(format!(
            "fusing {}x{} with {}x{}",
            map_v.height(),
            map_v.width(),
            map_t.height(),
            map_t.width()
        )));
    }
    let values = if alpha == T::one() {
        map_v.values().to_vec()
    } else if alpha == T::zero() {
        map_t.values().to_vec()
    } else {
        let beta = T::one() - alpha;
        map_v
            .values()
            .iter()
            .zip(map_t.values())
            .map(|(&v, &t)| (alpha * v + beta * t).max(v.min(t)).min(v.max(t)))
            .collect()
    };
    ScoreMap::new(map_v.height(), map_v.width(), values)
}

/// The other branch's normalized maps, and the weight the calibrated branch
/// carries in the fused candidate.
#[derive(Debug, Clone, Copy)]
pub struct Partner<'a, T> {
    pub maps: &'a [ScoreMap<T>],
    pub weight: T,
}

/// Pixel AUPR of the normalized (optionally fused) maps against `labels`,
/// which hold one flag per pixel of every map in order.
pub fn calibration_score<T: Scalar>(
    raw: &[ScoreMap<T>],
    labels: &[bool],
    calib: &Calibration<T>,
    partner: Option<Partner<'_, T>>,
) -> Result<T> {
    let total: usize = raw.iter().map(|m| m.values().len()).sum();
    if raw.is_empty() || total != labels.len() {
        return Err(Error::DimensionMismatch(format!("{total} pixels vs {} labels", labels.len())));
    }
    if let Some(p) = partner {
        if p.maps.len() != raw.len() {
            return Err(Error::DimensionMismatch(format!("{} maps vs {} partner maps", raw.len(), p.maps.len())));
        }
    }
    let mut scores = Vec::with_capacity(total);
    for (i, m) in raw.iter().enumerate() {
        let normed = anm(m, calib)?;
        match partner {
            Some(p) => scores.extend_from_slice(fuse(&normed, &p.maps[i], p.weight)?.values()),
            None => scores.extend_from_slice(normed.values()),
        }
    }
    aupr(&scores, labels)
}

/// Objective gains at or below this are treated as ties, so summation noise
/// in the metric cannot walk `b` around.
pub const CALIBRATION_TOLERANCE: f64 = 1e-9;

/// One greedy round: tries `b + delta` for every offset and keeps the best.
/// Ties go to the smallest `|delta|`, then to the negative offset, so the
/// accepted score never drops below the current one when 0 is offered.
pub fn greedy_calibrate<T: Scalar>(
    state: &CalibState<T>,
    raw: &[ScoreMap<T>],
    labels: &[bool],
    deltas: &[f64],
    partner: Option<Partner<'_, T>>,
) -> Result<CalibState<T>> {
    let mut order: Vec<f64> = deltas.to_vec();
    if order.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite calibration offset".into()));
    }
    order.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    let mut best: Option<(T, T)> = None;
    for d in order {
        let b = state.b + T::of(d);
        let p = match calibration_score(raw, labels, &Calibration { k: state.k, b }, partner) {
            Ok(p) => p,
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        };
        log::trace!("calibration candidate b={b} P={p}");
        match best {
            Some((_, bp)) if p <= bp + T::of(CALIBRATION_TOLERANCE) => {}
            _ => best = Some((b, p)),
        }
    }
    let mut next = state.clone();
    match best {
        Some((b, _)) => next.b = b,
        None => log::warn!("calibration labels are single-class; keeping b = {}", state.b),
    }
    next.history.push(next.b);
    Ok(next)
}

/// How raw branch maps become comparable before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    Anm,
    /// Raw scores are fused as they are.
    Identity,
}

/// Raw per-branch maps at output resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMaps<T> {
    pub visual: ScoreMap<T>,
    pub text: ScoreMap<T>,
}

/// Result of scoring one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub map: ScoreMap<T>,
    pub image_score: T,
    pub task: usize,
    pub task_similarity: T,
}

/// Raw visual and text maps for score-tap features of one task, upsampled.
pub fn branch_maps<T: Scalar>(
    backbone: &Backbone<T>,
    features: &FeatureGrid<T>,
    mem: &TaskMemory<T>,
    text_embedding: &[T],
    out_hw: usize,
) -> Result<BranchMaps<T>> {
    let sv = score_visual(features, &mem.feature_bank)?;
    let projected = FeatureGrid::from_matrix(features.grid_h(), features.grid_w(), backbone.project_to_text(features))?;
    let st = score_text(&projected, text_embedding)?;
    Ok(BranchMaps { visual: bilinear_upsample(&sv, out_hw, out_hw)?, text: bilinear_upsample(&st, out_hw, out_hw)? })
}

/// Normalizes and fuses branch maps with a task's calibration.
pub fn combine<T: Scalar>(maps: &BranchMaps<T>, mem: &TaskMemory<T>, alpha: T, mode: Normalization) -> Result<ScoreMap<T>> {
    match mode {
        Normalization::Anm => fuse(&anm(&maps.visual, &mem.calib_v)?, &anm(&maps.text, &mem.calib_t)?, alpha),
        Normalization::Identity => mix(&maps.visual, &maps.text, alpha),
    }
}

/// Read-only scorer over a bank, caching each task's text embedding.
#[derive(Debug)]
pub struct Detector<'a, T> {
    backbone: &'a Backbone<T>,
    bank: &'a MemoryBank<T>,
    text: Vec<Vec<T>>,
    pub alpha: T,
    pub normalization: Normalization,
    pub out_hw: usize,
}

impl<'a, T: Scalar> Detector<'a, T> {
    pub fn new(backbone: &'a Backbone<T>, bank: &'a MemoryBank<T>, alpha: T) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
        }
        let text = bank.tasks().iter().map(|t| backbone.encode_text(&t.text_prompt)).collect::<Result<_>>()?;
        Ok(Self { backbone, bank, text, alpha, normalization: Normalization::Anm, out_hw: OUTPUT_HW })
    }

    pub fn with_normalization(mut self, mode: Normalization) -> Self {
        self.normalization = mode;
        self
    }

    pub fn bank(&self) -> &MemoryBank<T> {
        self.bank
    }

    fn finish(&self, task: usize, similarity: T, features: &FeatureGrid<T>) -> Result<Inference<T>> {
        let mem = &self.bank.tasks()[task];
        let maps = branch_maps(self.backbone, features, mem, &self.text[task], self.out_hw)?;
        let map = combine(&maps, mem, self.alpha, self.normalization)?;
        Ok(Inference { image_score: map.max(), map, task, task_similarity: similarity })
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.bank.len() {
            return Err(Error::InvalidArgument(format!("task {task} outside bank of {}", self.bank.len())));
        }
        Ok(())
    }

    /// Identifies the task from prompt-free key features, then scores the
    /// image with that task's prompts, bank and calibration.
    pub fn infer_image(&self, image: &Image<T>) -> Result<Inference<T>> {
        let keys = self.backbone.key_features(image)?.to_patch_set();
        let (task, sim) = self.bank.infer_task(&keys)?;
        self.infer_with_task(image, task, sim)
    }

    /// Scores an image against a given task, skipping identification.
    pub fn infer_with_task(&self, image: &Image<T>, task: usize, similarity: T) -> Result<Inference<T>> {
        self.check_task(task)?;
        let features = self.backbone.score_features(image, &self.bank.tasks()[task].visual_prompt)?;
        self.finish(task, similarity, &features)
    }

    /// Scoring for precomputed features that serve as both keys and score
    /// features.
    pub fn infer_features(&self, features: &FeatureGrid<T>) -> Result<Inference<T>> {
        let (task, sim) = self.bank.infer_task(&features.to_patch_set())?;
        self.finish(task, sim, features)
    }

    pub fn infer_features_with_task(&self, features: &FeatureGrid<T>, task: usize) -> Result<Inference<T>> {
        self.check_task(task)?;
        self.finish(task, T::one(), features)
    }

    /// Raw branch maps for one image under a given task.
    pub fn branch_maps(&self, image: &Image<T>, task: usize) -> Result<BranchMaps<T>> {
        self.check_task(task)?;
        let mem = &self.bank.tasks()[task];
        let features = self.backbone.score_features(image, &mem.visual_prompt)?;
        branch_maps(self.backbone, &features, mem, &self.text[task], self.out_hw)
    }
}

/// One-shot inference with ANM normalization.
pub fn infer_image<T: Scalar>(image: &Image<T>, bank: &MemoryBank<T>, backbone: &Backbone<T>, alpha: T) -> Result<Inference<T>> {
    Detector::new(backbone, bank, alpha)?.infer_image(image)
}
