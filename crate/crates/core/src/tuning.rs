//! Task adaptation: key extraction, prompt optimization on pseudo-labelled
//! batches, coreset bank construction and per-branch calibration.

use std::fmt;

use crate::autodiff::Tape;
use crate::backbone::{Backbone, TextPrompt, VisualPrompt, TEXT_PROMPT_ROWS, VISUAL_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::fusion::{anm, branch_maps, greedy_calibrate, CalibState, Partner, DEFAULT_ALPHA, DELTA_SET, OUTPUT_HW};
use crate::kernels::cosine_sim;
use crate::memory::{Calibration, MemoryBank, TaskMemory, DEFAULT_STEEPNESS};
use crate::rng::{gaussian_noise, Rng};
use crate::sampling::{coreset_select, fps, SamplingBudget};
use crate::scalar::Scalar;
use crate::tensor::{FeatureGrid, Image, Matrix, PatchSet, ScoreMap};

/// Patch grids above this size have their pair set subsampled.
pub const FULL_PAIR_LIMIT: usize = 196;

/// Integer region label per patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::DimensionMismatch(format!("{} region labels for a {height}x{width} grid", labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }
}

/// Normal training images of one task.
#[derive(Debug, Clone)]
pub struct TaskDataset<T> {
    pub task_name: String,
    pub images: Vec<Image<T>>,
    pub region_masks: Vec<RegionMask>,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn new(task_name: impl Into<String>, images: Vec<Image<T>>, region_masks: Vec<RegionMask>) -> Result<Self> {
        let task_name = task_name.into();
        let first = images.first().ok_or_else(|| Error::InvalidArgument(format!("task {task_name} has no images")))?;
        let dims = (first.channels(), first.height(), first.width());
        if images.iter().any(|im| (im.channels(), im.height(), im.width()) != dims) {
            return Err(Error::DimensionMismatch(format!("images of task {task_name} differ in shape")));
        }
        if region_masks.len() != images.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} region masks for {} images",
                region_masks.len(),
                images.len()
            )));
        }
        Ok(Self { task_name, images, region_masks })
    }
}

/// Precomputed score-tap features of one task's normal images.
#[derive(Debug, Clone)]
pub struct FeatureDataset<T> {
    pub task_name: String,
    pub features: Vec<FeatureGrid<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub sigma: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub alpha_fusion: f64,
    pub k_sigmoid: f64,
    pub delta_set: Vec<f64>,
    /// Rows kept in the task key set.
    pub key_budget: usize,
    /// Rows kept in the normal feature bank.
    pub bank_budget: usize,
    /// Share of the images held out for calibration.
    pub validation_fraction: f64,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 5e-5,
            momentum: 0.9,
            sigma: 1.0,
            lambda_alpha: 1.0,
            lambda_beta: 1.0,
            alpha_fusion: DEFAULT_ALPHA,
            k_sigmoid: DEFAULT_STEEPNESS,
            delta_set: DELTA_SET.to_vec(),
            key_budget: 196,
            bank_budget: 196,
            validation_fraction: 0.2,
            max_pairs: 20_000,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("need epochs >= 1 and an even batch size >= 2, got {} and {}", self.epochs, self.batch_size));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma {} must be finite and nonnegative", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.alpha_fusion) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha_fusion));
        }
        if !(self.k_sigmoid > 0.0) || !self.k_sigmoid.is_finite() {
            return bad(format!("k {} must be positive", self.k_sigmoid));
        }
        if self.delta_set.is_empty() || self.delta_set.iter().any(|d| !d.is_finite()) {
            return bad("delta set must be nonempty and finite".into());
        }
        if self.key_budget == 0 || self.bank_budget == 0 || self.max_pairs == 0 {
            return bad("budgets must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        Ok(())
    }
}

/// Mean squared error.
pub fn loss_text<T: Scalar>(scores: &[T], labels: &[T]) -> Result<T> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let s: T = scores.iter().zip(labels).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(s / T::of(scores.len() as f64))
}

/// `lambda_alpha * sum cos(cross-region pairs) - lambda_beta * sum cos(same-region pairs)`
/// over all unordered patch pairs.
pub fn loss_visual<T: Scalar>(features: &FeatureGrid<T>, regions: &RegionMask, lambda_alpha: T, lambda_beta: T) -> Result<T> {
    check_regions(features, regions)?;
    let n = features.num_patches();
    let l = regions.labels();
    let mut total = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine_sim(features.patch_flat(i), features.patch_flat(j))?;
            total += if l[i] == l[j] { -lambda_beta * c } else { lambda_alpha * c };
        }
    }
    Ok(total)
}

fn check_regions<T: Scalar>(features: &FeatureGrid<T>, regions: &RegionMask) -> Result<()> {
    if (features.grid_h(), features.grid_w()) != (regions.height(), regions.width()) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} features vs {}x{} regions",
            features.grid_h(),
            features.grid_w(),
            regions.height(),
            regions.width()
        )));
    }
    Ok(())
}

/// Per-pair weights for the contrastive loss as an upper-triangular `N x N`
/// matrix. Past `FULL_PAIR_LIMIT` patches, `max_pairs` pairs are drawn
/// uniformly and reweighted so the sum stays an unbiased estimate.
pub fn pair_weights<T: Scalar>(regions: &RegionMask, lambda_alpha: T, lambda_beta: T, max_pairs: usize, rng: &mut Rng) -> Matrix<T> {
    let n = regions.labels().len();
    let l = regions.labels();
    let w = |i: usize, j: usize| if l[i] == l[j] { -lambda_beta } else { lambda_alpha };
    let mut m = Matrix::zeros(n, n);
    let total = n * (n - 1) / 2;
    if n <= FULL_PAIR_LIMIT || total <= max_pairs {
        for i in 0..n {
            for j in i + 1..n {
                m.set(i, j, w(i, j));
            }
        }
        return m;
    }
    let scale = T::of(total as f64 / max_pairs as f64);
    for _ in 0..max_pairs {
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (i.min(j), i.max(j));
        m.set(a, b, m.get(a, b) + w(a, b) * scale);
    }
    m
}

/// Interleaves each clean image (label false) with a noised copy (label true).
pub fn pseudo_label_batch<T: Scalar>(images: &[Image<T>], sigma: f64, rng: &mut Rng) -> Result<(Vec<Image<T>>, Vec<bool>)> {
    let mut out = Vec::with_capacity(2 * images.len());
    let mut labels = Vec::with_capacity(2 * images.len());
    for im in images {
        let noise: Vec<T> = gaussian_noise(im.as_slice().len(), sigma, rng)?;
        let noised = im.with_data(im.as_slice().iter().zip(noise).map(|(&x, e)| x + e).collect())?;
        out.push(im.clone());
        labels.push(false);
        out.push(noised);
        labels.push(true);
    }
    Ok((out, labels))
}

/// Feature-space counterpart of [`pseudo_label_batch`].
pub fn pseudo_label_features<T: Scalar>(grids: &[FeatureGrid<T>], sigma: f64, rng: &mut Rng) -> Result<(Vec<FeatureGrid<T>>, Vec<bool>)> {
    let mut out = Vec::with_capacity(2 * grids.len());
    let mut labels = Vec::with_capacity(2 * grids.len());
    for g in grids {
        let noise: Vec<T> = gaussian_noise(g.as_slice().len(), sigma, rng)?;
        let data = g.as_slice().iter().zip(noise).map(|(&x, e)| x + e).collect();
        out.push(g.clone());
        labels.push(false);
        out.push(FeatureGrid::new(g.grid_h(), g.grid_w(), g.channels(), data)?);
        labels.push(true);
    }
    Ok((out, labels))
}

/// Gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Momentum<T> {
    lr: T,
    mu: T,
    velocity: Vec<Matrix<T>>,
}

impl<T: Scalar> Momentum<T> {
    pub fn new(lr: f64, mu: f64) -> Self {
        Self { lr: T::of(lr), mu: T::of(mu), velocity: Vec::new() }
    }

    /// `v = mu v + g; p -= lr v`.
    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            v.scale_assign(self.mu);
            v.add_assign(g);
            let lr = self.lr;
            let upd = v.map(|x| -lr * x);
            p.add_assign(&upd);
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_v: f64,
    pub b_v: f64,
    pub b_t: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}", self.epoch, self.loss_t, self.loss_v, self.b_v, self.b_t)
    }
}

/// Outcome of adapting one task.
#[derive(Debug, Clone)]
pub struct AdaptReport {
    pub task_index: usize,
    pub log: Vec<EpochLog>,
    /// Centers `(b_v, b_t)` after each calibration round.
    pub calibration: Vec<(f64, f64)>,
}

enum Inputs<'a, T> {
    Pixels { images: &'a [Image<T>], regions: &'a [RegionMask] },
    Features(&'a [FeatureGrid<T>]),
}

enum Samples<T> {
    Pixels(Vec<Image<T>>),
    Features(Vec<FeatureGrid<T>>),
}

impl<T: Scalar> Inputs<'_, T> {
    fn len(&self) -> usize {
        match self {
            Inputs::Pixels { images, .. } => images.len(),
            Inputs::Features(f) => f.len(),
        }
    }

    fn pseudo_labelled(&self, indices: &[usize], sigma: f64, rng: &mut Rng) -> Result<(Samples<T>, Vec<bool>)> {
        match self {
            Inputs::Pixels { images, .. } => {
                let picked: Vec<Image<T>> = indices.iter().map(|&i| images[i].clone()).collect();
                let (s, l) = pseudo_label_batch(&picked, sigma, rng)?;
                Ok((Samples::Pixels(s), l))
            }
            Inputs::Features(f) => {
                let picked: Vec<FeatureGrid<T>> = indices.iter().map(|&i| f[i].clone()).collect();
                let (s, l) = pseudo_label_features(&picked, sigma, rng)?;
                Ok((Samples::Features(s), l))
            }
        }
    }

    fn key_features(&self, backbone: &Backbone<T>, i: usize) -> Result<FeatureGrid<T>> {
        match self {
            Inputs::Pixels { images, .. } => backbone.key_features(&images[i]),
            Inputs::Features(f) => Ok(f[i].clone()),
        }
    }
}

impl<T: Scalar> Samples<T> {
    fn score_features(&self, backbone: &Backbone<T>, prompt: &VisualPrompt<T>) -> Result<Vec<FeatureGrid<T>>> {
        match self {
            Samples::Pixels(ims) => ims.iter().map(|im| backbone.score_features(im, prompt)).collect(),
            Samples::Features(f) => Ok(f.clone()),
        }
    }
}

fn unit_rows<T: Scalar>(m: Matrix<T>) -> Matrix<T> {
    let mut m = m;
    for i in 0..m.rows() {
        let n = m.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            for v in m.row_mut(i) {
                *v /= n;
            }
        }
    }
    m
}

fn finite_loss<T: Scalar>(what: &str, v: T) -> Result<T> {
    if !v.is_finite() {
        log::error!("{what} is {v}; aborting adaptation");
        return Err(Error::Diverged(v.as_f64()));
    }
    Ok(v)
}

/// Text-branch anomaly score of a sample: the largest `1 - cos` over patches.
pub fn text_image_score<T: Scalar>(backbone: &Backbone<T>, features: &FeatureGrid<T>, text: &[T]) -> Result<T> {
    let projected = FeatureGrid::from_matrix(features.grid_h(), features.grid_w(), backbone.project_to_text(features))?;
    Ok(crate::fusion::score_text(&projected, text)?.max())
}

/// Loss_T and its gradient for given score-tap features.
fn text_step<T: Scalar>(backbone: &Backbone<T>, text: &TextPrompt<T>, feats: &[FeatureGrid<T>], labels: &[bool]) -> Result<(T, Matrix<T>)> {
    let projected: Vec<Matrix<T>> = feats.iter().map(|f| unit_rows(backbone.project_to_text(f))).collect();
    let targets = Matrix::from_fn(labels.len(), 1, |i, _| if labels[i] { -T::one() } else { T::zero() });
    let inv = T::one() / T::of(labels.len() as f64);
    let (loss, grads) = backbone.prompt_gradients(&[], None, Some(text), |tape: &mut Tape<T>, out| {
        let e = out.text_embedding.expect("text prompt was recorded");
        let en = tape.row_normalize(e)?;
        let mut xs = Vec::with_capacity(projected.len());
        for p in projected {
            let pc = tape.constant(p);
            let cos = tape.matmul_t(pc, en);
            let neg = tape.scale(cos, -T::one());
            let s = tape.add_scalar(neg, T::one());
            xs.push(tape.max_all(s));
        }
        let x = tape.concat_rows(&xs);
        let d = tape.add_const(x, &targets);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        Ok(tape.scale(s, inv))
    })?;
    Ok((finite_loss("Loss_T", loss)?, grads.text.expect("text prompt gradient")))
}

/// Loss_V on the clean samples of a pixel batch, its gradient, and the
/// score-tap features of every sample in the batch.
fn visual_step<T: Scalar>(
    backbone: &Backbone<T>,
    visual: &VisualPrompt<T>,
    samples: &[Image<T>],
    weights: &[Matrix<T>],
) -> Result<(T, Vec<Matrix<T>>, Vec<FeatureGrid<T>>)> {
    let tap = backbone.config().tap_layer_score;
    let side = backbone.config().grid_side();
    let mut feats = Vec::with_capacity(samples.len());
    let inv = T::one() / T::of(weights.len() as f64);
    let (loss, grads) = backbone.prompt_gradients(samples, Some(visual), None, |tape: &mut Tape<T>, out| {
        let mut terms = Vec::with_capacity(weights.len());
        for (s, layers) in out.image_layers.iter().enumerate() {
            let f = layers[tap - 1];
            feats.push(tape.value(f).clone());
            if s % 2 == 0 {
                let n = tape.row_normalize(f)?;
                let g = tape.matmul_t(n, n);
                terms.push(tape.weighted_sum(g, weights[s / 2].clone()));
            }
        }
        let all = tape.concat_rows(&terms);
        let s = tape.sum(all);
        Ok(tape.scale(s, inv))
    })?;
    let feats = feats.into_iter().map(|m| FeatureGrid::from_matrix(side, side, m)).collect::<Result<_>>()?;
    Ok((finite_loss("Loss_V", loss)?, grads.visual.expect("visual prompt gradient"), feats))
}

/// Adapts one task from normal images and appends its memory to `bank`.
pub fn adapt_task<T: Scalar>(
    dataset: &TaskDataset<T>,
    bank: &mut MemoryBank<T>,
    config: &TrainConfig,
    backbone: &mut Backbone<T>,
) -> Result<AdaptReport> {
    let side = backbone.config().grid_side();
    for m in &dataset.region_masks {
        if (m.height(), m.width()) != (side, side) {
            return Err(Error::DimensionMismatch(format!("{}x{} region mask for a {side}x{side} grid", m.height(), m.width())));
        }
    }
    let inputs = Inputs::Pixels { images: &dataset.images, regions: &dataset.region_masks };
    adapt(&dataset.task_name, inputs, bank, config, backbone)
}

/// Adapts one task from precomputed features. The visual prompt keeps its
/// initial value because the features do not depend on it.
pub fn adapt_task_features<T: Scalar>(
    dataset: &FeatureDataset<T>,
    bank: &mut MemoryBank<T>,
    config: &TrainConfig,
    backbone: &mut Backbone<T>,
) -> Result<AdaptReport> {
    if dataset.features.is_empty() {
        return Err(Error::InvalidArgument(format!("task {} has no feature grids", dataset.task_name)));
    }
    let c = backbone.config().dim;
    if let Some(f) = dataset.features.iter().find(|f| f.channels() != c) {
        return Err(Error::DimensionMismatch(format!("feature width {} vs backbone dim {c}", f.channels())));
    }
    adapt(&dataset.task_name, Inputs::Features(&dataset.features), bank, config, backbone)
}

fn adapt<T: Scalar>(
    name: &str,
    inputs: Inputs<'_, T>,
    bank: &mut MemoryBank<T>,
    config: &TrainConfig,
    backbone: &mut Backbone<T>,
) -> Result<AdaptReport> {
    config.validate()?;
    if bank.contains(name) {
        return Err(Error::DuplicateTask(name.to_string()));
    }
    backbone.register_class(name)?;
    let backbone: &Backbone<T> = backbone;
    let bcfg = backbone.config().clone();
    let root = Rng::new(config.seed).fork_named(name);

    let n = inputs.len();
    let n_val = ((n as f64) * config.validation_fraction).floor() as usize;
    let (train, val): (Vec<usize>, Vec<usize>) = if n_val == 0 || n_val == n {
        ((0..n).collect(), (0..n).collect())
    } else {
        ((0..n - n_val).collect(), (n - n_val..n).collect())
    };

    // Task identity keys from prompt-free features.
    let key_rows = (0..n).map(|i| inputs.key_features(backbone, i).map(|g| g.to_patch_set())).collect::<Result<Vec<_>>>()?;
    let key_rows = PatchSet::concat(&key_rows)?;
    let keys = fps(&key_rows, SamplingBudget::new(config.key_budget.min(key_rows.count())))?;

    let mut init = root.fork_named("init");
    let mut text = TextPrompt::standard_normal(TEXT_PROMPT_ROWS, bcfg.text_dim, name, &mut init)?;
    let mut visual = VisualPrompt::uniform(bcfg.n_layers, VISUAL_PROMPT_LEN, bcfg.dim, &mut init)?;

    let (la, lb) = (T::of(config.lambda_alpha), T::of(config.lambda_beta));
    let weights: Vec<Matrix<T>> = match &inputs {
        Inputs::Pixels { regions, .. } => {
            let mut prng = root.fork_named("pairs");
            regions.iter().map(|r| pair_weights(r, la, lb, config.max_pairs, &mut prng)).collect()
        }
        Inputs::Features(_) => Vec::new(),
    };

    let mut opt_v = Momentum::new(config.learning_rate, config.momentum);
    let mut opt_t = Momentum::new(config.learning_rate, config.momentum);
    let mut order_rng = root.fork_named("order");
    let mut noise_rng = root.fork_named("noise");
    let half = config.batch_size / 2;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        order_rng.shuffle(&mut order);
        let (mut sum_t, mut sum_v, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(half) {
            let (samples, labels) = inputs.pseudo_labelled(chunk, config.sigma, &mut noise_rng)?;
            let feats = match &samples {
                Samples::Pixels(ims) => {
                    let w: Vec<Matrix<T>> = chunk.iter().map(|&i| weights[i].clone()).collect();
                    let (lv, g, feats) = visual_step(backbone, &visual, ims, &w)?;
                    opt_v.step(visual.layers_mut(), &g);
                    sum_v += lv.as_f64();
                    feats
                }
                Samples::Features(f) => f.clone(),
            };
            let (lt, g) = text_step(backbone, &text, &feats, &labels)?;
            opt_t.step(std::slice::from_mut(&mut text.learnable), std::slice::from_ref(&g));
            sum_t += lt.as_f64();
            batches += 1;
        }
        let b = batches as f64;
        curve.push((sum_t / b, sum_v / b));
        log::debug!("{name} epoch {}: loss_t {:.6} loss_v {:.6}", epoch + 1, sum_t / b, sum_v / b);
    }

    // Normal feature bank from prompt-conditioned features of the training split.
    let bank_rows = match &inputs {
        Inputs::Pixels { images, .. } => train
            .iter()
            .map(|&i| backbone.score_features(&images[i], &visual).map(|g| g.to_patch_set()))
            .collect::<Result<Vec<_>>>()?,
        Inputs::Features(f) => train.iter().map(|&i| f[i].to_patch_set()).collect(),
    };
    let bank_rows = PatchSet::concat(&bank_rows)?;
    let feature_bank = coreset_select(&bank_rows, SamplingBudget::new(config.bank_budget.min(bank_rows.count())))?;

    let k = T::of(config.k_sigmoid);
    let provisional = TaskMemory::new(
        name,
        keys,
        text,
        visual,
        feature_bank,
        Calibration::new(k, T::zero())?,
        Calibration::new(k, T::zero())?,
    )?;
    let text_embedding = backbone.encode_text(&provisional.text_prompt)?;

    // Held-out pseudo-labelled maps for calibrating both centers.
    let mut val_rng = root.fork_named("validation");
    let (val_samples, val_labels) = inputs.pseudo_labelled(&val, config.sigma, &mut val_rng)?;
    let val_feats = val_samples.score_features(backbone, &provisional.visual_prompt)?;
    let mut raw_v = Vec::with_capacity(val_feats.len());
    let mut raw_t = Vec::with_capacity(val_feats.len());
    for f in &val_feats {
        let maps = branch_maps(backbone, f, &provisional, &text_embedding, OUTPUT_HW)?;
        raw_v.push(maps.visual);
        raw_t.push(maps.text);
    }
    let (calib_v, calib_t, trajectory) = calibrate(&raw_v, &raw_t, &val_labels, config)?;

    let mem = TaskMemory { calib_v, calib_t, ..provisional };
    let task_index = bank.insert_task(mem)?;
    let log = curve
        .iter()
        .enumerate()
        .map(|(e, &(loss_t, loss_v))| {
            let (b_v, b_t) = trajectory[e.min(trajectory.len() - 1)];
            EpochLog { epoch: e + 1, loss_t, loss_v, b_v, b_t }
        })
        .collect();
    Ok(AdaptReport { task_index, log, calibration: trajectory })
}

fn mean_clean<T: Scalar>(raw: &[ScoreMap<T>], labels: &[bool]) -> T {
    let clean: Vec<T> = raw.iter().zip(labels).filter(|(_, &l)| !l).map(|(m, _)| m.mean()).collect();
    if clean.is_empty() {
        T::zero()
    } else {
        clean.iter().copied().sum::<T>() / T::of(clean.len() as f64)
    }
}

type Trajectory = Vec<(f64, f64)>;

/// Per-branch rounds, then joint rounds on fused maps, each phase stopping
/// once a round keeps both centers. At most `epochs` rounds per phase.
fn calibrate<T: Scalar>(
    raw_v: &[ScoreMap<T>],
    raw_t: &[ScoreMap<T>],
    sample_labels: &[bool],
    config: &TrainConfig,
) -> Result<(Calibration<T>, Calibration<T>, Trajectory)> {
    let labels: Vec<bool> = raw_v
        .iter()
        .zip(sample_labels)
        .flat_map(|(m, &l)| std::iter::repeat(l).take(m.values().len()))
        .collect();
    let k = T::of(config.k_sigmoid);
    let mut v = CalibState::new(Calibration::new(k, mean_clean(raw_v, sample_labels))?);
    let mut t = CalibState::new(Calibration::new(k, mean_clean(raw_t, sample_labels))?);
    let mut trajectory = vec![(v.b.as_f64(), t.b.as_f64())];
    let deltas = &config.delta_set;

    for _ in 0..config.epochs {
        let nv = greedy_calibrate(&v, raw_v, &labels, deltas, None)?;
        let nt = greedy_calibrate(&t, raw_t, &labels, deltas, None)?;
        let moved = nv.b != v.b || nt.b != t.b;
        v = nv;
        t = nt;
        trajectory.push((v.b.as_f64(), t.b.as_f64()));
        if !moved {
            break;
        }
    }
    let alpha = T::of(config.alpha_fusion);
    for _ in 0..config.epochs {
        let norm_t = raw_t.iter().map(|m| anm(m, &t.calibration())).collect::<Result<Vec<_>>>()?;
        let nv = greedy_calibrate(&v, raw_v, &labels, deltas, Some(Partner { maps: &norm_t, weight: alpha }))?;
        let norm_v = raw_v.iter().map(|m| anm(m, &nv.calibration())).collect::<Result<Vec<_>>>()?;
        let nt = greedy_calibrate(&t, raw_t, &labels, deltas, Some(Partner { maps: &norm_v, weight: T::one() - alpha }))?;
        let moved = nv.b != v.b || nt.b != t.b;
        v = nv;
        t = nt;
        trajectory.push((v.b.as_f64(), t.b.as_f64()));
        if !moved {
            break;
        }
    }
    Ok((v.calibration(), t.calibration(), trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_text_examples() {
        assert_eq!(loss_text(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(loss_text(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!(loss_text::<f64>(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn identical_patches_in_one_region() {
        let g = FeatureGrid::new(2, 2, 3, [1.0, 2.0, 3.0].repeat(4)).unwrap();
        let r = RegionMask::uniform(2, 2);
        let l: f64 = loss_visual(&g, &r, 1.0, 0.5).unwrap();
        assert!((l + 0.5 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_regions_have_no_cross_term() {
        let g = FeatureGrid::new(1, 4, 2, vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]).unwrap();
        let r = RegionMask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert!((loss_visual::<f64>(&g, &r, 1.0, 1.0).unwrap() + 2.0).abs() < 1e-12);
        assert!((loss_visual::<f64>(&g, &r, 7.0, 1.0).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_balanced_and_deterministic() {
        let im = Image::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let ims = vec![im.clone(), im];
        let (a, la) = pseudo_label_batch(&ims, 1.0, &mut Rng::new(3)).unwrap();
        let (b, _) = pseudo_label_batch(&ims, 1.0, &mut Rng::new(3)).unwrap();
        assert_eq!(la, vec![false, true, false, true]);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        let (z, _) = pseudo_label_batch(&ims, 0.0, &mut Rng::new(3)).unwrap();
        assert_eq!(z[0], z[1]);
    }

    #[test]
    fn momentum_update_rule() {
        let mut opt = Momentum::new(0.1, 0.9);
        let mut p = vec![Matrix::filled(1, 1, 1.0)];
        let g = vec![Matrix::filled(1, 1, 2.0)];
        opt.step(&mut p, &g);
        assert!((p[0].get(0, 0) - 0.8f64).abs() < 1e-15);
        opt.step(&mut p, &g);
        assert!((p[0].get(0, 0) - (0.8f64 - 0.1 * 3.8)).abs() < 1e-15);
    }

    #[test]
    fn subsampled_pair_weights_keep_total_mass() {
        let r = RegionMask::uniform(15, 15);
        let w: Matrix<f64> = pair_weights(&r, 1.0, 1.0, 1000, &mut Rng::new(1));
        let pairs = 225.0 * 224.0 / 2.0;
        assert!((w.sum() + pairs).abs() < 1e-6);
        for i in 0..225 {
            for j in 0..=i {
                assert_eq!(w.get(i, j), 0.0);
            }
        }
    }
}
