//! Frozen toy vision transformer and text encoder with prompt injection.
//!
//! Weights are drawn once from a seed and never change. Visual prompts enter
//! every layer twice: the mean prompt row is added to the layer input, and the
//! prompt rows are spliced into the attention keys and values (first half keys,
//! second half values). Gradients flow only to prompt parameters.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{fnv1a, Rng};
use crate::scalar::Scalar;
use crate::tensor::{FeatureGrid, Image, Matrix};

/// Number of learnable text prompt rows.
pub const TEXT_PROMPT_ROWS: usize = 5;
/// Default visual prompt length per layer.
pub const VISUAL_PROMPT_LEN: usize = 2;

const POSITION_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_hw: usize,
    pub image_channels: usize,
    /// 1-based layer whose output feeds task identification.
    pub tap_layer_key: usize,
    /// 1-based layer whose output feeds scoring and the coreset bank.
    pub tap_layer_score: usize,
    pub dropout_p: f64,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub positional: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            dim: 64,
            heads: 4,
            patch_size: 16,
            input_hw: 224,
            image_channels: 3,
            tap_layer_key: 5,
            tap_layer_score: 5,
            dropout_p: 0.0,
            mlp_ratio: 4,
            text_dim: 32,
            text_layers: 2,
            text_heads: 2,
            positional: true,
            seed: 0x5eed_u64,
        }
    }
}

impl BackboneConfig {
    pub fn grid_side(&self) -> usize {
        self.input_hw / self.patch_size
    }

    /// Number of patch tokens.
    pub fn seq_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Deepest layer any tap needs.
    pub fn depth_needed(&self) -> usize {
        self.tap_layer_key.max(self.tap_layer_score)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_layers == 0 || self.dim == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("backbone sizes must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.input_hw == 0 || self.input_hw % self.patch_size != 0 {
            return bad(format!("input {} not divisible by patch size {}", self.input_hw, self.patch_size));
        }
        for (name, tap) in [("key", self.tap_layer_key), ("score", self.tap_layer_score)] {
            if tap == 0 || tap > self.n_layers {
                return bad(format!("tap_layer_{name} = {tap} outside 1..={}", self.n_layers));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.text_dim == 0 || self.text_heads == 0 || self.text_dim % self.text_heads != 0 {
            return bad(format!("text dim {} not divisible by heads {}", self.text_dim, self.text_heads));
        }
        if self.image_channels == 0 || self.mlp_ratio == 0 {
            return bad("image channels and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// Per-layer visual prompts, each `l x C` with `l` even.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt<T> {
    per_layer: Vec<Matrix<T>>,
}

impl<T: Scalar> VisualPrompt<T> {
    pub fn new(per_layer: Vec<Matrix<T>>) -> Result<Self> {
        let first = per_layer.first().ok_or(Error::InvalidArgument("visual prompt has no layers".into()))?;
        let (l, c) = first.shape();
        if l == 0 || l % 2 != 0 {
            return Err(Error::InvalidArgument(format!("visual prompt length {l} must be even and positive")));
        }
        if per_layer.iter().any(|m| m.shape() != (l, c)) {
            return Err(Error::DimensionMismatch("visual prompt layers differ in shape".into()));
        }
        if per_layer.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("visual prompt".into()));
        }
        Ok(Self { per_layer })
    }

    /// Entries drawn from Uniform(0, 1).
    pub fn uniform(n_layers: usize, len: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..n_layers).map(|_| Matrix::from_fn(len, dim, |_, _| T::of(rng.uniform()))).collect())
    }

    pub fn zeros(n_layers: usize, len: usize, dim: usize) -> Result<Self> {
        Self::new((0..n_layers).map(|_| Matrix::zeros(len, dim)).collect())
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.per_layer[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.per_layer[0].cols()
    }

    pub fn layer(&self, i: usize) -> &Matrix<T> {
        &self.per_layer[i]
    }

    pub fn layers(&self) -> &[Matrix<T>] {
        &self.per_layer
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.per_layer
    }
}

/// Learnable rows spliced into the template `a photo of a [class] with [P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrompt<T> {
    pub learnable: Matrix<T>,
    pub class_name: String,
}

impl<T: Scalar> TextPrompt<T> {
    pub fn new(learnable: Matrix<T>, class_name: impl Into<String>) -> Result<Self> {
        let class_name = class_name.into();
        if class_name.trim().is_empty() {
            return Err(Error::InvalidArgument("class name is empty".into()));
        }
        if learnable.rows() == 0 || !learnable.is_finite() {
            return Err(Error::InvalidArgument("text prompt rows must be finite and nonempty".into()));
        }
        Ok(Self { learnable, class_name })
    }

    /// Rows drawn from N(0, 1).
    pub fn standard_normal(rows: usize, dim: usize, class_name: &str, rng: &mut Rng) -> Result<Self> {
        Self::new(Matrix::from_fn(rows, dim, |_, _| T::of(rng.normal())), class_name)
    }
}

/// Which of the two visual prompt paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    /// Add the mean prompt row to every layer input.
    pub additive: bool,
    /// Prepend prompt rows to attention keys and values.
    pub splice: bool,
}

impl Default for Injection {
    fn default() -> Self {
        Self { additive: true, splice: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// `C x 3C`, columns ordered q | k | v.
    pub qkv: Arc<Matrix<T>>,
    pub qkv_bias: Matrix<T>,
    pub out: Arc<Matrix<T>>,
    pub out_bias: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    pub fc1: Arc<Matrix<T>>,
    pub fc1_bias: Matrix<T>,
    pub fc2: Arc<Matrix<T>>,
    pub fc2_bias: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub attn: AttentionWeights<T>,
    pub mlp: MlpWeights<T>,
}

/// Everything generated from `(seed, config)`; never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenWeights<T> {
    pub patch_proj: Arc<Matrix<T>>,
    pub patch_bias: Matrix<T>,
    pub position: Matrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub text_blocks: Vec<BlockWeights<T>>,
    /// Bridge from visual patch space to text space, `C x C_t`.
    pub visual_to_text: Arc<Matrix<T>>,
}

fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::of(std * rng.normal()))
}

fn sinusoidal<T: Scalar>(len: usize, dim: usize, scale: f64) -> Matrix<T> {
    Matrix::from_fn(len, dim, |pos, i| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        T::of(scale * if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<T: Scalar> BlockWeights<T> {
    fn random(dim: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        let hidden = dim * mlp_ratio;
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            attn: AttentionWeights {
                qkv: Arc::new(gaussian(dim, 3 * dim, s, rng)),
                qkv_bias: gaussian(1, 3 * dim, 0.02, rng),
                out: Arc::new(gaussian(dim, dim, s, rng)),
                out_bias: gaussian(1, dim, 0.02, rng),
            },
            mlp: MlpWeights {
                fc1: Arc::new(gaussian(dim, hidden, s, rng)),
                fc1_bias: gaussian(1, hidden, 0.02, rng),
                fc2: Arc::new(gaussian(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng)),
                fc2_bias: gaussian(1, dim, 0.02, rng),
            },
        }
    }
}

impl<T: Scalar> FrozenWeights<T> {
    pub fn generate(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let patch_in = config.patch_size * config.patch_size * config.image_channels;
        let mut r = root.fork_named("patch");
        let patch_proj = Arc::new(gaussian(patch_in, config.dim, 1.0 / (patch_in as f64).sqrt(), &mut r));
        let patch_bias = gaussian(1, config.dim, 0.02, &mut r);
        let mut r = root.fork_named("blocks");
        let blocks = (0..config.n_layers).map(|_| BlockWeights::random(config.dim, config.mlp_ratio, &mut r)).collect();
        let mut r = root.fork_named("text-blocks");
        let text_blocks =
            (0..config.text_layers).map(|_| BlockWeights::random(config.text_dim, config.mlp_ratio, &mut r)).collect();
        let mut r = root.fork_named("bridge");
        let visual_to_text = Arc::new(gaussian(config.dim, config.text_dim, 1.0 / (config.dim as f64).sqrt(), &mut r));
        Ok(Self {
            patch_proj,
            patch_bias,
            position: sinusoidal(config.seq_len(), config.dim, POSITION_SCALE),
            blocks,
            text_blocks,
            visual_to_text,
        })
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        let mut push = |m: &Matrix<T>| {
            for v in m.as_slice() {
                bytes.extend_from_slice(&v.as_f64().to_bits().to_le_bytes());
            }
        };
        push(&self.patch_proj);
        push(&self.patch_bias);
        push(&self.position);
        for b in self.blocks.iter().chain(&self.text_blocks) {
            for m in [&*b.attn.qkv, &b.attn.qkv_bias, &*b.attn.out, &b.attn.out_bias] {
                push(m);
            }
            for m in [&*b.mlp.fc1, &b.mlp.fc1_bias, &*b.mlp.fc2, &b.mlp.fc2_bias] {
                push(m);
            }
        }
        push(&self.visual_to_text);
        fnv1a(&bytes)
    }
}

/// Words every text encoder knows; class names are registered on top.
const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "of", "with", "without", "and", "or", "in", "on", "at", "for", "from", "to", "by",
    "image", "picture", "close", "up", "view", "object", "surface", "texture", "part", "item", "product", "sample",
    "normal", "good", "perfect", "flawless", "clean", "intact", "smooth", "regular", "uniform", "pristine", "healthy",
    "damaged", "broken", "defect", "defective", "anomaly", "anomalous", "abnormal", "flaw", "crack", "scratch", "hole",
    "stain", "spot", "dent", "cut", "tear", "missing", "bent", "contamination", "color", "shape", "pattern", "line",
    "stripe", "dot", "grid", "wave", "fabric", "metal", "wood", "plastic", "glass", "leather", "tile", "carpet",
    "industrial", "manufactured", "small", "large", "bright", "dark", "rough", "fine", "top", "bottom", "left", "right",
    "center", "edge", "corner", "inside", "outside", "front", "back", "side", "one", "two", "some", "this", "that", "is",
];

/// End-of-text marker; its final hidden state is the text embedding.
const EOT: &str = "<eot>";

/// Deterministic token table: each word's embedding is a pure function of
/// `(seed, word)`, so registration order never changes any embedding.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    seed: u64,
    dim: usize,
    known: BTreeSet<String>,
}

impl Vocabulary {
    fn new(seed: u64, dim: usize) -> Self {
        let mut known: BTreeSet<String> = BASE_WORDS.iter().map(|w| w.to_string()).collect();
        known.insert(EOT.to_string());
        Self { seed, dim, known }
    }

    pub fn tokenize(text: &str) -> Vec<String> {
        text.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.known.contains(word)
    }

    /// Adds every token of `name`; tokens must be ASCII alphanumeric.
    pub fn register(&mut self, name: &str) -> Result<()> {
        let tokens = Self::tokenize(name);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("class name is empty".into()));
        }
        for t in &tokens {
            if !t.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(Error::UnknownToken(t.clone()));
            }
        }
        self.known.extend(tokens);
        Ok(())
    }

    fn embed<T: Scalar>(&self, word: &str) -> Result<Vec<T>> {
        if !self.contains(word) {
            return Err(Error::UnknownToken(word.to_string()));
        }
        let mut rng = Rng::new(self.seed).fork_named("token").fork(fnv1a(word.as_bytes()));
        Ok((0..self.dim).map(|_| T::of(rng.normal())).collect())
    }
}

/// Optional dropout hook; identity when `p == 0` or no generator is given.
pub struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'r mut Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => {
                let (r, c) = tape.value(x).shape();
                let keep = T::of(1.0 / (1.0 - self.p));
                let mask = Matrix::from_fn(r, c, |_, _| if rng.uniform() < self.p { T::zero() } else { keep });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// Result of recording [`prompt_attention`] on a tape.
pub struct AttentionTrace {
    pub output: Var,
    /// Softmax weights per head, `N x (l/2 + N)` when a prompt is spliced.
    pub weights: Vec<Var>,
}

/// Multi-head self-attention with optional key/value prompt splicing.
///
/// `x` is `N x C`; `prompt`, when present, is `l x C` with `l` even. The first
/// `l/2` prompt rows become extra keys and the last `l/2` extra values, split
/// across heads along the channel axis and prepended to the sequence.
pub fn prompt_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    prompt: Option<Var>,
    weights: &AttentionWeights<T>,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<AttentionTrace> {
    let dim = weights.qkv.rows();
    let (n, c) = tape.value(x).shape();
    if c != dim || weights.qkv.cols() != 3 * dim || weights.out.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch(format!("attention input width {c} vs weights {dim}")));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!("{dim} channels not divisible by {heads} heads")));
    }
    let half = match prompt {
        Some(p) => {
            let (l, pc) = tape.value(p).shape();
            if l == 0 || l % 2 != 0 {
                return Err(Error::InvalidArgument(format!("prompt length {l} must be even")));
            }
            if pc != dim {
                return Err(Error::DimensionMismatch(format!("prompt width {pc} vs {dim}")));
            }
            l / 2
        }
        None => 0,
    };
    let d = dim / heads;
    let qkv = tape.linear(x, &weights.qkv, Some(&weights.qkv_bias));
    let q = tape.slice_cols(qkv, 0, dim);
    let k = tape.slice_cols(qkv, dim, dim);
    let v = tape.slice_cols(qkv, 2 * dim, dim);
    let (kp, vp) = match prompt {
        Some(p) => (Some(tape.slice_rows(p, 0, half)), Some(tape.slice_rows(p, half, half))),
        None => (None, None),
    };
    let inv_sqrt_d = T::one() / T::of(d as f64).sqrt();
    let mut head_out = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d);
        let mut kh = tape.slice_cols(k, h * d, d);
        let mut vh = tape.slice_cols(v, h * d, d);
        if let (Some(kp), Some(vp)) = (kp, vp) {
            let kph = tape.slice_cols(kp, h * d, d);
            let vph = tape.slice_cols(vp, h * d, d);
            kh = tape.concat_rows(&[kph, kh]);
            vh = tape.concat_rows(&[vph, vh]);
        }
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, inv_sqrt_d);
        let a = tape.softmax_rows(scores);
        attn.push(a);
        let a = dropout.apply(tape, a);
        head_out.push(tape.matmul(a, vh));
    }
    debug_assert_eq!(tape.value(attn[0]).shape(), (n, n + half));
    let y = tape.concat_cols(&head_out);
    let y = tape.linear(y, &weights.out, Some(&weights.out_bias));
    let y = dropout.apply(tape, y);
    Ok(AttentionTrace { output: y, weights: attn })
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`, with
/// the mean prompt row added to the block input when `additive` is set.
fn block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    prompt: Option<Var>,
    injection: Injection,
    w: &BlockWeights<T>,
    heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let x = match prompt {
        Some(p) if injection.additive => {
            let m = tape.mean_rows(p);
            tape.add_row(x, m)
        }
        _ => x,
    };
    let h = tape.layer_norm(x);
    let splice = if injection.splice { prompt } else { None };
    let a = prompt_attention(tape, h, splice, &w.attn, heads, dropout)?.output;
    let x = tape.add(x, a);
    let h = tape.layer_norm(x);
    let h = tape.linear(h, &w.mlp.fc1, Some(&w.mlp.fc1_bias));
    let h = tape.gelu(h);
    let h = tape.linear(h, &w.mlp.fc2, Some(&w.mlp.fc2_bias));
    Ok(tape.add(x, h))
}

/// Outputs of a recorded forward pass.
pub struct ForwardOutputs {
    /// Per image, the `N x C` output of layers `1..=depth`.
    pub image_layers: Vec<Vec<Var>>,
    /// `1 x C_t` text embedding, when a text prompt was given.
    pub text_embedding: Option<Var>,
    pub visual_params: Vec<Var>,
    pub text_param: Option<Var>,
}

/// Gradients with the shapes of the prompts they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradients<T> {
    pub visual: Option<Vec<Matrix<T>>>,
    pub text: Option<Matrix<T>>,
}

impl<T: Scalar> PromptGradients<T> {
    pub fn add(&self, other: &Self) -> Self {
        let visual = match (&self.visual, &other.visual) {
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let mut s = x.clone();
                        s.add_assign(y);
                        s
                    })
                    .collect(),
            ),
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        let text = match (&self.text, &other.text) {
            (Some(a), Some(b)) => {
                let mut s = a.clone();
                s.add_assign(b);
                Some(s)
            }
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        Self { visual, text }
    }

    pub fn max_abs(&self) -> T {
        let v = self.visual.iter().flatten().map(Matrix::max_abs);
        let t = self.text.iter().map(Matrix::max_abs);
        v.chain(t).fold(T::zero(), T::max)
    }
}

/// Frozen backbone: configuration, weights and vocabulary.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    config: BackboneConfig,
    weights: FrozenWeights<T>,
    vocab: Vocabulary,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let weights = FrozenWeights::generate(&config)?;
        let vocab = Vocabulary::new(config.seed, config.text_dim);
        Ok(Self { config, weights, vocab })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &FrozenWeights<T> {
        &self.weights
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn register_class(&mut self, name: &str) -> Result<()> {
        self.vocab.register(name)
    }

    /// Flattens each `P x P` patch (channel-major) into one row, patches row-major.
    pub fn patch_tokens(&self, image: &Image<T>) -> Result<Matrix<T>> {
        let c = &self.config;
        if image.channels() != c.image_channels || image.height() != c.input_hw || image.width() != c.input_hw {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{}x{} vs expected {}x{}x{}",
                image.channels(),
                image.height(),
                image.width(),
                c.image_channels,
                c.input_hw,
                c.input_hw
            )));
        }
        let (p, g) = (c.patch_size, c.grid_side());
        let mut data = Vec::with_capacity(c.seq_len() * p * p * c.image_channels);
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.image_channels {
                    for y in 0..p {
                        for x in 0..p {
                            data.push(image.get(ch, gy * p + y, gx * p + x));
                        }
                    }
                }
            }
        }
        Matrix::new(c.seq_len(), p * p * c.image_channels, data)
    }

    fn check_visual(&self, prompt: &VisualPrompt<T>) -> Result<()> {
        if prompt.n_layers() != self.config.n_layers {
            return Err(Error::DimensionMismatch(format!(
                "visual prompt has {} layers, backbone has {}",
                prompt.n_layers(),
                self.config.n_layers
            )));
        }
        if prompt.dim() != self.config.dim {
            return Err(Error::DimensionMismatch(format!(
                "visual prompt width {} vs backbone dim {}",
                prompt.dim(),
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Records the image stack from patch tokens; returns layer outputs `1..=depth`.
    pub fn record_tokens(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        prompts: Option<&[Var]>,
        injection: Injection,
        depth: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<Vec<Var>> {
        let mut x = tape.linear(tokens, &self.weights.patch_proj, Some(&self.weights.patch_bias));
        if self.config.positional {
            x = tape.add_const(x, &self.weights.position);
        }
        let mut outs = Vec::with_capacity(depth);
        for (i, w) in self.weights.blocks.iter().take(depth).enumerate() {
            x = block(tape, x, prompts.map(|p| p[i]), injection, w, self.config.heads, dropout)?;
            outs.push(x);
        }
        Ok(outs)
    }

    fn record_image(
        &self,
        tape: &mut Tape<T>,
        image: &Image<T>,
        prompts: Option<&[Var]>,
        injection: Injection,
        depth: usize,
    ) -> Result<Vec<Var>> {
        let tokens = tape.constant(self.patch_tokens(image)?);
        self.record_tokens(tape, tokens, prompts, injection, depth, &mut Dropout::eval())
    }

    fn grids(&self, tape: &Tape<T>, layers: &[Var]) -> Result<Vec<FeatureGrid<T>>> {
        let g = self.config.grid_side();
        layers.iter().map(|v| FeatureGrid::from_matrix(g, g, tape.value(*v).clone())).collect()
    }

    /// Layer outputs `1..=depth_needed()` as feature grids.
    pub fn encode_image(&self, image: &Image<T>, prompts: Option<&VisualPrompt<T>>) -> Result<Vec<FeatureGrid<T>>> {
        self.encode_image_with(image, prompts, Injection::default())
    }

    pub fn encode_image_with(
        &self,
        image: &Image<T>,
        prompts: Option<&VisualPrompt<T>>,
        injection: Injection,
    ) -> Result<Vec<FeatureGrid<T>>> {
        let mut tape = Tape::new();
        let vars = match prompts {
            Some(p) => {
                self.check_visual(p)?;
                Some(p.layers().iter().map(|m| tape.constant(m.clone())).collect::<Vec<_>>())
            }
            None => None,
        };
        let layers = self.record_image(&mut tape, image, vars.as_deref(), injection, self.config.depth_needed())?;
        self.grids(&tape, &layers)
    }

    /// Output of one 1-based layer.
    pub fn features_at(&self, image: &Image<T>, prompts: Option<&VisualPrompt<T>>, layer: usize) -> Result<FeatureGrid<T>> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::InvalidArgument(format!("layer {layer} outside 1..={}", self.config.n_layers)));
        }
        let mut tape = Tape::new();
        let vars = match prompts {
            Some(p) => {
                self.check_visual(p)?;
                Some(p.layers().iter().map(|m| tape.constant(m.clone())).collect::<Vec<_>>())
            }
            None => None,
        };
        let layers = self.record_image(&mut tape, image, vars.as_deref(), Injection::default(), layer)?;
        FeatureGrid::from_matrix(self.config.grid_side(), self.config.grid_side(), tape.value(layers[layer - 1]).clone())
    }

    /// Features for task identification: key tap, no prompts.
    pub fn key_features(&self, image: &Image<T>) -> Result<FeatureGrid<T>> {
        self.features_at(image, None, self.config.tap_layer_key)
    }

    /// Features for scoring: score tap, conditioned on the task's visual prompt.
    pub fn score_features(&self, image: &Image<T>, prompts: &VisualPrompt<T>) -> Result<FeatureGrid<T>> {
        self.features_at(image, Some(prompts), self.config.tap_layer_score)
    }

    fn template_rows(&self, class_name: &str) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut words: Vec<String> = ["a", "photo", "of", "a"].iter().map(|s| s.to_string()).collect();
        let class_tokens = Vocabulary::tokenize(class_name);
        if class_tokens.is_empty() {
            return Err(Error::InvalidArgument("class name is empty".into()));
        }
        words.extend(class_tokens);
        words.push("with".into());
        let prefix = words.iter().map(|w| self.vocab.embed(w)).collect::<Result<Vec<_>>>()?;
        let eot = self.vocab.embed(EOT)?;
        Ok((Matrix::from_rows(&prefix)?, Matrix::new(1, eot.len(), eot)?))
    }

    /// Records the text encoder; returns the `1 x C_t` final-position embedding.
    pub fn record_text(&self, tape: &mut Tape<T>, class_name: &str, learnable: Var) -> Result<Var> {
        let ct = self.config.text_dim;
        if tape.value(learnable).cols() != ct {
            return Err(Error::DimensionMismatch(format!(
                "text prompt width {} vs text dim {ct}",
                tape.value(learnable).cols()
            )));
        }
        let (prefix, eot) = self.template_rows(class_name)?;
        let prefix = tape.constant(prefix);
        let eot = tape.constant(eot);
        let mut x = tape.concat_rows(&[prefix, learnable, eot]);
        let len = tape.value(x).rows();
        x = tape.add_const(x, &sinusoidal(len, ct, 1.0));
        let mut dropout = Dropout::eval();
        for w in &self.weights.text_blocks {
            x = block(tape, x, None, Injection::default(), w, self.config.text_heads, &mut dropout)?;
        }
        let x = tape.layer_norm(x);
        Ok(tape.slice_rows(x, len - 1, 1))
    }

    /// Text embedding `F_T` for a prompt.
    pub fn encode_text(&self, prompt: &TextPrompt<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = tape.constant(prompt.learnable.clone());
        let out = self.record_text(&mut tape, &prompt.class_name, p)?;
        Ok(tape.value(out).as_slice().to_vec())
    }

    /// Patch features mapped into the text embedding space.
    pub fn project_to_text(&self, features: &FeatureGrid<T>) -> Matrix<T> {
        features.to_matrix().matmul(&self.weights.visual_to_text)
    }

    /// Records images and text with prompts as trainable leaves.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        images: &[Image<T>],
        visual: Option<&VisualPrompt<T>>,
        text: Option<&TextPrompt<T>>,
        depth: usize,
    ) -> Result<ForwardOutputs> {
        let visual_params = match visual {
            Some(p) => {
                self.check_visual(p)?;
                p.layers().iter().map(|m| tape.param(m.clone())).collect()
            }
            None => Vec::new(),
        };
        let prompts = visual.map(|_| visual_params.as_slice());
        let image_layers = images
            .iter()
            .map(|im| self.record_image(tape, im, prompts, Injection::default(), depth))
            .collect::<Result<Vec<_>>>()?;
        let (text_param, text_embedding) = match text {
            Some(t) => {
                let p = tape.param(t.learnable.clone());
                (Some(p), Some(self.record_text(tape, &t.class_name, p)?))
            }
            None => (None, None),
        };
        Ok(ForwardOutputs { image_layers, text_embedding, visual_params, text_param })
    }

    /// Reverse-mode gradients of a scalar loss built by `loss_tail` from the
    /// recorded outputs, with respect to the visual and text prompt entries.
    pub fn prompt_gradients<F>(
        &self,
        images: &[Image<T>],
        visual: Option<&VisualPrompt<T>>,
        text: Option<&TextPrompt<T>>,
        loss_tail: F,
    ) -> Result<(T, PromptGradients<T>)>
    where
        F: FnOnce(&mut Tape<T>, &ForwardOutputs) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let outputs = self.record(&mut tape, images, visual, text, self.config.depth_needed())?;
        let loss = loss_tail(&mut tape, &outputs)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        let visual = visual.map(|_| outputs.visual_params.iter().map(|v| grads.get(*v)).collect());
        let text = outputs.text_param.map(|v| grads.get(v));
        Ok((value, PromptGradients { visual, text }))
    }
}
