//! Seeded parametric textures with injected defects and exact masks.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ucad_core::rng::Rng;
use ucad_core::tensor::Image;
use ucad_core::tuning::{RegionMask, TaskDataset};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureFamily {
    Stripes,
    Checker,
    Rings,
    Weave,
    Dots,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 5] = [Self::Stripes, Self::Checker, Self::Rings, Self::Weave, Self::Dots];

    pub fn name(self) -> &'static str {
        match self {
            Self::Stripes => "stripes",
            Self::Checker => "checker",
            Self::Rings => "rings",
            Self::Weave => "weave",
            Self::Dots => "dots",
        }
    }

    fn tint(self) -> [(f64, f64); 3] {
        match self {
            Self::Stripes => [(0.2, 0.6), (0.3, 0.3), (0.1, 0.2)],
            Self::Checker => [(0.1, 0.2), (0.2, 0.6), (0.4, 0.3)],
            Self::Rings => [(0.5, 0.4), (0.1, 0.2), (0.2, 0.6)],
            Self::Weave => [(0.3, 0.3), (0.4, 0.5), (0.1, 0.1)],
            Self::Dots => [(0.6, 0.3), (0.5, 0.3), (0.2, 0.5)],
        }
    }
}

impl fmt::Display for TextureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureFamily {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown texture family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    PatchSwap,
    Blob,
    Stripe,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [Self::PatchSwap, Self::Blob, Self::Stripe];
}

/// Texture parameters drawn per image.
#[derive(Debug, Clone, Copy)]
struct Phase {
    a: f64,
    b: f64,
    freq: f64,
    cx: f64,
    cy: f64,
}

impl Phase {
    fn draw(rng: &mut Rng) -> Self {
        Self {
            a: rng.uniform(),
            b: rng.uniform(),
            freq: rng.uniform_range(0.97, 1.03),
            cx: rng.uniform_range(0.4, 0.6),
            cy: rng.uniform_range(0.4, 0.6),
        }
    }
}

/// Texture intensity in `[0, 1]` at normalized coordinates.
fn texture(family: TextureFamily, u: f64, v: f64, p: &Phase) -> f64 {
    let s = |t: f64| (2.0 * PI * t).sin();
    match family {
        TextureFamily::Stripes => 0.5 + 0.5 * s(6.0 * p.freq * v + p.a),
        TextureFamily::Checker => 0.5 + 0.5 * (3.0 * s(4.0 * p.freq * u + p.a) * s(4.0 * p.freq * v + p.b)).tanh(),
        TextureFamily::Rings => {
            let r = ((u - p.cx).powi(2) + (v - p.cy).powi(2)).sqrt();
            0.5 + 0.5 * s(5.0 * p.freq * r + p.a)
        }
        TextureFamily::Weave => 0.5 + 0.25 * s(5.0 * p.freq * (u + v) + p.a) + 0.25 * s(5.0 * p.freq * (u - v) + p.b),
        TextureFamily::Dots => {
            let period = 1.0 / (5.0 * p.freq);
            let du = ((u + p.a * period) / period).fract() - 0.5;
            let dv = ((v + p.b * period) / period).fract() - 0.5;
            (-(du * du + dv * dv) / 0.04).exp()
        }
    }
}

/// One synthetic task definition.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub family: TextureFamily,
    pub defects: Vec<DefectKind>,
    pub defect_area: f64,
    pub train_images: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Number of intensity levels that define region labels.
    pub region_levels: u16,
    pub image_hw: usize,
    pub channels: usize,
    pub grid_side: usize,
}

impl SyntheticTaskSpec {
    pub fn new(family: TextureFamily) -> Self {
        Self {
            family,
            defects: DefectKind::ALL.to_vec(),
            defect_area: 0.05,
            train_images: 20,
            test_normal: 10,
            test_anomalous: 10,
            region_levels: 4,
            image_hw: 64,
            channels: 3,
            grid_side: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.defect_area > 0.0 && self.defect_area <= 0.5) {
            return bad(format!("defect area {} outside (0, 0.5]", self.defect_area));
        }
        if self.defects.is_empty() && self.test_anomalous > 0 {
            return bad("anomalous test images need at least one defect kind".into());
        }
        if self.train_images == 0 || self.region_levels == 0 {
            return bad("need at least one training image and one region level".into());
        }
        if self.image_hw == 0 || self.grid_side == 0 || self.image_hw % self.grid_side != 0 {
            return bad(format!("image size {} not divisible into a {} grid", self.image_hw, self.grid_side));
        }
        if self.channels == 0 || self.channels > 3 {
            return bad(format!("{} channels; 1 to 3 supported", self.channels));
        }
        Ok(())
    }
}

/// Pixel-level ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Nearest-neighbour resampling to another size.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                values.push(self.values[sy * self.width + sx]);
            }
        }
        Mask { height, width, values }
    }
}

#[derive(Debug, Clone)]
pub struct TestSample {
    pub image: Image<f64>,
    pub anomalous: bool,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: TaskDataset<f64>,
    pub test: Vec<TestSample>,
}

struct Canvas {
    hw: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.hw + y) * self.hw + x
    }
}

fn render(spec: &SyntheticTaskSpec, phase: &Phase, rng: &mut Rng) -> (Canvas, Vec<f64>) {
    let hw = spec.image_hw;
    let tint = spec.family.tint();
    let mut intensity = vec![0.0; hw * hw];
    let mut canvas = Canvas { hw, channels: spec.channels, data: vec![0.0; spec.channels * hw * hw] };
    for y in 0..hw {
        for x in 0..hw {
            let t = texture(spec.family, (x as f64 + 0.5) / hw as f64, (y as f64 + 0.5) / hw as f64, phase);
            intensity[y * hw + x] = t;
            for (c, &(base, amp)) in tint.iter().enumerate().take(spec.channels) {
                let i = canvas.idx(c, y, x);
                canvas.data[i] = base + amp * t + 0.03 * rng.normal();
            }
        }
    }
    (canvas, intensity)
}

fn regions(spec: &SyntheticTaskSpec, phase: &Phase) -> RegionMask {
    let g = spec.grid_side;
    let levels = spec.region_levels;
    let labels = (0..g * g)
        .map(|i| {
            let (r, c) = (i / g, i % g);
            let t = texture(spec.family, (c as f64 + 0.5) / g as f64, (r as f64 + 0.5) / g as f64, phase);
            ((t * f64::from(levels)).floor() as u16).min(levels - 1)
        })
        .collect();
    RegionMask::new(g, g, labels).expect("grid-sized labels")
}

fn inject(spec: &SyntheticTaskSpec, canvas: &mut Canvas, kind: DefectKind, phase: &Phase, rng: &mut Rng) -> Mask {
    let hw = spec.image_hw;
    let area = spec.defect_area * (hw * hw) as f64;
    let mut mask = Mask::empty(hw, hw);
    let tint = spec.family.tint();
    match kind {
        DefectKind::PatchSwap => {
            let side = (area.sqrt().round() as usize).clamp(1, hw);
            let y0 = rng.below(hw - side + 1);
            let x0 = rng.below(hw - side + 1);
            let alien = Phase { freq: phase.freq * 2.7, a: phase.a + 0.25, ..*phase };
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let t = texture(spec.family, (x as f64 + 0.5) / hw as f64 + 0.31, (y as f64 + 0.5) / hw as f64, &alien);
                    let t = 1.0 - t;
                    for (c, &(base, amp)) in tint.iter().enumerate().take(canvas.channels) {
                        let i = canvas.idx(c, y, x);
                        canvas.data[i] = base + amp * t;
                    }
                    mask.values[y * hw + x] = true;
                }
            }
        }
        DefectKind::Blob => {
            let radius = (area / PI).sqrt().max(1.0);
            let cy = rng.uniform_range(radius, hw as f64 - radius);
            let cx = rng.uniform_range(radius, hw as f64 - radius);
            for y in 0..hw {
                for x in 0..hw {
                    let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                    if d <= radius {
                        for c in 0..canvas.channels {
                            let i = canvas.idx(c, y, x);
                            canvas.data[i] += 0.7;
                        }
                        mask.values[y * hw + x] = true;
                    }
                }
            }
        }
        DefectKind::Stripe => {
            let half_width = (area / hw as f64 / 2.0).max(0.75);
            let angle = rng.uniform_range(0.0, PI);
            let (ny, nx) = (angle.cos(), -angle.sin());
            let cy = rng.uniform_range(0.3, 0.7) * hw as f64;
            let cx = rng.uniform_range(0.3, 0.7) * hw as f64;
            let color = [0.05, 0.9, 0.1];
            for y in 0..hw {
                for x in 0..hw {
                    let d = ((y as f64 + 0.5 - cy) * ny + (x as f64 + 0.5 - cx) * nx).abs();
                    if d <= half_width {
                        for (c, &v) in color.iter().enumerate().take(canvas.channels) {
                            let i = canvas.idx(c, y, x);
                            canvas.data[i] = v;
                        }
                        mask.values[y * hw + x] = true;
                    }
                }
            }
        }
    }
    mask
}

fn to_image(canvas: Canvas) -> Image<f64> {
    Image::new(canvas.channels, canvas.hw, canvas.hw, canvas.data).expect("finite synthetic pixels")
}

/// Generates a task's normal training set and a mixed, masked test set.
pub fn gen_synthetic(name: &str, spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.train_images);
    let mut masks = Vec::with_capacity(spec.train_images);
    for _ in 0..spec.train_images {
        let phase = Phase::draw(rng);
        let (canvas, _) = render(spec, &phase, rng);
        images.push(to_image(canvas));
        masks.push(regions(spec, &phase));
    }
    let hw = spec.image_hw;
    let mut test = Vec::with_capacity(spec.test_normal + spec.test_anomalous);
    for i in 0..spec.test_normal + spec.test_anomalous {
        let phase = Phase::draw(rng);
        let (mut canvas, _) = render(spec, &phase, rng);
        let anomalous = i >= spec.test_normal;
        let mask = if anomalous {
            let kind = spec.defects[(i - spec.test_normal) % spec.defects.len()];
            inject(spec, &mut canvas, kind, &phase, rng)
        } else {
            Mask::empty(hw, hw)
        };
        test.push(TestSample { image: to_image(canvas), anomalous, mask });
    }
    let train = TaskDataset::new(name, images, masks).map_err(|e| PipelineError::in_task(name, e))?;
    Ok(SyntheticTask { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticTaskSpec { train_images: 3, test_normal: 2, test_anomalous: 3, ..SyntheticTaskSpec::new(TextureFamily::Rings) };
        let a = gen_synthetic("rings", &spec, &mut Rng::new(9)).unwrap();
        let b = gen_synthetic("rings", &spec, &mut Rng::new(9)).unwrap();
        assert_eq!(a.train.images, b.train.images);
        for (x, y) in a.test.iter().zip(&b.test) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn anomalous_masks_nonempty() {
        for family in TextureFamily::ALL {
            let spec = SyntheticTaskSpec { train_images: 1, test_normal: 1, test_anomalous: 6, ..SyntheticTaskSpec::new(family) };
            let t = gen_synthetic(family.name(), &spec, &mut Rng::new(1)).unwrap();
            for s in &t.test {
                assert_eq!(s.anomalous, s.mask.count() > 0);
            }
        }
    }

    #[test]
    fn area_fraction_validated() {
        let mut spec = SyntheticTaskSpec::new(TextureFamily::Dots);
        spec.defect_area = 0.6;
        assert!(spec.validate().is_err());
        spec.defect_area = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn mask_resize_nearest() {
        let m = Mask { height: 2, width: 2, values: vec![true, false, false, true] };
        let r = m.resize(4, 4);
        assert_eq!(r.count(), 8);
        assert!(r.values[0] && r.values[5] && !r.values[2]);
    }
}
