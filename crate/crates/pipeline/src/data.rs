//! Task streams for the three data modes.

use std::path::{Path, PathBuf};

use ucad_core::rng::Rng;
use ucad_core::tensor::{FeatureGrid, Image};
use ucad_core::tuning::{FeatureDataset, RegionMask, TaskDataset};

use crate::config::{DataMode, RunConfig};
use crate::error::{PipelineError, Result};
use crate::features::{ingest_features, FeatureFile};
use crate::pnm::{read_image, read_mask, write_image, mask_image};
use crate::synthetic::{gen_synthetic, Mask};

#[derive(Debug, Clone)]
pub enum TestInput {
    Image(Image<f64>),
    Features(FeatureGrid<f64>),
}

#[derive(Debug, Clone)]
pub struct TestItem {
    pub input: TestInput,
    pub anomalous: bool,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub enum TrainData {
    Images(TaskDataset<f64>),
    Features(FeatureDataset<f64>),
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub name: String,
    pub train: TrainData,
    pub test: Vec<TestItem>,
}

/// Region labels from quantized mean patch intensity.
pub fn intensity_regions(image: &Image<f64>, grid_side: usize, levels: u16) -> Result<RegionMask> {
    let (h, w) = (image.height(), image.width());
    if grid_side == 0 || h % grid_side != 0 || w % grid_side != 0 || levels == 0 {
        return Err(PipelineError::Data(format!("{h}x{w} image does not tile into a {grid_side} grid")));
    }
    let (ph, pw) = (h / grid_side, w / grid_side);
    let mut means = Vec::with_capacity(grid_side * grid_side);
    for r in 0..grid_side {
        for c in 0..grid_side {
            let mut s = 0.0;
            for ch in 0..image.channels() {
                for y in r * ph..(r + 1) * ph {
                    for x in c * pw..(c + 1) * pw {
                        s += image.get(ch, y, x);
                    }
                }
            }
            means.push(s / (ph * pw * image.channels()) as f64);
        }
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let labels = means
        .iter()
        .map(|m| (((m - lo) / span * f64::from(levels)).floor() as u16).min(levels - 1))
        .collect();
    Ok(RegionMask::new(grid_side, grid_side, labels)?)
}

/// Synthetic stream: one texture family per task, seeded by run seed and name.
pub fn synthetic_tasks(cfg: &RunConfig) -> Result<Vec<TaskData>> {
    let root = Rng::new(cfg.seed).fork_named("synthetic");
    cfg.tasks
        .iter()
        .map(|name| {
            let spec = cfg.synthetic_spec(name)?;
            let t = gen_synthetic(name, &spec, &mut root.fork_named(name))?;
            let test = t
                .test
                .into_iter()
                .map(|s| TestItem { input: TestInput::Image(s.image), anomalous: s.anomalous, mask: s.mask })
                .collect();
            Ok(TaskData { name: name.clone(), train: TrainData::Images(t.train), test })
        })
        .collect()
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Directory layout: `<task>/train/*.ppm`, `<task>/test/<kind>/*.ppm` with
/// `good` for normals, and `<task>/ground_truth/<kind>/<stem>_mask.pgm`.
pub fn pixel_tasks(cfg: &RunConfig) -> Result<Vec<TaskData>> {
    let root = cfg.data_dir.as_ref().ok_or_else(|| PipelineError::Config("pixel-images mode needs data_dir".into()))?;
    let side = cfg.backbone.grid_side();
    cfg.tasks
        .iter()
        .map(|name| {
            let base = root.join(name);
            let images = sorted_files(&base.join("train"))?.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
            let regions = images
                .iter()
                .map(|im| intensity_regions(im, side, cfg.synthetic.region_levels))
                .collect::<Result<Vec<_>>>()?;
            let train = TaskDataset::new(name.clone(), images, regions).map_err(|e| PipelineError::in_task(name, e))?;
            let mut test = Vec::new();
            for kind_dir in sorted_dirs(&base.join("test"))? {
                let kind = kind_dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                for p in sorted_files(&kind_dir)? {
                    let image = read_image(&p)?;
                    let (h, w) = (image.height(), image.width());
                    let (anomalous, mask) = if kind == "good" {
                        (false, Mask::empty(h, w))
                    } else {
                        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                        (true, read_mask(&base.join("ground_truth").join(&kind).join(format!("{stem}_mask.pgm")))?)
                    };
                    test.push(TestItem { input: TestInput::Image(image), anomalous, mask });
                }
            }
            Ok(TaskData { name: name.clone(), train: TrainData::Images(train), test })
        })
        .collect()
}

fn read_cadf(path: &Path) -> Result<FeatureFile> {
    ingest_features(path).map_err(|e| PipelineError::features(path, e))
}

/// `<task>.train.cadf`, and `<task>.test.cadf` whose region section marks
/// defective patches with nonzero labels.
pub fn feature_tasks(cfg: &RunConfig) -> Result<Vec<TaskData>> {
    let root = cfg.data_dir.as_ref().ok_or_else(|| PipelineError::Config("feature-files mode needs data_dir".into()))?;
    cfg.tasks
        .iter()
        .map(|name| {
            let train = read_cadf(&root.join(format!("{name}.train.cadf")))?;
            let test_path = root.join(format!("{name}.test.cadf"));
            let test = read_cadf(&test_path)?;
            let defects = test
                .regions
                .ok_or_else(|| PipelineError::Data(format!("{} lacks the defect region section", test_path.display())))?;
            let items = test
                .grids
                .into_iter()
                .zip(defects)
                .map(|(g, r)| {
                    let values: Vec<bool> = r.labels().iter().map(|&l| l != 0).collect();
                    let anomalous = values.iter().any(|&v| v);
                    TestItem { input: TestInput::Features(g), anomalous, mask: Mask { height: r.height(), width: r.width(), values } }
                })
                .collect();
            Ok(TaskData {
                name: name.clone(),
                train: TrainData::Features(FeatureDataset { task_name: name.clone(), features: train.grids }),
                test: items,
            })
        })
        .collect()
}

pub fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskData>> {
    match cfg.mode {
        DataMode::Synthetic => synthetic_tasks(cfg),
        DataMode::PixelImages => pixel_tasks(cfg),
        DataMode::FeatureFiles => feature_tasks(cfg),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| PipelineError::io(p, e))
}

/// Writes image tasks in the layout [`pixel_tasks`] reads. Pixels are
/// quantized to 8 bits.
pub fn write_pixel_tasks(dir: &Path, tasks: &[TaskData]) -> Result<()> {
    for t in tasks {
        let TrainData::Images(train) = &t.train else {
            return Err(PipelineError::Data(format!("task {} holds features, not images", t.name)));
        };
        let base = dir.join(&t.name);
        let ext = |im: &Image<f64>| if im.channels() == 1 { "pgm" } else { "ppm" };
        mkdir(&base.join("train"))?;
        for (i, im) in train.images.iter().enumerate() {
            write_image(&base.join("train").join(format!("{i:03}.{}", ext(im))), im)?;
        }
        for dir_name in ["test/good", "test/defect", "ground_truth/defect"] {
            mkdir(&base.join(dir_name))?;
        }
        for (i, item) in t.test.iter().enumerate() {
            let TestInput::Image(im) = &item.input else { continue };
            let kind = if item.anomalous { "defect" } else { "good" };
            write_image(&base.join("test").join(kind).join(format!("{i:03}.{}", ext(im))), im)?;
            if item.anomalous {
                write_image(&base.join("ground_truth/defect").join(format!("{i:03}_mask.pgm")), &mask_image(&item.mask))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regions_follow_intensity() {
        let mut data = vec![0.0; 16];
        for y in 0..4 {
            for x in 2..4 {
                data[y * 4 + x] = 1.0;
            }
        }
        let im = Image::new(1, 4, 4, data).unwrap();
        let r = intensity_regions(&im, 2, 3).unwrap();
        assert_eq!(r.labels(), &[0, 2, 0, 2]);
    }

    #[test]
    fn pixel_layout_round_trip() {
        let cfg = RunConfig {
            tasks: vec!["dots".into()],
            synthetic: crate::config::SyntheticSettings { train_images: 2, test_normal: 1, test_anomalous: 2, ..Default::default() },
            ..RunConfig::default()
        };
        let tasks = synthetic_tasks(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_pixel_tasks(dir.path(), &tasks).unwrap();
        let back = pixel_tasks(&RunConfig { mode: DataMode::PixelImages, data_dir: Some(dir.path().into()), ..cfg }).unwrap();
        assert_eq!(back[0].test.len(), 3);
        assert_eq!(back[0].test.iter().filter(|t| t.anomalous).count(), 2);
        let TrainData::Images(d) = &back[0].train else { panic!("images expected") };
        assert_eq!(d.images.len(), 2);
        for (a, b) in tasks[0].test.iter().zip(back[0].test.iter().filter(|t| !t.anomalous).chain(back[0].test.iter().filter(|t| t.anomalous))) {
            assert_eq!(a.mask, b.mask);
        }
    }
}
