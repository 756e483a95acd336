//! Sequential adaptation with evaluation of every seen task after each stage.

use std::fmt::Write as _;
use std::path::Path;

use ucad_core::backbone::Backbone;
use ucad_core::fusion::{Detector, Inference, Normalization};
use ucad_core::memory::MemoryBank;
use ucad_core::metrics::{aupr, auroc, forgetting_measure, EvalMatrix};
use ucad_core::rng::fnv1a;
use ucad_core::tensor::ScoreMap;
use ucad_core::tuning::{adapt_task, adapt_task_features, AdaptReport};

use crate::config::{DataMode, RunConfig};
use crate::data::{load_tasks, TaskData, TestInput, TrainData};
use crate::error::{PipelineError, Result};

/// Metrics of one task's test set under one bank state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub image_auroc: f64,
    pub pixel_aupr: f64,
    /// Test images whose identified task is this task.
    pub identified: usize,
    pub count: usize,
    pub image_scores: Vec<f64>,
}

/// Backbone for a config with every bank task registered in its vocabulary.
pub fn backbone_for(cfg: &RunConfig, bank: &MemoryBank<f64>) -> Result<Backbone<f64>> {
    let mut bb = Backbone::new(cfg.backbone.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
    for t in bank.tasks() {
        bb.register_class(&t.task_name)?;
    }
    Ok(bb)
}

fn infer(detector: &Detector<'_, f64>, input: &TestInput, oracle: Option<usize>) -> ucad_core::Result<Inference<f64>> {
    match (input, oracle) {
        (TestInput::Image(im), None) => detector.infer_image(im),
        (TestInput::Image(im), Some(t)) => detector.infer_with_task(im, t, 1.0),
        (TestInput::Features(f), None) => detector.infer_features(f),
        (TestInput::Features(f), Some(t)) => detector.infer_features_with_task(f, t),
    }
}

/// Scores every test image of `task`; `task_index` is its bank position.
pub fn evaluate_task(detector: &Detector<'_, f64>, task: &TaskData, task_index: usize) -> Result<Evaluation> {
    let wrap = |e| PipelineError::in_task(&task.name, e);
    let mut scores = Vec::with_capacity(task.test.len());
    let mut labels = Vec::with_capacity(task.test.len());
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    let mut identified = 0;
    for item in &task.test {
        let out = infer(detector, &item.input, None).map_err(wrap)?;
        identified += usize::from(out.task == task_index);
        scores.push(out.image_score);
        labels.push(item.anomalous);
        let mask = item.mask.resize(out.map.height(), out.map.width());
        pixel_scores.extend_from_slice(out.map.values());
        pixel_labels.extend_from_slice(&mask.values);
    }
    Ok(Evaluation {
        image_auroc: auroc(&scores, &labels).map_err(wrap)?,
        pixel_aupr: aupr(&pixel_scores, &pixel_labels).map_err(wrap)?,
        identified,
        count: task.test.len(),
        image_scores: scores,
    })
}

/// Maps of every test image of `task` under a forced task identity.
pub fn oracle_maps(detector: &Detector<'_, f64>, task: &TaskData, task_index: usize) -> Result<Vec<ScoreMap<f64>>> {
    task.test
        .iter()
        .map(|item| Ok(infer(detector, &item.input, Some(task_index)).map_err(|e| PipelineError::in_task(&task.name, e))?.map))
        .collect()
}

pub fn maps_digest(maps: &[ScoreMap<f64>]) -> u64 {
    let bytes: Vec<u8> = maps.iter().flat_map(|m| m.values().iter().flat_map(|v| v.to_bits().to_le_bytes())).collect();
    fnv1a(&bytes)
}

/// Evaluates all tasks against a finished bank with a given fusion setting.
pub fn evaluate_bank(
    cfg: &RunConfig,
    bank: &MemoryBank<f64>,
    tasks: &[TaskData],
    alpha: f64,
    normalization: Normalization,
) -> Result<Vec<Evaluation>> {
    let bb = backbone_for(cfg, bank)?;
    let det = Detector::new(&bb, bank, alpha)?.with_normalization(normalization);
    tasks
        .iter()
        .map(|t| {
            let idx = bank.index_of(&t.name).ok_or_else(|| PipelineError::Data(format!("task {} not in bank", t.name)))?;
            evaluate_task(&det, t, idx)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub mode: DataMode,
    pub seed: u64,
    pub task_names: Vec<String>,
    pub image_auroc: EvalMatrix<f64>,
    pub pixel_aupr: EvalMatrix<f64>,
    /// Final-stage evaluation of every task.
    pub final_evaluations: Vec<Evaluation>,
    pub bank: MemoryBank<f64>,
    /// Serialized bytes of each task memory right after it was inserted.
    pub task_bytes_at_insert: Vec<Vec<u8>>,
    /// Per stage, digest of the first task's maps under forced identity.
    pub first_task_digests: Vec<u64>,
    pub reports: Vec<AdaptReport>,
    pub weights_checksum: (u64, u64),
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"))
}

impl SequenceResult {
    pub fn stages(&self) -> usize {
        self.task_names.len()
    }

    /// Fraction of all final-stage test images routed to their own task.
    pub fn task_id_accuracy(&self) -> f64 {
        let hit: usize = self.final_evaluations.iter().map(|e| e.identified).sum();
        let all: usize = self.final_evaluations.iter().map(|e| e.count).sum();
        hit as f64 / all.max(1) as f64
    }

    pub fn forgetting(&self) -> (Option<f64>, Option<f64>) {
        if self.stages() < 2 {
            return (None, None);
        }
        (forgetting_measure(&self.image_auroc).ok(), forgetting_measure(&self.pixel_aupr).ok())
    }

    /// Final-stage metrics per task plus averages and forgetting.
    pub fn results_table(&self) -> String {
        let mut s = String::from("task\timage_auroc\tpixel_aupr\n");
        let k = self.stages();
        for (j, name) in self.task_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{name}\t{}\t{}",
                fmt_metric(self.image_auroc.get(k - 1, j)),
                fmt_metric(self.pixel_aupr.get(k - 1, j))
            );
        }
        let avg = |m: &EvalMatrix<f64>| m.last_row().ok().map(|r| r.iter().sum::<f64>() / r.len() as f64);
        let _ = writeln!(s, "average\t{}\t{}", fmt_metric(avg(&self.image_auroc)), fmt_metric(avg(&self.pixel_aupr)));
        let (fa, fp) = self.forgetting();
        let _ = writeln!(s, "avg_fm\t{}\t{}", fmt_metric(fa), fmt_metric(fp));
        s
    }

    pub fn matrix_table(&self, m: &EvalMatrix<f64>) -> String {
        let mut s = format!("stage\t{}\n", self.task_names.join("\t"));
        for (l, name) in self.task_names.iter().enumerate() {
            let row: Vec<String> = (0..self.stages()).map(|j| m.get(l, j).map_or_else(String::new, |v| format!("{v:.6}"))).collect();
            let _ = writeln!(s, "{name}\t{}", row.join("\t"));
        }
        s
    }

    pub fn training_log(&self) -> String {
        let mut s = String::from("task\tepoch\tloss_t\tloss_v\tb_v\tb_t\n");
        for (name, r) in self.task_names.iter().zip(&self.reports) {
            for line in &r.log {
                let _ = writeln!(s, "{name}\t{line}");
            }
        }
        s
    }

    pub fn metadata(&self) -> String {
        format!(
            "mode={}\nvisual_prompt_tuning={}\nseed={}\ntasks={}\ntask_id_accuracy={:.6}\nweights_checksum={:016x}\n",
            self.mode,
            if self.mode.tunes_visual_prompts() { "on" } else { "off" },
            self.seed,
            self.task_names.join(","),
            self.task_id_accuracy(),
            self.weights_checksum.1,
        )
    }

    /// Writes tables, logs, metadata and `bank.cmpb` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let files = [
            ("results.tsv", self.results_table()),
            ("image_auroc_matrix.tsv", self.matrix_table(&self.image_auroc)),
            ("pixel_aupr_matrix.tsv", self.matrix_table(&self.pixel_aupr)),
            ("training_log.tsv", self.training_log()),
            ("metadata.txt", self.metadata()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| PipelineError::io(&p, e))?;
        }
        let p = dir.join("bank.cmpb");
        std::fs::write(&p, self.bank.to_bytes()).map_err(|e| PipelineError::io(&p, e))
    }
}

/// Adapts one task into the bank.
pub fn adapt_one(cfg: &RunConfig, task: &TaskData, bank: &mut MemoryBank<f64>, backbone: &mut Backbone<f64>) -> Result<AdaptReport> {
    let r = match &task.train {
        TrainData::Images(d) => adapt_task(d, bank, &cfg.train, backbone),
        TrainData::Features(d) => adapt_task_features(d, bank, &cfg.train, backbone),
    };
    r.map_err(|e| PipelineError::in_task(&task.name, e))
}

/// Loads the configured stream and runs it.
pub fn run_sequence(cfg: &RunConfig) -> Result<SequenceResult> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    run_tasks(cfg, &tasks)
}

/// Adapts tasks in order; after each, evaluates every task seen so far.
pub fn run_tasks(cfg: &RunConfig, tasks: &[TaskData]) -> Result<SequenceResult> {
    let k = tasks.len();
    if k == 0 {
        return Err(PipelineError::Config("no tasks to run".into()));
    }
    let mut backbone = backbone_for(cfg, &MemoryBank::new())?;
    let before = backbone.weights().checksum();
    let mut bank = MemoryBank::new();
    let mut image_auroc = EvalMatrix::new(k);
    let mut pixel_aupr = EvalMatrix::new(k);
    let mut task_bytes_at_insert = Vec::with_capacity(k);
    let mut first_task_digests = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    let mut final_evaluations = Vec::new();
    for (stage, task) in tasks.iter().enumerate() {
        log::info!("stage {}/{k}: adapting {}", stage + 1, task.name);
        let report = adapt_one(cfg, task, &mut bank, &mut backbone)?;
        task_bytes_at_insert.push(bank.tasks()[report.task_index].to_bytes());
        reports.push(report);

        let det = Detector::new(&backbone, &bank, cfg.alpha)?;
        let mut evals = Vec::with_capacity(stage + 1);
        for (j, seen) in tasks[..=stage].iter().enumerate() {
            let e = evaluate_task(&det, seen, j)?;
            image_auroc.set(stage, j, e.image_auroc)?;
            pixel_aupr.set(stage, j, e.pixel_aupr)?;
            log::info!("  {}: auroc {:.4} aupr {:.4} id {}/{}", seen.name, e.image_auroc, e.pixel_aupr, e.identified, e.count);
            evals.push(e);
        }
        first_task_digests.push(maps_digest(&oracle_maps(&det, &tasks[0], 0)?));
        final_evaluations = evals;
    }
    let after = backbone.weights().checksum();
    Ok(SequenceResult {
        mode: cfg.mode,
        seed: cfg.seed,
        task_names: tasks.iter().map(|t| t.name.clone()).collect(),
        image_auroc,
        pixel_aupr,
        final_evaluations,
        bank,
        task_bytes_at_insert,
        first_task_digests,
        reports,
        weights_checksum: (before, after),
    })
}
