//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ucad_core::fusion::Detector;
use ucad_core::memory::MemoryBank;

use crate::config::RunConfig;
use crate::data::{load_tasks, write_pixel_tasks, TaskData};
use crate::error::{PipelineError, Result};
use crate::features::{ingest_features, write_features};
use crate::pnm::{export_map, read_image};
use crate::run::{adapt_one, backbone_for, evaluate_bank, run_sequence};

#[derive(Debug, Parser)]
#[command(name = "ucad", version, about = "Continual anomaly detection with a per-task prompt memory")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Weight of the visual branch in the fused map.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Backbone layer (1-based) feeding scoring and the feature bank.
    #[arg(long, global = true)]
    pub tap_score_layer: Option<usize>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic tasks as a pixel-image dataset.
    GenSynthetic,
    /// Adapt one configured task and append it to a bank file.
    Adapt {
        #[arg(long)]
        task: String,
        /// Bank to extend; created when missing. Written back unless --out is given.
        #[arg(long)]
        bank: PathBuf,
    },
    /// Score one image (PGM/PPM) or every grid of a feature file.
    Infer {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Adapt all configured tasks in order, evaluating after each.
    RunSequence,
    /// Evaluate a saved bank on the configured tasks it contains.
    Eval {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Summarize a bank file as a table.
    ExportBank {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Validate a feature file and copy it into a feature-files data directory.
    ImportFeatures {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum)]
        split: Split,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

impl GlobalArgs {
    pub fn load_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override `{kv}` is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(a) = self.alpha {
            cfg.set("alpha", &a.to_string())?;
        }
        if let Some(t) = self.tap_score_layer {
            cfg.set("tap_score_layer", &t.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_bank(path: &Path) -> Result<MemoryBank<f64>> {
    MemoryBank::load(path).map_err(|e| match e {
        ucad_core::Error::Io(io) => PipelineError::io(path, io),
        other => PipelineError::Core(other),
    })
}

fn save_bank(path: &Path, bank: &MemoryBank<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::write(path, bank.to_bytes()).map_err(|e| PipelineError::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

/// Runs a parsed command line; returns what to print on stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = cli.global.load_config()?;
    match &cli.command {
        Command::GenSynthetic => gen_synthetic(&cfg),
        Command::Adapt { task, bank } => adapt(&cfg, task, bank, cli.global.out.as_deref()),
        Command::Infer { bank, input } => infer(&cfg, bank, input),
        Command::RunSequence => {
            let r = run_sequence(&cfg)?;
            r.write_outputs(&cfg.out_dir)?;
            Ok(format!("{}wrote {}\n", r.results_table(), cfg.out_dir.display()))
        }
        Command::Eval { bank } => eval(&cfg, bank),
        Command::ExportBank { bank } => {
            let table = bank_table(&load_bank(bank)?);
            match &cli.global.out {
                Some(p) => {
                    std::fs::write(p, &table).map_err(|e| PipelineError::io(p, e))?;
                    Ok(format!("wrote {}\n", p.display()))
                }
                None => Ok(table),
            }
        }
        Command::ImportFeatures { input, task, split } => import_features(&cfg, input, task, *split),
    }
}

fn gen_synthetic(cfg: &RunConfig) -> Result<String> {
    let synthetic = RunConfig { mode: crate::config::DataMode::Synthetic, ..cfg.clone() };
    let tasks = load_tasks(&synthetic)?;
    mkdir(&cfg.out_dir)?;
    write_pixel_tasks(&cfg.out_dir, &tasks)?;
    Ok(format!("wrote {} tasks to {}\n", tasks.len(), cfg.out_dir.display()))
}

fn find_task(tasks: Vec<TaskData>, name: &str) -> Result<TaskData> {
    tasks
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| PipelineError::Config(format!("task `{name}` is not in the configured task list")))
}

fn adapt(cfg: &RunConfig, task: &str, bank_path: &Path, out: Option<&Path>) -> Result<String> {
    let one = RunConfig { tasks: vec![task.to_string()], ..cfg.clone() };
    let data = find_task(load_tasks(&one)?, task)?;
    let mut bank = if bank_path.exists() { load_bank(bank_path)? } else { MemoryBank::new() };
    let mut backbone = backbone_for(cfg, &bank)?;
    let report = adapt_one(cfg, &data, &mut bank, &mut backbone)?;
    let target = out.unwrap_or(bank_path);
    save_bank(target, &bank)?;
    let mut s = String::from("epoch\tloss_t\tloss_v\tb_v\tb_t\n");
    for line in &report.log {
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s, "task {task} stored at index {} in {}", report.task_index, target.display());
    Ok(s)
}

fn infer(cfg: &RunConfig, bank_path: &Path, input: &Path) -> Result<String> {
    let bank = load_bank(bank_path)?;
    let backbone = backbone_for(cfg, &bank)?;
    let det = Detector::new(&backbone, &bank, cfg.alpha)?;
    mkdir(&cfg.out_dir)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let mut s = String::from("item\ttask\ttask_similarity\timage_score\n");
    let is_features = input.extension().and_then(|e| e.to_str()) == Some("cadf");
    let outputs = if is_features {
        let file = ingest_features(input).map_err(|e| PipelineError::features(input, e))?;
        file.grids
            .iter()
            .enumerate()
            .map(|(i, g)| Ok((format!("{stem}_{i:03}"), det.infer_features(g)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![(stem, det.infer_image(&read_image(input)?)?)]
    };
    for (name, out) in outputs {
        export_map(&cfg.out_dir, &name, &out.map)?;
        let _ = writeln!(
            s,
            "{name}\t{}\t{:.6}\t{:.6}",
            bank.tasks()[out.task].task_name,
            out.task_similarity,
            out.image_score
        );
    }
    Ok(s)
}

fn eval(cfg: &RunConfig, bank_path: &Path) -> Result<String> {
    let bank = load_bank(bank_path)?;
    let names: Vec<String> = cfg.tasks.iter().filter(|t| bank.contains(t)).cloned().collect();
    if names.is_empty() {
        return Err(PipelineError::Config("none of the configured tasks is in the bank".into()));
    }
    let sub = RunConfig { tasks: names.clone(), ..cfg.clone() };
    let tasks = load_tasks(&sub)?;
    let evals = evaluate_bank(cfg, &bank, &tasks, cfg.alpha, Default::default())?;
    let mut s = String::from("task\timage_auroc\tpixel_aupr\ttask_id\n");
    for (name, e) in names.iter().zip(&evals) {
        let _ = writeln!(s, "{name}\t{:.6}\t{:.6}\t{}/{}", e.image_auroc, e.pixel_aupr, e.identified, e.count);
    }
    let n = evals.len() as f64;
    let _ = writeln!(
        s,
        "average\t{:.6}\t{:.6}\t",
        evals.iter().map(|e| e.image_auroc).sum::<f64>() / n,
        evals.iter().map(|e| e.pixel_aupr).sum::<f64>() / n
    );
    Ok(s)
}

pub fn bank_table(bank: &MemoryBank<f64>) -> String {
    let mut s = String::from("index\ttask\tchannels\tkeys\tbank_rows\tprompt_layers\tk_v\tb_v\tk_t\tb_t\n");
    for (i, t) in bank.tasks().iter().enumerate() {
        let _ = writeln!(
            s,
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.task_name,
            t.channels(),
            t.keys.count(),
            t.feature_bank.count(),
            t.visual_prompt.n_layers(),
            t.calib_v.k,
            t.calib_v.b,
            t.calib_t.k,
            t.calib_t.b
        );
    }
    s
}

fn import_features(cfg: &RunConfig, input: &Path, task: &str, split: Split) -> Result<String> {
    let file = ingest_features(input).map_err(|e| PipelineError::features(input, e))?;
    if split == Split::Test && file.regions.is_none() {
        return Err(PipelineError::Data(format!("{}: test files need the region section marking defects", input.display())));
    }
    let dir = cfg.data_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    mkdir(&dir)?;
    let name = match split {
        Split::Train => format!("{task}.train.cadf"),
        Split::Test => format!("{task}.test.cadf"),
    };
    let target = dir.join(name);
    write_features(&target, &file).map_err(|e| PipelineError::features(&target, e))?;
    let dims = file.grids.first().map_or((0, 0, 0), |g| (g.grid_h(), g.grid_w(), g.channels()));
    Ok(format!("imported {} grids of {}x{}x{} into {}\n", file.grids.len(), dims.0, dims.1, dims.2, target.display()))
}
