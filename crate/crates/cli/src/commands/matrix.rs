use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use lorafuse_core::backbone::BackboneWeights;
use lorafuse_core::data::{Split, TaskDataset};
use lorafuse_core::evaluation::{run_grid, EyeIndices, GridInputs, GridMode, TaskArtifacts, DEFAULT_LEFT_EYE, DEFAULT_RIGHT_EYE};
use lorafuse_core::io::{write_atomic, write_json_atomic};
use lorafuse_core::multitask::TaskHead;
use lorafuse_core::{Error, LoraAdapter};
use serde::{Deserialize, Serialize};

use super::train::{image_spec, ImageArgs, ADAPTER_FILE, HEAD_FILE};
use crate::config::{echo, require, resolve};
use crate::exit::config_error;

#[derive(Args, Debug, Serialize)]
pub struct MatrixArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// `single`, `pairs` or `triples`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Directory whose subdirectories are `train` outputs.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
    /// A single `train` output directory; repeatable.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Dataset manifest; repeat for each task.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Ranks to include, comma separated (default: every rank found).
    #[arg(long, value_delimiter = ',')]
    pub ranks: Vec<usize>,
    /// The two fixed adapters of triples mode, comma separated.
    #[arg(long = "base", value_delimiter = ',')]
    pub bases: Vec<String>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub left_eye: Option<usize>,
    #[arg(long)]
    pub right_eye: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub image: ImageArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub mode: String,
    pub backbone: Option<PathBuf>,
    pub runs_dir: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    pub manifests: Vec<PathBuf>,
    pub ranks: Option<Vec<usize>>,
    pub bases: Option<Vec<String>>,
    pub split: Split,
    pub batch_size: usize,
    pub left_eye: usize,
    pub right_eye: usize,
    pub image_mean: Option<Vec<f32>>,
    pub image_std: Option<Vec<f32>>,
    pub out: Option<PathBuf>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            mode: "pairs".into(),
            backbone: None,
            runs_dir: None,
            runs: Vec::new(),
            manifests: Vec::new(),
            ranks: None,
            bases: None,
            split: Split::Test,
            batch_size: 32,
            left_eye: DEFAULT_LEFT_EYE,
            right_eye: DEFAULT_RIGHT_EYE,
            image_mean: None,
            image_std: None,
            out: None,
        }
    }
}

fn grid_mode(cfg: &MatrixConfig) -> anyhow::Result<GridMode> {
    let bases = cfg.bases.clone().unwrap_or_default();
    match cfg.mode.as_str() {
        "single" | "pairs" if !bases.is_empty() => Err(config_error("--base only applies to triples mode").into()),
        "single" => Ok(GridMode::Single),
        "pairs" => Ok(GridMode::Pairs),
        "triples" => match <[String; 2]>::try_from(bases) {
            Ok(bases) => Ok(GridMode::Triples { bases }),
            Err(_) => Err(config_error("triples mode needs exactly two --base adapters").into()),
        },
        other => Err(config_error(format!("unknown grid mode `{other}`")).into()),
    }
}

/// A `train` output: its head and, unless head-only, its adapter.
struct Run {
    dir: PathBuf,
    head: TaskHead,
    adapter: Option<LoraAdapter>,
}

fn load_run(dir: &Path) -> anyhow::Result<Run> {
    let head = TaskHead::load(dir.join(HEAD_FILE))?;
    let adapter_path = dir.join(ADAPTER_FILE);
    let adapter = adapter_path.exists().then(|| LoraAdapter::load(&adapter_path)).transpose()?;
    Ok(Run {
        dir: dir.to_owned(),
        head,
        adapter,
    })
}

fn run_dirs(cfg: &MatrixConfig) -> anyhow::Result<Vec<PathBuf>> {
    let mut dirs = cfg.runs.clone();
    if let Some(root) = &cfg.runs_dir {
        let entries = std::fs::read_dir(root).map_err(|e| config_error(format!("{}: {e}", root.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(HEAD_FILE).is_file())
            .collect();
        found.sort();
        dirs.extend(found);
    }
    if dirs.is_empty() {
        return Err(config_error("no runs given (use --runs-dir or --run)").into());
    }
    Ok(dirs)
}

pub fn run(args: MatrixArgs) -> anyhow::Result<()> {
    let cfg: MatrixConfig = resolve("matrix", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    let mode = grid_mode(&cfg)?;
    echo(&cfg, Some(&out))?;
    let backbone = Arc::new(BackboneWeights::load(require(&cfg.backbone, "backbone")?)?);
    let spec = image_spec(&backbone, &cfg.image_mean, &cfg.image_std)?;

    let mut tasks: BTreeMap<String, (BTreeMap<usize, (LoraAdapter, TaskHead)>, Option<TaskHead>)> = BTreeMap::new();
    for dir in run_dirs(&cfg)? {
        let Run { dir, head, adapter } = load_run(&dir)?;
        let entry = tasks.entry(head.task_name.clone()).or_default();
        match adapter {
            Some(a) => {
                let rank = a.rank();
                if entry.0.insert(rank, (a, head)).is_some() {
                    return Err(config_error(format!("second rank-{rank} run for the same task in {}", dir.display())).into());
                }
            }
            None => {
                if entry.1.replace(head).is_some() {
                    return Err(config_error(format!("second head-only run for the same task in {}", dir.display())).into());
                }
            }
        }
    }
    let mut datasets = BTreeMap::new();
    for path in &cfg.manifests {
        let ds = TaskDataset::load(path, &spec)?;
        datasets.insert(ds.task_name.clone(), Arc::new(ds));
    }
    let mut artifacts = BTreeMap::new();
    for (task, (adapters, head_only)) in tasks {
        let dataset = datasets
            .get(&task)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no --manifest for task `{task}`")))?;
        artifacts.insert(
            task,
            TaskArtifacts {
                dataset,
                adapters,
                head_only,
            },
        );
    }
    let ranks = match &cfg.ranks {
        Some(r) => r.clone(),
        None => {
            let mut all: Vec<usize> = artifacts.values().flat_map(|a| a.adapters.keys().copied()).collect();
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    let inputs = GridInputs {
        backbone,
        tasks: artifacts,
        ranks,
        split: cfg.split,
        batch_size: cfg.batch_size,
        eyes: EyeIndices {
            left: cfg.left_eye,
            right: cfg.right_eye,
        },
    };
    let report = run_grid(&mode, &inputs)?;
    let text = report.render();
    println!("{text}");
    write_json_atomic(out.join("grid.json"), &report.to_json())?;
    write_atomic(out.join("grid.txt"), text.as_bytes())?;
    println!("{} rows; wrote {}", report.rows.len(), out.display());
    Ok(())
}
