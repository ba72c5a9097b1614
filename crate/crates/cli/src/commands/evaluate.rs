use std::path::PathBuf;

use clap::Args;
use lorafuse_core::data::{DatasetManifest, Split, TaskDataset};
use lorafuse_core::evaluation::{evaluate_task, EyeIndices, DEFAULT_LEFT_EYE, DEFAULT_RIGHT_EYE};
use lorafuse_core::io::write_json_atomic;
use lorafuse_core::multitask::Bundle;
use serde::{Deserialize, Serialize};

use super::train::{image_spec, ImageArgs};
use crate::config::{echo, require, resolve};
use crate::exit::{exit, TASK_MISMATCH};

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Bundle directory.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Task to score (default: the manifest's task).
    #[arg(long)]
    pub task: Option<String>,
    /// `train`, `val` or `test`.
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
pub struct EvaluateConfig {
    pub bundle: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub task: Option<String>,
    pub split: Split,
    pub batch_size: usize,
    pub left_eye: usize,
    pub right_eye: usize,
    pub image_mean: Option<Vec<f32>>,
    pub image_std: Option<Vec<f32>>,
    pub out: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            manifest: None,
            task: None,
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

pub fn run(args: EvaluateArgs) -> anyhow::Result<()> {
    let cfg: EvaluateConfig = resolve("evaluate", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    let bundle_dir = require(&cfg.bundle, "bundle")?;
    let manifest_path = require(&cfg.manifest, "manifest")?;
    echo(&cfg, Some(&out))?;

    let manifest = DatasetManifest::read(manifest_path)?;
    let task = cfg.task.clone().unwrap_or_else(|| manifest.task_name.clone());
    let model = Bundle::load(bundle_dir)?.into_model()?;
    let head = model.head(&task).map_err(|_| {
        let known: Vec<&String> = model.heads().keys().collect();
        exit(TASK_MISMATCH, format!("bundle has no head for task `{task}` (heads: {known:?})"))
    })?;
    if head.kind != manifest.kind {
        return Err(exit(
            TASK_MISMATCH,
            format!("head `{task}` predicts {:?} but the manifest holds {:?}", head.kind, manifest.kind),
        )
        .into());
    }
    let spec = image_spec(model.backbone(), &cfg.image_mean, &cfg.image_std)?;
    let base = manifest_path.parent();
    let dataset = TaskDataset::from_manifest(&manifest, base, &spec)?;
    let eyes = EyeIndices {
        left: cfg.left_eye,
        right: cfg.right_eye,
    };
    let results = evaluate_task(&model, &task, dataset.split(cfg.split), cfg.batch_size, eyes)?;

    let labels: Vec<&str> = results.iter().map(|r| r.metric.label()).collect();
    let values: Vec<String> = results
        .iter()
        .map(|r| format!("{:.3}", r.value * r.metric.display_scale()))
        .collect();
    let widths: Vec<usize> = labels.iter().zip(&values).map(|(l, v)| l.chars().count().max(v.len())).collect();
    let row = |cells: Vec<String>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{task} ({} split, n = {})", cfg.split, results[0].n);
    println!("{}", row(labels.iter().map(|s| s.to_string()).collect()));
    println!("{}", row(values));
    if results.iter().any(|r| r.metric.display_scale() != 1.0) {
        println!("(values shown ×100)");
    }
    write_json_atomic(out.join("metrics.json"), &results)?;
    Ok(())
}
