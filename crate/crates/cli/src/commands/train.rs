use std::path::PathBuf;

use clap::Args;
use lorafuse_core::backbone::BackboneWeights;
use lorafuse_core::data::{ImageSpec, TaskDataset};
use lorafuse_core::evaluation::EyeIndices;
use lorafuse_core::io::write_json_atomic;
use lorafuse_core::trainer::{train_task, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{echo, require, resolve};

pub const ADAPTER_FILE: &str = "adapter.ltns";
pub const HEAD_FILE: &str = "head.ltns";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

/// Image decoding options shared by every subcommand that reads manifests.
#[derive(Args, Debug, Default, Serialize)]
pub struct ImageArgs {
    /// Per-channel normalization mean, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub image_mean: Vec<f32>,
    /// Per-channel normalization std, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub image_std: Vec<f32>,
}

pub fn image_spec(backbone: &BackboneWeights, mean: &Option<Vec<f32>>, std: &Option<Vec<f32>>) -> anyhow::Result<ImageSpec> {
    let mut spec = ImageSpec::new(backbone.config.image_size, backbone.config.channels);
    if let Some(m) = mean {
        spec.mean = m.clone();
    }
    if let Some(s) = std {
        spec.std = s.clone();
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// JSONL dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Frozen backbone container.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// `lora` or `head-only`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// LoRA alpha; defaults to the rank.
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub left_eye: Option<usize>,
    #[arg(long)]
    pub right_eye: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub image: ImageArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCliConfig {
    pub manifest: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub mode: TrainMode,
    pub rank: usize,
    pub alpha: Option<f32>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub head_hidden: usize,
    pub left_eye: usize,
    pub right_eye: usize,
    pub image_mean: Option<Vec<f32>>,
    pub image_std: Option<Vec<f32>>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TrainCliConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            manifest: None,
            backbone: None,
            mode: t.mode,
            rank: t.rank,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            head_hidden: t.head_hidden,
            left_eye: t.eyes.left,
            right_eye: t.eyes.right,
            image_mean: None,
            image_std: None,
            seed: t.seed,
            out: None,
        }
    }
}

impl TrainCliConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            rank: self.rank,
            alpha: self.alpha,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            head_hidden: self.head_hidden,
            eyes: EyeIndices {
                left: self.left_eye,
                right: self.right_eye,
            },
        }
    }
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let cfg: TrainCliConfig = resolve("train", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    let manifest = require(&cfg.manifest, "manifest")?;
    let backbone_path = require(&cfg.backbone, "backbone")?;
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    echo(&cfg, Some(&out))?;

    let backbone = BackboneWeights::load(backbone_path)?;
    let spec = image_spec(&backbone, &cfg.image_mean, &cfg.image_std)?;
    let dataset = TaskDataset::load(manifest, &spec)?;
    println!(
        "task {}: {} train / {} val / {} test samples",
        dataset.task_name,
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );
    let outcome = train_task(&dataset, &backbone, &train_cfg)?;
    let report = &outcome.report;

    if let Some(adapter) = &outcome.adapter {
        adapter.save(out.join(ADAPTER_FILE))?;
    }
    outcome.head.save(out.join(HEAD_FILE))?;
    write_json_atomic(out.join(REPORT_FILE), report)?;
    write_json_atomic(out.join(TIMING_FILE), &json!({ "wall_time_secs": report.wall_time_secs }))?;

    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.6}  val {} {:.6}",
            e.epoch, e.train_loss, report.val_metric, e.val_metric
        );
    }
    println!("best epoch: {} ({} = {:.6})", report.best_epoch, report.val_metric, report.best_val_metric);
    for m in &report.test_metrics {
        println!("test {}: {:.6} (n = {})", m.metric, m.value, m.n);
    }
    println!(
        "trainable parameters: {} (adapter {}, head {})",
        report.trainable_params, report.adapter_params, report.head_params
    );
    println!("wrote {}", out.display());
    Ok(())
}
