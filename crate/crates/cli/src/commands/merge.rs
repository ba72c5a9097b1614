use std::path::PathBuf;

use clap::Args;
use lorafuse_core::io::write_json_atomic;
use lorafuse_core::merge::{delta_discrepancy, merge, validate_compatibility, MergeSpec, MergeStrategy};
use lorafuse_core::LoraAdapter;
use serde::{Deserialize, Serialize};

use crate::config::{echo, require, resolve};
use crate::exit::{config_error, exit, VERIFY_FAILED};

pub const MERGED_FILE: &str = "adapter.ltns";

fn load_all(paths: &[PathBuf]) -> anyhow::Result<Vec<LoraAdapter>> {
    if paths.is_empty() {
        return Err(config_error("at least one --adapter is required").into());
    }
    Ok(paths.iter().map(LoraAdapter::load).collect::<Result<_, _>>()?)
}

fn weights_for(weights: &Option<Vec<f64>>, n: usize) -> Vec<f64> {
    weights.clone().unwrap_or_else(|| vec![1.0; n])
}

#[derive(Args, Debug, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Adapter container; repeat for each input.
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    /// Per-adapter weights, comma separated (default all 1).
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// `concat` (exact) or `linear`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Name stored in the merged adapter (default: input names joined by `+`).
    #[arg(long)]
    pub task_name: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub adapters: Vec<PathBuf>,
    pub weights: Option<Vec<f64>>,
    pub strategy: MergeStrategy,
    pub task_name: Option<String>,
    pub out: Option<PathBuf>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            adapters: Vec::new(),
            weights: None,
            strategy: MergeStrategy::Concat,
            task_name: None,
            out: None,
        }
    }
}

pub fn run_merge(args: MergeArgs) -> anyhow::Result<()> {
    let cfg: MergeConfig = resolve("merge", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    echo(&cfg, Some(&out))?;
    let adapters = load_all(&cfg.adapters)?;
    let refs: Vec<&LoraAdapter> = adapters.iter().collect();
    println!("compatibility:\n{}", validate_compatibility(&refs));
    let spec = MergeSpec::new(refs, cfg.strategy).with_weights(weights_for(&cfg.weights, adapters.len()));
    let mut merged = merge(&spec)?;
    if let Some(name) = &cfg.task_name {
        merged.task_name = name.clone();
    }
    let path = out.join(MERGED_FILE);
    merged.save(&path)?;
    println!("strategy: {}", cfg.strategy);
    println!("task: {}", merged.task_name);
    println!("rank: {}", merged.rank());
    println!("alpha: {}", merged.config.alpha);
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Merged adapter to check.
    #[arg(long)]
    pub merged: Option<PathBuf>,
    /// Input adapters, in merge order.
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    /// Largest accepted relative discrepancy per entry.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Optional directory for verify.json and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub merged: Option<PathBuf>,
    pub adapters: Vec<PathBuf>,
    pub weights: Option<Vec<f64>>,
    pub tolerance: f64,
    pub out: Option<PathBuf>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            merged: None,
            adapters: Vec::new(),
            weights: None,
            tolerance: 1e-6,
            out: None,
        }
    }
}

pub fn run_verify(args: VerifyArgs) -> anyhow::Result<()> {
    let cfg: VerifyConfig = resolve("verify", args.config.as_deref(), &args)?;
    echo(&cfg, cfg.out.as_ref())?;
    let merged = LoraAdapter::load(require(&cfg.merged, "merged")?)?;
    let adapters = load_all(&cfg.adapters)?;
    let refs: Vec<&LoraAdapter> = adapters.iter().collect();
    let weights = weights_for(&cfg.weights, adapters.len());
    if weights.len() != adapters.len() {
        return Err(config_error(format!("{} weights for {} adapters", weights.len(), adapters.len())).into());
    }
    let d = delta_discrepancy(&merged, &refs, &weights)?;
    println!(
        "max delta discrepancy: abs {:.3e}, rel {:.3e} over {} entries",
        d.max_abs, d.max_rel, d.entries
    );
    if let Some(dir) = &cfg.out {
        write_json_atomic(dir.join("verify.json"), &d)?;
    }
    if d.max_rel > cfg.tolerance || d.max_rel.is_nan() {
        return Err(exit(
            VERIFY_FAILED,
            format!("discrepancy {:.3e} exceeds tolerance {:.1e}", d.max_rel, cfg.tolerance),
        )
        .into());
    }
    println!("ok: merged deltas match the weighted sum within {:.1e}", cfg.tolerance);
    Ok(())
}
