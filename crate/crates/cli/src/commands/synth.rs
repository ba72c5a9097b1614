use std::path::PathBuf;

use clap::Args;
use lorafuse_core::data::{dissimilar_pair, generate_synthetic, similar_pair, Family, SyntheticSpec};
use serde::{Deserialize, Serialize};

use crate::config::{echo, require, resolve};
use crate::exit::config_error;

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// TOML config file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Pattern family: gratings, grating-frequency, blobs or landmarks.
    #[arg(long)]
    pub family: Option<String>,
    /// Generate a `similar` or `dissimilar` task pair instead of one task.
    #[arg(long)]
    pub pair: Option<String>,
    #[arg(long)]
    pub task_name: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub family: Option<String>,
    pub pair: Option<String>,
    pub task_name: Option<String>,
    pub classes: Option<usize>,
    pub samples: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            family: None,
            pair: None,
            task_name: None,
            classes: None,
            samples: 300,
            image_size: 16,
            noise: 0.0,
            seed: 0,
            out: None,
        }
    }
}

fn specs(cfg: &SynthConfig) -> anyhow::Result<Vec<SyntheticSpec>> {
    let mut specs = match (&cfg.family, &cfg.pair) {
        (Some(_), Some(_)) => return Err(config_error("give either --family or --pair, not both").into()),
        (None, None) => return Err(config_error("one of --family or --pair is required").into()),
        (Some(f), None) => {
            let family = Family::parse(f)?;
            let name = cfg.task_name.clone().unwrap_or_else(|| f.clone());
            vec![SyntheticSpec::new(name, family, cfg.samples, cfg.seed)]
        }
        (None, Some(p)) => {
            if cfg.task_name.is_some() {
                return Err(config_error("--task-name cannot be used with --pair").into());
            }
            match p.as_str() {
                "similar" => similar_pair(cfg.samples, cfg.seed).to_vec(),
                "dissimilar" => dissimilar_pair(cfg.samples, cfg.seed).to_vec(),
                other => return Err(config_error(format!("unknown pair kind `{other}`")).into()),
            }
        }
    };
    for s in &mut specs {
        s.image_size = cfg.image_size;
        s.noise = cfg.noise;
        if let Some(k) = cfg.classes {
            s.num_classes = k;
        }
    }
    Ok(specs)
}

pub fn run(args: SynthArgs) -> anyhow::Result<()> {
    let cfg: SynthConfig = resolve("synth", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    let specs = specs(&cfg)?;
    echo(&cfg, Some(&out))?;
    for spec in specs {
        let manifest = generate_synthetic(&spec)?;
        let path = out.join(format!("{}.jsonl", spec.task_name));
        manifest.write(&path)?;
        println!(
            "wrote {} ({} samples, {:?})",
            path.display(),
            manifest.records.len(),
            spec.family
        );
    }
    Ok(())
}
