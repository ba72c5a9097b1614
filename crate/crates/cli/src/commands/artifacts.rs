use std::path::PathBuf;

use clap::Args;
use lorafuse_core::backbone::{BackboneConfig, BackboneWeights};
use lorafuse_core::multitask::{Bundle, TaskHead};
use lorafuse_core::LoraAdapter;
use serde::{Deserialize, Serialize};

use crate::config::{echo, require, resolve};
use crate::exit::config_error;

pub const BACKBONE_FILE: &str = "backbone.ltns";

#[derive(Args, Debug, Serialize)]
pub struct BackboneInitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Geometry preset: `desk` or `paper`. Individual dimensions override it.
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneInitConfig {
    pub scale: Option<String>,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub channels: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_dim: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl BackboneInitConfig {
    pub fn geometry(&self) -> anyhow::Result<BackboneConfig> {
        let mut c = match self.scale.as_deref().unwrap_or("desk") {
            "desk" => BackboneConfig::desk_scale(),
            "paper" => BackboneConfig::paper_scale(),
            other => return Err(config_error(format!("unknown scale `{other}`")).into()),
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.image_size, self.image_size);
        set(&mut c.patch_size, self.patch_size);
        set(&mut c.channels, self.channels);
        set(&mut c.hidden_dim, self.hidden_dim);
        set(&mut c.num_layers, self.num_layers);
        set(&mut c.num_heads, self.num_heads);
        set(&mut c.mlp_dim, self.mlp_dim);
        c.validate()?;
        Ok(c)
    }
}

pub fn backbone_init(args: BackboneInitArgs) -> anyhow::Result<()> {
    let cfg: BackboneInitConfig = resolve("backbone-init", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    let geometry = cfg.geometry()?;
    echo(&cfg, Some(&out))?;
    let weights = BackboneWeights::init(&geometry, cfg.seed)?;
    let path = out.join(BACKBONE_FILE);
    weights.save(&path)?;
    println!("wrote {}", path.display());
    println!("config hash: {}", geometry.hash());
    println!("parameters: {}", weights.param_count());
    println!("checksum: {}", weights.checksum());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct BundleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Adapter shared by all heads, usually a merged one.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    /// Head container; repeat for each task.
    #[arg(long = "head")]
    pub heads: Vec<PathBuf>,
    /// Bundle directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub backbone: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub heads: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn bundle(args: BundleArgs) -> anyhow::Result<()> {
    let cfg: BundleConfig = resolve("bundle", args.config.as_deref(), &args)?;
    let out = require(&cfg.out, "out")?.clone();
    let backbone = BackboneWeights::load(require(&cfg.backbone, "backbone")?)?;
    if cfg.heads.is_empty() {
        return Err(config_error("a bundle needs at least one --head").into());
    }
    echo(&cfg, Some(&out))?;
    let adapter = cfg.adapter.as_ref().map(LoraAdapter::load).transpose()?;
    let heads = cfg.heads.iter().map(TaskHead::load).collect::<Result<Vec<_>, _>>()?;
    let bundle = Bundle {
        backbone,
        adapter,
        heads,
    };
    // Assembling the model checks head widths and duplicate tasks.
    bundle.clone().into_model()?;
    let manifest = bundle.save(&out)?;
    println!("wrote bundle {} with tasks:", out.display());
    for t in manifest.tasks {
        println!("  {} ({:?})", t.name, t.kind);
    }
    Ok(())
}
