//! Low-rank adapters on the key and value projections.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autograd::{mm, Graph, Tensor};
use crate::backbone::{BackboneConfig, LoraBinding, Projection};
use crate::container::Container;
use crate::error::{Error, Result};

pub const FORMAT: &str = "lora-v1";
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<Projection>,
}

impl LoraConfig {
    /// Rank `r` on key and value with `alpha = r`.
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: rank as f32,
            targets: Projection::ALL.to_vec(),
        }
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_targets(mut self, targets: impl IntoIterator<Item = Projection>) -> Self {
        self.targets = targets.into_iter().collect();
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        let scale = self.scale();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!(
                "LoRA scale alpha/rank = {}/{} must be finite and positive",
                self.alpha, self.rank
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        Ok(())
    }

    fn normalized_targets(&self) -> Vec<Projection> {
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `r × d`
    pub a: Tensor,
    /// `d × r`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub task_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub factors: BTreeMap<(usize, Projection), LoraFactors>,
}

fn tensor_name(layer: usize, proj: Projection, factor: char) -> String {
    format!("layer.{layer}.{proj}.{factor}")
}

impl LoraAdapter {
    /// Gaussian `A` (σ = 0.02) and zero `B`, so the initial delta is zero.
    pub fn init(
        config: &LoraConfig,
        backbone: &BackboneConfig,
        task_name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = backbone.hidden_dim;
        if config.rank > d {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds hidden_dim {d}",
                config.rank
            )));
        }
        let mut config = config.clone();
        config.targets = config.normalized_targets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, A_INIT_STD).expect("valid std");
        let mut factors = BTreeMap::new();
        for layer in 0..backbone.num_layers {
            for &proj in &config.targets {
                let a = Tensor::from_fn([config.rank, d], |_| normal.sample(&mut rng) as f32);
                let b = Tensor::zeros([d, config.rank]);
                factors.insert((layer, proj), LoraFactors { a, b });
            }
        }
        Ok(Self {
            config,
            task_name: task_name.into(),
            num_layers: backbone.num_layers,
            hidden_dim: d,
            factors,
        })
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn scale(&self) -> f64 {
        self.config.scale()
    }

    pub fn factors(&self, layer: usize, proj: Projection) -> Result<&LoraFactors> {
        self.factors.get(&(layer, proj)).ok_or(Error::Lookup {
            layer,
            projection: proj.to_string(),
        })
    }

    /// Dense `scale · B · A` for one targeted projection.
    pub fn effective_delta(&self, layer: usize, proj: Projection) -> Result<Tensor> {
        let f = self.factors(layer, proj)?;
        let (d, r) = (self.hidden_dim, self.config.rank);
        let a: Vec<f64> = f.a.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = f.b.data().iter().map(|&v| v as f64).collect();
        let scale = self.scale();
        let delta = mm(&b, &a, d, r, d);
        Tensor::new([d, d], delta.into_iter().map(|v| (v * scale) as f32).collect())
    }

    pub fn dense_deltas(&self) -> Result<BTreeMap<(usize, Projection), Tensor>> {
        self.factors
            .keys()
            .map(|&(l, p)| Ok(((l, p), self.effective_delta(l, p)?)))
            .collect()
    }

    /// Number of trainable floats: `Σ (r·d + d·r)` over targeted pairs.
    pub fn param_count(&self) -> usize {
        self.factors.values().map(|f| f.a.numel() + f.b.numel()).sum()
    }

    pub fn check_backbone(&self, backbone: &BackboneConfig) -> Result<()> {
        for (&(layer, proj), f) in &self.factors {
            let mismatch = |detail: String| Error::AdapterMismatch {
                layer,
                projection: proj.to_string(),
                detail,
            };
            if layer >= backbone.num_layers {
                return Err(mismatch(format!(
                    "backbone has only {} layers",
                    backbone.num_layers
                )));
            }
            if f.a.shape()[1] != backbone.hidden_dim || f.b.shape()[0] != backbone.hidden_dim {
                return Err(mismatch(format!(
                    "adapter hidden_dim {} vs backbone {}",
                    self.hidden_dim, backbone.hidden_dim
                )));
            }
        }
        Ok(())
    }

    /// Places the factors on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LoraBinding {
        let factors = self
            .factors
            .iter()
            .map(|(&key, f)| {
                let vars = if trainable {
                    (g.param(&f.a), g.param(&f.b))
                } else {
                    (g.constant(&f.a), g.constant(&f.b))
                };
                (key, vars)
            })
            .collect();
        LoraBinding {
            scale: self.scale(),
            factors,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("format".into(), Value::from(FORMAT));
        meta.insert("task_name".into(), Value::from(self.task_name.clone()));
        meta.insert("rank".into(), Value::from(self.config.rank));
        meta.insert("alpha".into(), Value::from(self.config.alpha as f64));
        meta.insert(
            "targets".into(),
            Value::from(
                self.config
                    .targets
                    .iter()
                    .map(|p| p.as_str())
                    .collect::<Vec<_>>(),
            ),
        );
        meta.insert("num_layers".into(), Value::from(self.num_layers));
        meta.insert("hidden_dim".into(), Value::from(self.hidden_dim));
        let mut c = Container::new(meta);
        for (&(layer, proj), f) in &self.factors {
            c.insert(tensor_name(layer, proj, 'A'), f.a.clone());
            c.insert(tensor_name(layer, proj, 'B'), f.b.clone());
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_format(FORMAT)?;
        let task_name = c.meta_str("task_name")?.to_owned();
        let rank = c.meta_usize("rank")?;
        let alpha = c.meta_f64("alpha")? as f32;
        let num_layers = c.meta_usize("num_layers")?;
        let hidden_dim = c.meta_usize("hidden_dim")?;
        let targets = c
            .metadata
            .get("targets")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("metadata field `targets` missing".into()))?
            .iter()
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| Error::Format("target is not a string".into()))
                    .and_then(|s| Projection::parse(s).map_err(|e| Error::Format(e.to_string())))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut config = LoraConfig {
            rank,
            alpha,
            targets,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("adapter metadata: {e}")))?;
        config.targets = config.normalized_targets();

        let mut factors = BTreeMap::new();
        for layer in 0..num_layers {
            for &proj in &config.targets {
                let a_name = tensor_name(layer, proj, 'A');
                let b_name = tensor_name(layer, proj, 'B');
                let a = c
                    .tensors
                    .remove(&a_name)
                    .ok_or_else(|| Error::MissingTensor(a_name.clone()))?;
                let b = c
                    .tensors
                    .remove(&b_name)
                    .ok_or_else(|| Error::MissingTensor(b_name.clone()))?;
                check_factor(&a_name, &a, rank, hidden_dim, true)?;
                check_factor(&b_name, &b, rank, hidden_dim, false)?;
                factors.insert((layer, proj), LoraFactors { a, b });
            }
        }
        if let Some(extra) = c.tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in adapter file")));
        }
        Ok(Self {
            config,
            task_name,
            num_layers,
            hidden_dim,
            factors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

fn check_factor(name: &str, t: &Tensor, rank: usize, d: usize, is_a: bool) -> Result<()> {
    let (rows, cols) = t
        .dims2()
        .map_err(|_| Error::Format(format!("tensor `{name}` is not 2-D: {:?}", t.shape())))?;
    let (r, width) = if is_a { (rows, cols) } else { (cols, rows) };
    if r != rank {
        return Err(Error::Format(format!(
            "tensor `{name}` has rank {r}, adapter rank is {rank}"
        )));
    }
    if width != d {
        return Err(Error::Format(format!(
            "tensor `{name}` has width {width}, metadata hidden_dim is {d}"
        )));
    }
    Ok(())
}
