use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::Linear;
use crate::container::Container;
use crate::error::{Error, Result};

const FORMAT: &str = "head-v1";
pub const DEFAULT_HIDDEN: usize = 512;

/// What a head predicts. Landmarks are a regression over `2·num_points`
/// interleaved `(x, y)` coordinates, scored with NME instead of RMSE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression { out_dim: usize },
    Landmarks { num_points: usize },
}

impl TaskKind {
    pub fn out_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { num_classes } => num_classes,
            TaskKind::Regression { out_dim } => out_dim,
            TaskKind::Landmarks { num_points } => 2 * num_points,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::Classification { num_classes } if num_classes < 2 => Err(Error::Config(
                format!("classification needs at least 2 classes, got {num_classes}"),
            )),
            _ if self.out_dim() == 0 => Err(Error::Config("task output width is zero".into())),
            _ => Ok(()),
        }
    }
}

/// Mapping from stored regression targets to the space the head predicts in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetNorm {
    #[default]
    Identity,
    Standardize { mean: Vec<f64>, std: Vec<f64> },
}

impl TargetNorm {
    /// Per-dimension mean and (population) standard deviation of
    /// row-major `values` with `dim` columns. Zero spread maps to std 1.
    pub fn fit_standardize(values: &[f64], dim: usize) -> Self {
        let n = (values.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in values.chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; dim];
        for row in values.chunks(dim) {
            for j in 0..dim {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        TargetNorm::Standardize { mean, std }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        match self {
            TargetNorm::Identity => values.to_vec(),
            TargetNorm::Standardize { mean, std } => values
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % mean.len()]) / std[i % std.len()])
                .collect(),
        }
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        match self {
            TargetNorm::Identity => values.to_vec(),
            TargetNorm::Standardize { mean, std } => values
                .iter()
                .enumerate()
                .map(|(i, v)| v * std[i % std.len()] + mean[i % mean.len()])
                .collect(),
        }
    }
}

/// Two-layer MLP: `W2·relu(W1·f + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub task_name: String,
    pub kind: TaskKind,
    /// `hidden × d`
    pub fc1: Linear,
    /// `out × hidden`
    pub fc2: Linear,
    pub target_norm: TargetNorm,
}

/// Head parameters placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadBinding {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl HeadBinding {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

fn uniform_linear(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
    let bound = 1.0 / (in_dim as f32).sqrt();
    Linear {
        weight: Tensor::from_fn([out_dim, in_dim], |_| rng.random_range(-bound..bound)),
        bias: Tensor::zeros([out_dim]),
    }
}

impl TaskHead {
    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn init(
        task_name: impl Into<String>,
        kind: TaskKind,
        input_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        kind.validate()?;
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            task_name: task_name.into(),
            kind,
            fc1: uniform_linear(hidden, input_dim, &mut rng),
            fc2: uniform_linear(kind.out_dim(), hidden, &mut rng),
            target_norm: TargetNorm::Identity,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.fc1.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.kind.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.fc1.weight.numel() + self.fc1.bias.numel() + self.fc2.weight.numel() + self.fc2.bias.numel()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadBinding {
        let mut put = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        HeadBinding {
            w1: put(&self.fc1.weight),
            b1: put(&self.fc1.bias),
            w2: put(&self.fc2.weight),
            b2: put(&self.fc2.bias),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph, binding: &HeadBinding, features: Var) -> Result<Var> {
        let width = g.shape(features).get(1).copied().unwrap_or(0);
        if width != self.input_dim() {
            return Err(Error::dim(
                "head_forward",
                g.shape(features),
                self.fc1.weight.shape(),
            ));
        }
        let h = g.matmul_nt(features, binding.w1)?;
        let h = g.add_row(h, binding.b1)?;
        let h = g.relu(h);
        let o = g.matmul_nt(h, binding.w2)?;
        g.add_row(o, binding.b2)
    }

    /// Raw logits (classification) or values (regression) for `batch × d`
    /// features.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.constant(features);
        let b = self.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &b, f)?;
        Ok(g.value(out))
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("format".into(), Value::from(FORMAT));
        meta.insert("task_name".into(), Value::from(self.task_name.clone()));
        meta.insert("kind".into(), serde_json::to_value(self.kind).expect("kind serialises"));
        meta.insert(
            "target_norm".into(),
            serde_json::to_value(&self.target_norm).expect("norm serialises"),
        );
        meta.insert("input_dim".into(), Value::from(self.input_dim()));
        meta.insert("hidden".into(), Value::from(self.hidden()));
        let mut c = Container::new(meta);
        c.insert("fc1.weight", self.fc1.weight.clone());
        c.insert("fc1.bias", self.fc1.bias.clone());
        c.insert("fc2.weight", self.fc2.weight.clone());
        c.insert("fc2.bias", self.fc2.bias.clone());
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_format(FORMAT)?;
        let task_name = c.meta_str("task_name")?.to_owned();
        let field = |c: &Container, key: &str| {
            c.metadata
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("metadata field `{key}` missing")))
        };
        let kind: TaskKind = serde_json::from_value(field(&c, "kind")?)
            .map_err(|e| Error::Format(format!("bad task kind: {e}")))?;
        let target_norm: TargetNorm = serde_json::from_value(field(&c, "target_norm")?)
            .map_err(|e| Error::Format(format!("bad target_norm: {e}")))?;
        let input_dim = c.meta_usize("input_dim")?;
        let hidden = c.meta_usize("hidden")?;
        let out = kind.out_dim();
        let fc1 = Linear {
            weight: c.take("fc1.weight", &[hidden, input_dim])?,
            bias: c.take("fc1.bias", &[hidden])?,
        };
        let fc2 = Linear {
            weight: c.take("fc2.weight", &[out, hidden])?,
            bias: c.take("fc2.bias", &[out])?,
        };
        if let Some(extra) = c.tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in head file")));
        }
        Ok(Self {
            task_name,
            kind,
            fc1,
            fc2,
            target_norm,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}
