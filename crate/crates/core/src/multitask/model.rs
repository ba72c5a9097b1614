use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::autograd::{Graph, Tensor};
use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;

use super::{TaskHead, TaskKind};

/// Per-task predictions for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskOutput {
    Classification {
        predicted: Vec<usize>,
        /// `batch × num_classes`
        probabilities: Tensor,
    },
    Regression {
        /// `batch × out`, in the head's target space.
        values: Tensor,
    },
}

/// Shared backbone, one (possibly merged) adapter, and a head per task.
#[derive(Debug)]
pub struct MultiTaskModel {
    backbone: Arc<BackboneWeights>,
    adapter: Option<LoraAdapter>,
    heads: BTreeMap<String, TaskHead>,
    backbone_forwards: AtomicUsize,
}

impl MultiTaskModel {
    pub fn new(backbone: Arc<BackboneWeights>, adapter: Option<LoraAdapter>) -> Result<Self> {
        if let Some(a) = &adapter {
            a.check_backbone(&backbone.config)?;
        }
        Ok(Self {
            backbone,
            adapter,
            heads: BTreeMap::new(),
            backbone_forwards: AtomicUsize::new(0),
        })
    }

    pub fn add_head(&mut self, head: TaskHead) -> Result<()> {
        if head.input_dim() != self.backbone.config.hidden_dim {
            return Err(Error::Config(format!(
                "head `{}` takes {} features, backbone produces {}",
                head.task_name,
                head.input_dim(),
                self.backbone.config.hidden_dim
            )));
        }
        if self.heads.contains_key(&head.task_name) {
            return Err(Error::Config(format!("duplicate task `{}`", head.task_name)));
        }
        self.heads.insert(head.task_name.clone(), head);
        Ok(())
    }

    pub fn with_head(mut self, head: TaskHead) -> Result<Self> {
        self.add_head(head)?;
        Ok(self)
    }

    pub fn backbone(&self) -> &BackboneWeights {
        &self.backbone
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_ref()
    }

    pub fn heads(&self) -> &BTreeMap<String, TaskHead> {
        &self.heads
    }

    pub fn head(&self, task: &str) -> Result<&TaskHead> {
        self.heads
            .get(task)
            .ok_or_else(|| Error::UnknownTask(task.to_owned()))
    }

    /// Number of backbone passes executed so far.
    pub fn backbone_forwards(&self) -> usize {
        self.backbone_forwards.load(Ordering::Relaxed)
    }

    /// Pooled `batch × d` features: one backbone pass.
    pub fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let binding = self.adapter.as_ref().map(|a| a.bind(&mut g, false));
        let out = self.backbone.forward_graph(&mut g, images, binding.as_ref())?;
        self.backbone_forwards.fetch_add(1, Ordering::Relaxed);
        Ok(g.value(out))
    }

    pub fn head_output(&self, task: &str, features: &Tensor) -> Result<TaskOutput> {
        let head = self.head(task)?;
        let raw = head.forward(features)?;
        Ok(match head.kind {
            TaskKind::Classification { num_classes } => {
                let batch = raw.shape()[0];
                let mut probs = Vec::with_capacity(raw.numel());
                let mut predicted = Vec::with_capacity(batch);
                for row in raw.data().chunks(num_classes) {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    probs.extend(exps.iter().map(|e| (e / total) as f32));
                    predicted.push(argmax(row));
                }
                TaskOutput::Classification {
                    predicted,
                    probabilities: Tensor::new([batch, num_classes], probs)?,
                }
            }
            TaskKind::Regression { .. } | TaskKind::Landmarks { .. } => {
                TaskOutput::Regression { values: raw }
            }
        })
    }

    pub fn predict(&self, task: &str, images: &[Tensor]) -> Result<TaskOutput> {
        self.head(task)?;
        let features = self.features(images)?;
        self.head_output(task, &features)
    }

    /// Evaluates several tasks on the same batch with a single backbone pass.
    pub fn predict_many(&self, tasks: &[&str], images: &[Tensor]) -> Result<BTreeMap<String, TaskOutput>> {
        for t in tasks {
            self.head(t)?;
        }
        let features = self.features(images)?;
        tasks
            .iter()
            .map(|&t| Ok((t.to_owned(), self.head_output(t, &features)?)))
            .collect()
    }
}

/// First index of the maximum; NaN never wins.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || row[best].is_nan() {
            best = i;
        }
    }
    best
}
