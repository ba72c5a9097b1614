mod adam;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};

use crate::autograd::{Graph, Gradients, Tensor, Var};
use crate::backbone::BackboneWeights;
use crate::data::{SplitData, TaskDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_outputs, EyeIndices, MetricKind, MetricResult};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::multitask::{argmax, task_loss, BatchTargets, TargetNorm, TaskHead, TaskKind, DEFAULT_HIDDEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Adapter factors and head.
    Lora,
    /// Head only, on frozen backbone features.
    #[serde(alias = "head-only")]
    HeadOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub rank: usize,
    /// Defaults to the rank.
    pub alpha: Option<f32>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub head_hidden: usize,
    pub eyes: EyeIndices,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            mode: TrainMode::Lora,
            rank: 16,
            alpha: None,
            learning_rate: adam.learning_rate,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            head_hidden: DEFAULT_HIDDEN,
            eyes: EyeIndices::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lora(&self) -> LoraConfig {
        let cfg = LoraConfig::new(self.rank);
        match self.alpha {
            Some(a) => cfg.with_alpha(a),
            None => cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.head_hidden == 0 {
            return Err(Error::Config("batch_size, max_epochs and head_hidden must be positive".into()));
        }
        if self.mode == TrainMode::Lora {
            self.lora().validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_name: String,
    pub mode: TrainMode,
    pub val_metric: MetricKind,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test_metrics: Vec<MetricResult>,
    pub adapter_params: usize,
    pub head_params: usize,
    pub trainable_params: usize,
    pub backbone_checksum: String,
    /// Excluded from the serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapter: Option<LoraAdapter>,
    pub head: TaskHead,
    pub report: TrainReport,
}

const ADAPTER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const HEAD_STREAM: u64 = 0xd1b5_4a32_d192_ed03;
const SHUFFLE_STREAM: u64 = 0x94d0_49bb_1331_11eb;

fn batch_targets(kind: &TaskKind, data: &SplitData, norm: &TargetNorm, idx: &[usize]) -> BatchTargets {
    match kind {
        TaskKind::Classification { .. } => BatchTargets::Classes(idx.iter().map(|&i| data.classes[i]).collect()),
        _ => {
            let w = kind.out_dim();
            let raw: Vec<f64> = idx.iter().flat_map(|&i| data.values[i * w..(i + 1) * w].iter().copied()).collect();
            BatchTargets::Values(norm.apply(&raw))
        }
    }
}

fn pick(images: &[Tensor], idx: &[usize]) -> Vec<Tensor> {
    idx.iter().map(|&i| images[i].clone()).collect()
}

/// Pooled features of a whole split, `batch_size` images per pass.
fn split_features(
    backbone: &BackboneWeights,
    adapter: Option<&LoraAdapter>,
    images: &[Tensor],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * backbone.config.hidden_dim);
    for chunk in images.chunks(batch_size) {
        out.extend(backbone.forward(chunk, adapter)?.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Scores a split from precomputed features.
fn score(
    head: &TaskHead,
    features: &[f64],
    data: &SplitData,
    eyes: EyeIndices,
) -> Result<Vec<MetricResult>> {
    let d = head.input_dim();
    let f = Tensor::new([data.len(), d], features.iter().map(|&v| v as f32).collect())?;
    let out = head.forward(&f)?;
    let (mut preds, mut values) = (Vec::new(), Vec::new());
    match head.kind {
        TaskKind::Classification { num_classes } => {
            preds = out.data().chunks(num_classes).map(argmax).collect();
        }
        _ => values = out.data().iter().map(|&v| v as f64).collect(),
    }
    let targets = head.target_norm.apply(&data.values);
    evaluate_outputs(&head.task_name, &head.kind, &preds, &values, data, &targets, eyes)
}

fn primary(results: &[MetricResult], metric: MetricKind) -> f64 {
    results
        .iter()
        .find(|r| r.metric == metric)
        .map(|r| r.value)
        .expect("primary metric is always reported")
}

/// Mutable references to every trainable tensor, in a fixed order matching
/// the graph variables.
fn trainable<'a>(adapter: Option<&'a mut LoraAdapter>, head: &'a mut TaskHead) -> Vec<&'a mut Tensor> {
    let mut params = Vec::new();
    if let Some(a) = adapter {
        for f in a.factors.values_mut() {
            params.push(&mut f.a);
            params.push(&mut f.b);
        }
    }
    params.extend(head.params_mut());
    params
}

fn gradients_of(grads: &Gradients, vars: &[Var], sizes: &[usize]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(sizes)
        .map(|(&v, &n)| grads.get_f64(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
        .collect()
}

/// Trains one task on a frozen backbone and returns the snapshot with the
/// best validation metric.
pub fn train_task(dataset: &TaskDataset, backbone: &BackboneWeights, config: &TrainConfig) -> Result<TrainOutcome> {
    let started = Instant::now();
    config.validate()?;
    dataset.require_nonempty()?;
    dataset.kind.validate()?;
    let checksum = backbone.checksum();
    let kind = dataset.kind;
    let metric = MetricKind::primary(&kind);
    let d = backbone.config.hidden_dim;

    let mut head = TaskHead::init(&dataset.task_name, kind, d, config.head_hidden, config.seed ^ HEAD_STREAM)?;
    if let TaskKind::Regression { out_dim } = kind {
        head.target_norm = TargetNorm::fit_standardize(&dataset.train.values, out_dim);
    }
    let mut adapter = match config.mode {
        TrainMode::Lora => Some(LoraAdapter::init(
            &config.lora(),
            &backbone.config,
            &dataset.task_name,
            config.seed ^ ADAPTER_STREAM,
        )?),
        TrainMode::HeadOnly => None,
    };
    let adam = config.adam();
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);

    // The backbone is frozen, so head-only training can reuse features.
    let cached = match config.mode {
        TrainMode::HeadOnly => Some(
            [&dataset.train, &dataset.val, &dataset.test]
                .map(|s| split_features(backbone, None, &s.images, config.batch_size)),
        ),
        TrainMode::Lora => None,
    };
    let cached = match cached {
        Some([a, b, c]) => Some([a?, b?, c?]),
        None => None,
    };

    let train = &dataset.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Option<LoraAdapter>, TaskHead)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let lora = adapter.as_ref().map(|a| a.bind(&mut g, true));
            let hb = head.bind(&mut g, true);
            let features = match &cached {
                Some([train_f, _, _]) => {
                    let rows = idx.iter().flat_map(|&i| train_f[i * d..(i + 1) * d].iter().copied()).collect();
                    g.constant_f64(vec![idx.len(), d], rows)?
                }
                None => backbone.forward_graph(&mut g, &pick(&train.images, idx), lora.as_ref())?,
            };
            let out = head.forward_graph(&mut g, &hb, features)?;
            let targets = batch_targets(&kind, train, &head.target_norm, idx);
            let loss = task_loss(&mut g, &kind, out, &targets)?;
            let value = g.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss became {value} in epoch {epoch}")));
            }
            loss_sum += value * idx.len() as f64;
            let grads = g.backward(loss)?;

            let mut vars = Vec::new();
            if let Some(b) = &lora {
                for &(a, bv) in b.factors.values() {
                    vars.push(a);
                    vars.push(bv);
                }
            }
            vars.extend(hb.vars());
            let mut params = trainable(adapter.as_mut(), &mut head);
            let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
            let grad_values = gradients_of(&grads, &vars, &sizes);
            let grad_refs: Vec<&[f64]> = grad_values.iter().map(Vec::as_slice).collect();
            adam_step(&mut params, &grad_refs, &mut state, &adam)?;
        }

        let val_features = match &cached {
            Some([_, v, _]) => v.clone(),
            None => split_features(backbone, adapter.as_ref(), &dataset.val.images, config.batch_size)?,
        };
        let val = primary(&score(&head, &val_features, &dataset.val, config.eyes)?, metric);
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_metric: val,
        });
        let improved = match &best {
            None => val.is_finite(),
            Some((_, b, _, _)) => metric.better(val, *b),
        };
        if improved {
            best = Some((epoch, val, adapter.clone(), head.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (best_epoch, best_val, adapter, head) =
        best.ok_or_else(|| Error::Divergence("validation metric never became finite".into()))?;
    let test_features = match &cached {
        Some([_, _, t]) => t.clone(),
        None => split_features(backbone, adapter.as_ref(), &dataset.test.images, config.batch_size)?,
    };
    let test_metrics = score(&head, &test_features, &dataset.test, config.eyes)?;
    if backbone.checksum() != checksum {
        return Err(Error::Contract("backbone weights changed during training".into()));
    }
    let adapter_params = adapter.as_ref().map_or(0, LoraAdapter::param_count);
    let head_params = head.param_count();
    let report = TrainReport {
        task_name: dataset.task_name.clone(),
        mode: config.mode,
        val_metric: metric,
        epochs,
        best_epoch,
        best_val_metric: best_val,
        test_metrics,
        adapter_params,
        head_params,
        trainable_params: adapter_params + head_params,
        backbone_checksum: checksum,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { adapter, head, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_synthetic, Family, ImageSpec, SyntheticSpec};

    fn tiny_backbone() -> BackboneWeights {
        let cfg = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 16,
            pooler: Default::default(),
        };
        BackboneWeights::init(&cfg, 0).unwrap()
    }

    fn dataset(family: Family, n: usize) -> TaskDataset {
        let spec = SyntheticSpec::new("t", family, n, 5).with_image_size(if family == Family::Landmarks { 16 } else { 8 });
        let m = generate_synthetic(&spec).unwrap();
        TaskDataset::from_manifest(&m, None, &ImageSpec::new(8, 1)).unwrap()
    }

    fn config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            rank: 2,
            max_epochs: 3,
            patience: 2,
            batch_size: 8,
            head_hidden: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lora_run_is_deterministic_and_counts_params() {
        let bb = tiny_backbone();
        let ds = dataset(Family::Blobs, 40);
        let a = train_task(&ds, &bb, &config(TrainMode::Lora)).unwrap();
        let b = train_task(&ds, &bb, &config(TrainMode::Lora)).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.adapter, b.adapter);
        let adapter = a.adapter.unwrap();
        assert_eq!(a.report.trainable_params, adapter.param_count() + a.head.param_count());
        assert_eq!(a.report.backbone_checksum, bb.checksum());
        assert!(a.report.best_epoch <= a.report.epochs_run());
    }

    #[test]
    fn head_only_has_no_adapter() {
        let bb = tiny_backbone();
        let out = train_task(&dataset(Family::Gratings, 40), &bb, &config(TrainMode::HeadOnly)).unwrap();
        assert!(out.adapter.is_none());
        assert_eq!(out.report.trainable_params, out.head.param_count());
    }

    #[test]
    fn landmarks_report_nme() {
        let bb = tiny_backbone();
        let out = train_task(&dataset(Family::Landmarks, 20), &bb, &config(TrainMode::HeadOnly)).unwrap();
        assert_eq!(out.report.val_metric, MetricKind::Nme);
        assert!(out.report.test_metrics[0].value.is_finite());
    }

    #[test]
    fn early_stopping_respects_patience() {
        let bb = tiny_backbone();
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 1,
            learning_rate: 1e-9,
            ..config(TrainMode::HeadOnly)
        };
        let out = train_task(&dataset(Family::Blobs, 40), &bb, &cfg).unwrap();
        assert!(out.report.epochs_run() <= out.report.best_epoch + cfg.patience);
        assert!(out.report.epochs_run() < 30);
    }

    #[test]
    fn rejects_bad_config() {
        let bb = tiny_backbone();
        let ds = dataset(Family::Blobs, 20);
        let cfg = TrainConfig { patience: 0, ..config(TrainMode::Lora) };
        assert!(matches!(train_task(&ds, &bb, &cfg), Err(Error::Config(_))));
        let cfg = TrainConfig { learning_rate: 0.0, ..config(TrainMode::Lora) };
        assert!(matches!(train_task(&ds, &bb, &cfg), Err(Error::Config(_))));
    }
}
