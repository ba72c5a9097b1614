//! Combining trained adapters into a single adapter.
//!
//! Concatenation stacks the `A` factors vertically and the `B` factors
//! horizontally, so `B·A` of the result is exactly `Σ wᵢ·scaleᵢ·Bᵢ·Aᵢ`. The
//! linear strategy sums same-rank factors and therefore carries cross terms
//! `√(wᵢwⱼ)·Bᵢ·Aⱼ`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::Projection;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig, LoraFactors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Concat,
    Linear,
}

impl MergeStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" | "concatenation" => Ok(Self::Concat),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown merge strategy `{other}`"))),
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concat => "concat",
            Self::Linear => "linear",
        })
    }
}

#[derive(Clone, Debug)]
pub struct MergeSpec<'a> {
    pub adapters: Vec<&'a LoraAdapter>,
    pub weights: Vec<f64>,
    pub strategy: MergeStrategy,
}

impl<'a> MergeSpec<'a> {
    /// Unit weight for every adapter.
    pub fn new(adapters: Vec<&'a LoraAdapter>, strategy: MergeStrategy) -> Self {
        let weights = vec![1.0; adapters.len()];
        Self {
            adapters,
            weights,
            strategy,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    fn check_weights(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::Config("merge needs at least one adapter".into()));
        }
        if self.weights.len() != self.adapters.len() {
            return Err(Error::Config(format!(
                "{} weights given for {} adapters",
                self.weights.len(),
                self.adapters.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!("merge weights must be positive, got {w}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    HiddenDim,
    NumLayers,
    Targets,
    Rank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub kind: MismatchKind,
    /// Index into the adapter list, compared against adapter 0.
    pub adapter_index: usize,
    pub adapter: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub mismatches: Vec<Mismatch>,
    pub concat_eligible: bool,
    pub linear_eligible: bool,
}

impl CompatibilityReport {
    fn structural(&self) -> impl Iterator<Item = &Mismatch> {
        self.mismatches.iter().filter(|m| m.kind != MismatchKind::Rank)
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.mismatches.is_empty() {
            writeln!(f, "no mismatches")?;
        }
        for m in &self.mismatches {
            writeln!(
                f,
                "mismatch {:?}: adapter {} ({}): {}",
                m.kind, m.adapter_index, m.adapter, m.detail
            )?;
        }
        let elig = |b: bool| if b { "eligible" } else { "ineligible" };
        write!(
            f,
            "linear {}, concat {}",
            elig(self.linear_eligible),
            elig(self.concat_eligible)
        )
    }
}

/// Lists every disagreement with the first adapter. Never fails.
pub fn validate_compatibility(adapters: &[&LoraAdapter]) -> CompatibilityReport {
    let mut mismatches = Vec::new();
    if let Some((first, rest)) = adapters.split_first() {
        for (i, other) in rest.iter().enumerate() {
            let idx = i + 1;
            let mut push = |kind, detail: String| {
                mismatches.push(Mismatch {
                    kind,
                    adapter_index: idx,
                    adapter: other.task_name.clone(),
                    detail,
                })
            };
            if other.hidden_dim != first.hidden_dim {
                push(
                    MismatchKind::HiddenDim,
                    format!("hidden_dim {} vs {}", other.hidden_dim, first.hidden_dim),
                );
            }
            if other.num_layers != first.num_layers {
                push(
                    MismatchKind::NumLayers,
                    format!("num_layers {} vs {}", other.num_layers, first.num_layers),
                );
            }
            if other.config.targets != first.config.targets {
                push(
                    MismatchKind::Targets,
                    format!("targets {:?} vs {:?}", other.config.targets, first.config.targets),
                );
            }
            if other.config.rank != first.config.rank {
                push(
                    MismatchKind::Rank,
                    format!("rank {} vs {}", other.config.rank, first.config.rank),
                );
            }
        }
    }
    let mut report = CompatibilityReport {
        mismatches,
        concat_eligible: !adapters.is_empty(),
        linear_eligible: false,
    };
    let structural_ok = report.structural().next().is_none();
    report.concat_eligible &= structural_ok;
    report.linear_eligible = report.concat_eligible && report.mismatches.is_empty();
    report
}

fn ensure_structural(adapters: &[&LoraAdapter]) -> Result<CompatibilityReport> {
    let report = validate_compatibility(adapters);
    if let Some(m) = report.structural().next() {
        return Err(Error::Compatibility(format!(
            "adapter {} ({}): {}",
            m.adapter_index, m.adapter, m.detail
        )));
    }
    // Factor maps must line up pair by pair too.
    let first = adapters[0];
    for (i, other) in adapters.iter().enumerate().skip(1) {
        for &(layer, proj) in first.factors.keys() {
            if !other.factors.contains_key(&(layer, proj)) {
                return Err(Error::Compatibility(format!(
                    "adapter {i} ({}) has no factors for layer {layer} {proj}",
                    other.task_name
                )));
            }
        }
    }
    Ok(report)
}

fn merged_name(adapters: &[&LoraAdapter]) -> String {
    adapters
        .iter()
        .map(|a| a.task_name.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn merge(spec: &MergeSpec<'_>) -> Result<LoraAdapter> {
    match spec.strategy {
        MergeStrategy::Concat => concat_merge(spec),
        MergeStrategy::Linear => linear_merge(spec),
    }
}

/// Rank-additive merge whose delta is exactly `Σ wᵢ·ΔWᵢ`.
pub fn concat_merge(spec: &MergeSpec<'_>) -> Result<LoraAdapter> {
    if spec.strategy != MergeStrategy::Concat {
        return Err(Error::Config("concat_merge called with a non-concat spec".into()));
    }
    spec.check_weights()?;
    ensure_structural(&spec.adapters)?;
    let first = spec.adapters[0];
    let d = first.hidden_dim;
    let rank: usize = spec.adapters.iter().map(|a| a.config.rank).sum();

    let mut factors = BTreeMap::new();
    for &key in first.factors.keys() {
        let mut a_data = Vec::with_capacity(rank * d);
        let mut b_data = vec![0.0f32; d * rank];
        let mut col = 0;
        for (adapter, &w) in spec.adapters.iter().zip(&spec.weights) {
            let f = &adapter.factors[&key];
            let r = adapter.config.rank;
            // merged scale is 1, so the whole of w·scale lands on A
            let factor = w * adapter.scale();
            a_data.extend(f.a.data().iter().map(|&v| (v as f64 * factor) as f32));
            for row in 0..d {
                b_data[row * rank + col..row * rank + col + r]
                    .copy_from_slice(&f.b.data()[row * r..(row + 1) * r]);
            }
            col += r;
        }
        factors.insert(
            key,
            LoraFactors {
                a: Tensor::new([rank, d], a_data)?,
                b: Tensor::new([d, rank], b_data)?,
            },
        );
    }
    Ok(LoraAdapter {
        config: LoraConfig {
            rank,
            alpha: rank as f32,
            targets: first.config.targets.clone(),
        },
        task_name: merged_name(&spec.adapters),
        num_layers: first.num_layers,
        hidden_dim: d,
        factors,
    })
}

/// Same-rank factor averaging: `A = Σ √(wᵢsᵢ)·Aᵢ`, `B = Σ √(wᵢsᵢ)·Bᵢ`.
pub fn linear_merge(spec: &MergeSpec<'_>) -> Result<LoraAdapter> {
    if spec.strategy != MergeStrategy::Linear {
        return Err(Error::Config("linear_merge called with a non-linear spec".into()));
    }
    spec.check_weights()?;
    let report = ensure_structural(&spec.adapters)?;
    if !report.linear_eligible {
        let ranks: Vec<usize> = spec.adapters.iter().map(|a| a.config.rank).collect();
        return Err(Error::Compatibility(format!(
            "linear merge needs equal ranks, got {ranks:?}"
        )));
    }
    let first = spec.adapters[0];
    let (d, rank) = (first.hidden_dim, first.config.rank);
    let mut factors = BTreeMap::new();
    for &key in first.factors.keys() {
        let mut a = vec![0.0f64; rank * d];
        let mut b = vec![0.0f64; d * rank];
        for (adapter, &w) in spec.adapters.iter().zip(&spec.weights) {
            let f = &adapter.factors[&key];
            let c = (w * adapter.scale()).sqrt();
            a.iter_mut().zip(f.a.data()).for_each(|(acc, &v)| *acc += c * v as f64);
            b.iter_mut().zip(f.b.data()).for_each(|(acc, &v)| *acc += c * v as f64);
        }
        factors.insert(
            key,
            LoraFactors {
                a: Tensor::new([rank, d], a.into_iter().map(|v| v as f32).collect())?,
                b: Tensor::new([d, rank], b.into_iter().map(|v| v as f32).collect())?,
            },
        );
    }
    Ok(LoraAdapter {
        config: LoraConfig {
            rank,
            alpha: rank as f32,
            targets: first.config.targets.clone(),
        },
        task_name: merged_name(&spec.adapters),
        num_layers: first.num_layers,
        hidden_dim: d,
        factors,
    })
}

/// Result of comparing a merged adapter's dense deltas with `Σ wᵢ·ΔWᵢ`
/// computed independently in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaDiscrepancy {
    pub max_abs: f64,
    /// Largest `|merged − sum| / Σ|wᵢ·ΔWᵢ|` over entries (the denominator
    /// is the entry's absolute term magnitude, so cancellation does not
    /// inflate it).
    pub max_rel: f64,
    pub entries: usize,
}

/// Checks `merged` against the weighted sum of the inputs' dense deltas.
pub fn delta_discrepancy(
    merged: &LoraAdapter,
    inputs: &[&LoraAdapter],
    weights: &[f64],
) -> Result<DeltaDiscrepancy> {
    let d = merged.hidden_dim;
    let mut out = DeltaDiscrepancy {
        max_abs: 0.0,
        max_rel: 0.0,
        entries: 0,
    };
    for &(layer, proj) in merged.factors.keys() {
        let m = merged.effective_delta(layer, proj)?;
        let (sum, mag) = weighted_dense_sum(inputs, weights, layer, proj, d)?;
        for ((mv, s), mg) in m.data().iter().zip(&sum).zip(&mag) {
            let err = (*mv as f64 - s).abs();
            out.max_abs = out.max_abs.max(err);
            if *mg > 0.0 {
                out.max_rel = out.max_rel.max(err / mg);
            } else if err > 0.0 {
                out.max_rel = f64::INFINITY;
            }
            out.entries += 1;
        }
    }
    Ok(out)
}

/// `Σ wᵢ·scaleᵢ·Bᵢ·Aᵢ` and its absolute-term magnitude, entry by entry.
fn weighted_dense_sum(
    inputs: &[&LoraAdapter],
    weights: &[f64],
    layer: usize,
    proj: Projection,
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut sum = vec![0.0; d * d];
    let mut mag = vec![0.0; d * d];
    for (adapter, &w) in inputs.iter().zip(weights) {
        let f = adapter.factors(layer, proj)?;
        let r = adapter.config.rank;
        let c = w * adapter.scale();
        for i in 0..d {
            for j in 0..d {
                for k in 0..r {
                    let t = c * f.b.data()[i * r + k] as f64 * f.a.data()[k * d + j] as f64;
                    sum[i * d + j] += t;
                    mag[i * d + j] += t.abs();
                }
            }
        }
    }
    Ok((sum, mag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(d: usize) -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            hidden_dim: d,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 8,
            pooler: Default::default(),
        }
    }

    fn random_adapter(rank: usize, d: usize, alpha: f32, name: &str, seed: u64) -> LoraAdapter {
        let mut ad =
            LoraAdapter::init(&LoraConfig::new(rank).with_alpha(alpha), &bb(d), name, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        for f in ad.factors.values_mut() {
            f.b = Tensor::from_fn(f.b.shape().to_vec(), |_| rng.random_range(-1.0..1.0));
        }
        ad
    }

    #[test]
    fn singleton_merges_are_delta_identity() {
        let a = random_adapter(3, 8, 5.0, "a", 1);
        for strategy in [MergeStrategy::Concat, MergeStrategy::Linear] {
            let m = merge(&MergeSpec::new(vec![&a], strategy)).unwrap();
            for (key, delta) in a.dense_deltas().unwrap() {
                let md = m.effective_delta(key.0, key.1).unwrap();
                for (x, y) in md.data().iter().zip(delta.data()) {
                    assert!((x - y).abs() <= 1e-7 * y.abs().max(1.0), "{strategy}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn two_rank_one_adapters_sum_exactly() {
        let a = random_adapter(1, 4, 1.0, "a", 10);
        let b = random_adapter(1, 4, 1.0, "b", 11);
        let m = concat_merge(&MergeSpec::new(vec![&a, &b], MergeStrategy::Concat)).unwrap();
        assert_eq!(m.task_name, "a+b");
        assert_eq!(m.rank(), 2);
        for (key, da) in a.dense_deltas().unwrap() {
            let db = b.effective_delta(key.0, key.1).unwrap();
            let dm = m.effective_delta(key.0, key.1).unwrap();
            for ((x, y), z) in dm.data().iter().zip(da.data()).zip(db.data()) {
                assert!((x - (y + z)).abs() <= 1e-6 * (y.abs() + z.abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn ranks_add_under_concat_and_block_linear() {
        let a = random_adapter(16, 64, 16.0, "a", 1);
        let b = random_adapter(64, 64, 64.0, "b", 2);
        let m = concat_merge(&MergeSpec::new(vec![&a, &b], MergeStrategy::Concat)).unwrap();
        assert_eq!(m.rank(), 80);
        assert_eq!(m.config.alpha, 80.0);
        let err = linear_merge(&MergeSpec::new(vec![&a, &b], MergeStrategy::Linear)).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)));
    }

    #[test]
    fn linear_merge_cross_term_only() {
        let mut a = random_adapter(2, 4, 2.0, "a", 3);
        let mut b = random_adapter(2, 4, 2.0, "b", 4);
        for f in a.factors.values_mut() {
            f.b = Tensor::zeros(f.b.shape().to_vec());
        }
        for f in b.factors.values_mut() {
            f.a = Tensor::zeros(f.a.shape().to_vec());
        }
        let m = linear_merge(&MergeSpec::new(vec![&a, &b], MergeStrategy::Linear)).unwrap();
        for &key in a.factors.keys() {
            // expected: B₂ · A₁ by hand
            let a1 = &a.factors[&key].a;
            let b2 = &b.factors[&key].b;
            let dm = m.effective_delta(key.0, key.1).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let mut e = 0.0f64;
                    for k in 0..2 {
                        e += b2.at2(i, k) as f64 * a1.at2(k, j) as f64;
                    }
                    assert!((dm.at2(i, j) as f64 - e).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn compatibility_report() {
        let a = random_adapter(2, 8, 2.0, "a", 1);
        let b = random_adapter(2, 8, 2.0, "b", 2);
        let r = validate_compatibility(&[&a, &b]);
        assert!(r.mismatches.is_empty());
        assert!(r.linear_eligible && r.concat_eligible);

        let wide = random_adapter(2, 16, 2.0, "wide", 3);
        let r = validate_compatibility(&[&a, &wide]);
        assert_eq!(r.mismatches[0].kind, MismatchKind::HiddenDim);
        assert!(!r.concat_eligible);
        assert!(concat_merge(&MergeSpec::new(vec![&a, &wide], MergeStrategy::Concat)).is_err());

        let r4 = random_adapter(4, 8, 4.0, "r4", 4);
        let r = validate_compatibility(&[&a, &r4]);
        assert_eq!(r.mismatches.len(), 1);
        assert!(r.to_string().ends_with("linear ineligible, concat eligible"));
    }

    #[test]
    fn weights_must_be_positive_and_match() {
        let a = random_adapter(2, 8, 2.0, "a", 1);
        let spec = MergeSpec::new(vec![&a], MergeStrategy::Concat).with_weights(vec![0.0]);
        assert!(matches!(concat_merge(&spec), Err(Error::Config(_))));
        let spec = MergeSpec::new(vec![&a], MergeStrategy::Concat).with_weights(vec![1.0, 1.0]);
        assert!(concat_merge(&spec).is_err());
    }

    #[test]
    fn weight_homogeneity() {
        let a = random_adapter(2, 8, 3.0, "a", 1);
        let b = random_adapter(3, 8, 1.0, "b", 2);
        let w = vec![0.7, 1.3];
        let base = concat_merge(&MergeSpec::new(vec![&a, &b], MergeStrategy::Concat).with_weights(w.clone())).unwrap();
        let c = 2.5;
        let scaled = concat_merge(
            &MergeSpec::new(vec![&a, &b], MergeStrategy::Concat)
                .with_weights(w.iter().map(|x| x * c).collect()),
        )
        .unwrap();
        for &key in base.factors.keys() {
            let d1 = base.effective_delta(key.0, key.1).unwrap();
            let d2 = scaled.effective_delta(key.0, key.1).unwrap();
            let norm = d2.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
            for (x, y) in d1.data().iter().zip(d2.data()) {
                assert!(((*x as f64) * c - *y as f64).abs() <= 1e-6 * norm);
            }
        }
    }
}
