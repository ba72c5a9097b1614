use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::metrics::{evaluate_task, EyeIndices, MetricKind, MetricResult};
use crate::backbone::BackboneWeights;
use crate::data::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::merge::{concat_merge, MergeSpec, MergeStrategy};
use crate::multitask::{MultiTaskModel, TaskHead};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Each adapter alone at every rank, plus the head-only baseline.
    Single,
    /// Every ordered pair `X+Y`, scored on X's task.
    Pairs,
    /// Two fixed bases plus each remaining adapter, scored on all three tasks.
    Triples { bases: [String; 2] },
}

impl GridMode {
    pub fn name(&self) -> &'static str {
        match self {
            GridMode::Single => "single",
            GridMode::Pairs => "pairs",
            GridMode::Triples { .. } => "triples",
        }
    }
}

/// Trained artifacts of one task.
#[derive(Clone, Debug)]
pub struct TaskArtifacts {
    pub dataset: Arc<TaskDataset>,
    /// Adapter and the head trained alongside it, keyed by rank.
    pub adapters: BTreeMap<usize, (LoraAdapter, TaskHead)>,
    pub head_only: Option<TaskHead>,
}

#[derive(Clone, Debug)]
pub struct GridInputs {
    pub backbone: Arc<BackboneWeights>,
    pub tasks: BTreeMap<String, TaskArtifacts>,
    pub ranks: Vec<usize>,
    pub split: Split,
    pub batch_size: usize,
    pub eyes: EyeIndices,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// `None` marks the head-only baseline.
    pub rank: Option<usize>,
    pub metric: MetricKind,
    pub value: f64,
    pub n: usize,
}

/// One adapter combination scored on one task, across ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub combination: Vec<String>,
    pub task_evaluated: String,
    pub cells: Vec<GridCell>,
}

impl GridRow {
    pub fn label(&self) -> String {
        self.combination.join("+")
    }

    pub fn value(&self, rank: Option<usize>, metric: MetricKind) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.rank == rank && c.metric == metric)
            .map(|c| c.value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub mode: GridMode,
    pub backbone_config_hash: String,
    pub ranks: Vec<usize>,
    pub rows: Vec<GridRow>,
    pub metadata: Map<String, Value>,
}

/// One merged model to build and the tasks to score it on.
struct Unit {
    combination: Vec<String>,
    rank: Option<usize>,
    evaluate: Vec<String>,
}

fn plan(mode: &GridMode, inputs: &GridInputs) -> Result<Vec<Unit>> {
    let names: Vec<&String> = inputs.tasks.keys().collect();
    let ranks = || inputs.ranks.iter().map(|&r| Some(r));
    let mut units = Vec::new();
    match mode {
        GridMode::Single => {
            for &t in &names {
                for rank in ranks().chain([None]) {
                    units.push(Unit {
                        combination: vec![t.clone()],
                        rank,
                        evaluate: vec![t.clone()],
                    });
                }
            }
        }
        GridMode::Pairs => {
            if names.len() < 2 {
                return Err(Error::Config("pairs mode needs at least two adapters".into()));
            }
            for &x in &names {
                for &y in names.iter().filter(|&&y| y != x) {
                    for rank in ranks() {
                        units.push(Unit {
                            combination: vec![x.clone(), y.clone()],
                            rank,
                            evaluate: vec![x.clone()],
                        });
                    }
                }
            }
        }
        GridMode::Triples { bases } => {
            if bases[0] == bases[1] {
                return Err(Error::Config("triples mode needs two distinct bases".into()));
            }
            for b in bases {
                if !inputs.tasks.contains_key(b) {
                    return Err(Error::UnknownTask(b.clone()));
                }
            }
            let thirds: Vec<&&String> = names.iter().filter(|t| !bases.contains(t)).collect();
            if thirds.is_empty() {
                return Err(Error::Config("triples mode needs at least one adapter besides the bases".into()));
            }
            for &&t in &thirds {
                let combination = vec![bases[0].clone(), bases[1].clone(), t.clone()];
                for rank in ranks() {
                    units.push(Unit {
                        combination: combination.clone(),
                        rank,
                        evaluate: combination.clone(),
                    });
                }
            }
        }
    }
    Ok(units)
}

fn artifacts<'a>(inputs: &'a GridInputs, task: &str) -> Result<&'a TaskArtifacts> {
    inputs
        .tasks
        .get(task)
        .ok_or_else(|| Error::UnknownTask(task.to_owned()))
}

fn trained<'a>(inputs: &'a GridInputs, task: &str, rank: usize) -> Result<&'a (LoraAdapter, TaskHead)> {
    artifacts(inputs, task)?
        .adapters
        .get(&rank)
        .ok_or_else(|| Error::Config(format!("no rank-{rank} adapter for task `{task}`")))
}

fn run_unit(unit: &Unit, inputs: &GridInputs) -> Result<Vec<(String, Vec<MetricResult>)>> {
    let mut model = match unit.rank {
        Some(r) => {
            let parts = unit
                .combination
                .iter()
                .map(|t| trained(inputs, t, r).map(|(a, _)| a))
                .collect::<Result<Vec<_>>>()?;
            let merged = concat_merge(&MergeSpec::new(parts, MergeStrategy::Concat))?;
            MultiTaskModel::new(inputs.backbone.clone(), Some(merged))?
        }
        None => MultiTaskModel::new(inputs.backbone.clone(), None)?,
    };
    for t in &unit.evaluate {
        let head = match unit.rank {
            Some(r) => trained(inputs, t, r)?.1.clone(),
            None => artifacts(inputs, t)?
                .head_only
                .clone()
                .ok_or_else(|| Error::Config(format!("no head-only baseline for task `{t}`")))?,
        };
        if head.task_name != *t {
            return Err(Error::Config(format!("head for `{t}` is named `{}`", head.task_name)));
        }
        model.add_head(head)?;
    }
    unit.evaluate
        .iter()
        .map(|t| {
            let data = artifacts(inputs, t)?.dataset.split(inputs.split);
            Ok((t.clone(), evaluate_task(&model, t, data, inputs.batch_size, inputs.eyes)?))
        })
        .collect()
}

/// Builds and scores every model the mode calls for. Cells run in parallel;
/// rows come back sorted by combination, then evaluated task.
pub fn run_grid(mode: &GridMode, inputs: &GridInputs) -> Result<GridReport> {
    if inputs.ranks.is_empty() {
        return Err(Error::Config("grid needs at least one rank".into()));
    }
    let units = plan(mode, inputs)?;
    let results = units
        .par_iter()
        .map(|u| run_unit(u, inputs))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: BTreeMap<(Vec<String>, String), Vec<GridCell>> = BTreeMap::new();
    for (unit, per_task) in units.iter().zip(results) {
        for (task, metrics) in per_task {
            let cells = rows.entry((unit.combination.clone(), task)).or_default();
            cells.extend(metrics.into_iter().map(|m| GridCell {
                rank: unit.rank,
                metric: m.metric,
                value: m.value,
                n: m.n,
            }));
        }
    }
    let rows = rows
        .into_iter()
        .map(|((combination, task_evaluated), mut cells)| {
            cells.sort_by_key(|c| (c.rank.is_none(), c.rank, c.metric));
            GridRow {
                combination,
                task_evaluated,
                cells,
            }
        })
        .collect();
    let mut metadata = Map::new();
    metadata.insert("split".into(), json!(inputs.split));
    metadata.insert("ranks".into(), json!(inputs.ranks));
    metadata.insert("merge_strategy".into(), json!("concat"));
    metadata.insert("eye_indices".into(), json!([inputs.eyes.left, inputs.eyes.right]));
    metadata.insert("macro_f1_absent_classes".into(), json!("skipped"));
    metadata.insert("percent_scaled_in_tables".into(), json!(["accuracy", "macro_f1", "nme"]));
    if let GridMode::Triples { bases } = mode {
        metadata.insert("bases".into(), json!(bases));
    }
    Ok(GridReport {
        mode: mode.clone(),
        backbone_config_hash: inputs.backbone.config.hash(),
        ranks: inputs.ranks.clone(),
        rows,
        metadata,
    })
}

fn fmt_value(metric: MetricKind, value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.3}", v * metric.display_scale()),
        None => "-".into(),
    }
}

fn rank_label(rank: Option<usize>) -> String {
    match rank {
        Some(r) => format!("LORA-{r}"),
        None => "Fine tuning head".into(),
    }
}

/// Left-aligned first column, right-aligned values.
fn render_table(title: &str, header: &[String], body: &[Vec<String>]) -> String {
    let cols = header.len();
    let width: Vec<usize> = (0..cols)
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            let pad = width[c] - cell.chars().count();
            if c == 0 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
        }
        s.trim_end().to_owned()
    };
    let mut out = format!("{title}\n{}\n", line(header));
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

impl GridReport {
    /// Rows grouped by evaluated task, in task order.
    pub fn tables(&self) -> BTreeMap<&str, Vec<&GridRow>> {
        let mut out: BTreeMap<&str, Vec<&GridRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.task_evaluated.as_str()).or_default().push(r);
        }
        out
    }

    /// Metrics reported for each task, taken from the cells.
    fn metrics_of(&self, task: &str) -> Vec<MetricKind> {
        let mut m: Vec<MetricKind> = self
            .rows
            .iter()
            .filter(|r| r.task_evaluated == task)
            .flat_map(|r| r.cells.iter().map(|c| c.metric))
            .collect();
        m.sort();
        m.dedup();
        m
    }

    fn rank_columns(&self) -> Vec<Option<usize>> {
        let mut ranks: Vec<Option<usize>> = self.ranks.iter().map(|&r| Some(r)).collect();
        if self.mode == GridMode::Single {
            ranks.push(None);
        }
        ranks
    }

    /// Machine-readable report; one cell per (row, rank, metric).
    pub fn to_json(&self) -> Value {
        let cells: Vec<Value> = self
            .rows
            .iter()
            .flat_map(|r| {
                r.cells.iter().map(move |c| {
                    json!({
                        "combination": r.combination,
                        "rank": c.rank,
                        "task_evaluated": r.task_evaluated,
                        "metric": c.metric,
                        "value": c.value,
                        "n": c.n,
                    })
                })
            })
            .collect();
        let mut metadata = self.metadata.clone();
        metadata.insert("rows".into(), json!(self.rows.len()));
        json!({
            "mode": self.mode.name(),
            "backbone_config_hash": self.backbone_config_hash,
            "cells": cells,
            "metadata": metadata,
        })
    }

    /// Aligned text tables in the layout of the corresponding mode.
    pub fn render(&self) -> String {
        match &self.mode {
            GridMode::Single => self.render_single(),
            GridMode::Pairs => self.render_pairs(),
            GridMode::Triples { bases } => self.render_triples(bases),
        }
    }

    fn render_single(&self) -> String {
        let tasks: Vec<&str> = self.tables().keys().copied().collect();
        let mut header = vec!["Method".to_owned()];
        for t in &tasks {
            for m in self.metrics_of(t) {
                header.push(format!("{t} {}", m.label()));
            }
        }
        let body: Vec<Vec<String>> = self
            .rank_columns()
            .into_iter()
            .map(|rank| {
                let mut row = vec![rank_label(rank)];
                for t in &tasks {
                    let r = self.rows.iter().find(|r| r.task_evaluated == *t);
                    for m in self.metrics_of(t) {
                        row.push(fmt_value(m, r.and_then(|r| r.value(rank, m))));
                    }
                }
                row
            })
            .collect();
        render_table("Single adapters and head-only baseline", &header, &body)
    }

    fn render_pairs(&self) -> String {
        let mut out = String::new();
        for (task, rows) in self.tables() {
            let metrics = self.metrics_of(task);
            let mut header = vec!["Adapters".to_owned()];
            for rank in self.rank_columns() {
                for m in &metrics {
                    header.push(format!("{} {}", rank_label(rank), m.label()));
                }
            }
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut line = vec![r.label()];
                    for rank in self.rank_columns() {
                        for &m in &metrics {
                            line.push(fmt_value(m, r.value(rank, m)));
                        }
                    }
                    line
                })
                .collect();
            let _ = writeln!(out, "{}", render_table(&format!("Merged adapters on {task}"), &header, &body));
        }
        out.trim_end().to_owned() + "\n"
    }

    fn render_triples(&self, bases: &[String; 2]) -> String {
        let mut combos: Vec<&Vec<String>> = self.rows.iter().map(|r| &r.combination).collect();
        combos.dedup();
        let find = |combo: &Vec<String>, task: &str| {
            self.rows
                .iter()
                .find(|r| &r.combination == combo && r.task_evaluated == task)
        };
        let mut header = vec!["Adapters".to_owned()];
        for rank in self.rank_columns() {
            for b in bases {
                for m in self.metrics_of(b) {
                    header.push(format!("{} {b} {}", rank_label(rank), m.label()));
                }
            }
            header.push(format!("{} third task", rank_label(rank)));
        }
        let body: Vec<Vec<String>> = combos
            .iter()
            .map(|combo| {
                let mut line = vec![combo.join("+")];
                for rank in self.rank_columns() {
                    for b in bases {
                        let row = find(combo, b);
                        for m in self.metrics_of(b) {
                            line.push(fmt_value(m, row.and_then(|r| r.value(rank, m))));
                        }
                    }
                    let third = &combo[2];
                    let row = find(combo, third);
                    let parts: Vec<String> = self
                        .metrics_of(third)
                        .into_iter()
                        .map(|m| {
                            let label = m.label().split(' ').next().unwrap_or_default();
                            format!("{label} {}", fmt_value(m, row.and_then(|r| r.value(rank, m))))
                        })
                        .collect();
                    line.push(parts.join(" / "));
                }
                line
            })
            .collect();
        render_table("Three adapter merge", &header, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(combo: &[&str], task: &str, metric: MetricKind) -> GridRow {
        GridRow {
            combination: combo.iter().map(|s| s.to_string()).collect(),
            task_evaluated: task.into(),
            cells: vec![GridCell {
                rank: Some(4),
                metric,
                value: 0.5,
                n: 10,
            }],
        }
    }

    #[test]
    fn json_schema_fields() {
        let report = GridReport {
            mode: GridMode::Pairs,
            backbone_config_hash: "abc".into(),
            ranks: vec![4],
            rows: vec![row(&["a", "b"], "a", MetricKind::Accuracy), row(&["b", "a"], "b", MetricKind::Nme)],
            metadata: Map::new(),
        };
        let v = report.to_json();
        assert_eq!(v["mode"], "pairs");
        let cell = &v["cells"][0];
        for key in ["combination", "rank", "task_evaluated", "metric", "value", "n"] {
            assert!(cell.get(key).is_some(), "{key}");
        }
        assert_eq!(cell["metric"], "accuracy");
        let text = report.render();
        assert!(text.contains("Merged adapters on a") && text.contains("a+b"));
        assert!(text.contains("50.000"));
    }
}
