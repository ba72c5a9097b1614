use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};
use crate::multitask::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a sample's pixels live. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "path")]
    Path(String),
    #[serde(rename = "inline_b64")]
    Inline(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Target {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Target::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Target::Class(c) => vec![*c as f64],
            Target::Scalar(v) => vec![*v],
            Target::Vector(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(flatten)]
    pub source: Source,
    pub target: Target,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    task_name: String,
    kind: TaskKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    class_names: Vec<String>,
}

/// One task's samples. Serialized as JSON lines: a header, then one record
/// per line.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task_name: String,
    pub kind: TaskKind,
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

impl DatasetManifest {
    pub fn new(task_name: impl Into<String>, kind: TaskKind, class_names: Vec<String>) -> Self {
        Self {
            task_name: task_name.into(),
            kind,
            class_names,
            records: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.kind {
            TaskKind::Classification { num_classes } => Some(num_classes),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate().map_err(|e| Error::Data(e.to_string()))?;
        if let Some(k) = self.num_classes() {
            if !self.class_names.is_empty() && self.class_names.len() != k {
                return Err(Error::Data(format!(
                    "{} class names for {k} classes",
                    self.class_names.len()
                )));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            let bad = |what: String| Error::Data(format!("record {i}: {what}"));
            match self.kind {
                TaskKind::Classification { num_classes } => match r.target.class() {
                    Some(c) if c < num_classes => {}
                    Some(c) => return Err(bad(format!("class {c} outside 0..{num_classes}"))),
                    None => return Err(bad("classification target must be a class index".into())),
                },
                kind => {
                    let n = r.target.values().len();
                    if n != kind.out_dim() {
                        return Err(bad(format!("target has {n} values, expected {}", kind.out_dim())));
                    }
                    if r.target.values().iter().any(|v| !v.is_finite()) {
                        return Err(bad("non-finite target".into()));
                    }
                }
            }
            if r.split.is_none() {
                return Err(bad("no split assigned".into()));
            }
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == Some(split)).count()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            if let Some(c) = r.target.class() {
                *counts.entry(c).or_default() += 1;
            }
        }
        counts
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            task_name: self.task_name.clone(),
            kind: self.kind,
            class_names: self.class_names.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Data("manifest is empty".into()))?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| Error::Data(format!("manifest header: {e}")))?;
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<Record>>>()?;
        Ok(Self {
            task_name: header.task_name,
            kind: header.kind,
            class_names: header.class_names,
            records,
        })
    }

    /// Reads a manifest; records without a split get the default ratios.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path).map_err(|e| Error::Data(e.to_string()))?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
        let mut m = Self::from_jsonl(&text)?;
        if m.records.iter().any(|r| r.split.is_none()) {
            m = m.fill_splits(DEFAULT_SPLIT_RATIOS, 0)?;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Assigns a split to every record lacking one, stratified by class for
    /// classification tasks. Existing assignments are kept.
    pub fn fill_splits(&self, ratios: [f64; 3], seed: u64) -> Result<Self> {
        if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
        }
        let mut out = self.clone();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split.is_none() {
                groups.entry(r.target.class().unwrap_or(0)).or_default().push(i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for idx in groups.values_mut() {
            idx.shuffle(&mut rng);
            let quotas = apportion(idx.len(), &ratios);
            let mut it = idx.iter();
            for (split, q) in Split::ALL.iter().zip(quotas) {
                for &i in it.by_ref().take(q) {
                    out.records[i].split = Some(*split);
                }
            }
        }
        Ok(out)
    }
}

/// Splits `n` items into integer parts proportional to `weights` using the
/// largest-remainder rule. Ties go to the earlier part.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - parts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        parts[i] += 1;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let mut m = DatasetManifest::new(
            "t",
            TaskKind::Classification { num_classes: 2 },
            vec!["a".into(), "b".into()],
        );
        for i in 0..20 {
            m.records.push(Record {
                source: Source::Path(format!("img{i}.png")),
                target: Target::Class(i % 2),
                split: None,
            });
        }
        m
    }

    #[test]
    fn jsonl_round_trip_and_line_format() {
        let m = sample().fill_splits(DEFAULT_SPLIT_RATIOS, 3).unwrap();
        let text = m.to_jsonl();
        let second = text.lines().nth(1).unwrap();
        let v: serde_json::Value = serde_json::from_str(second).unwrap();
        assert!(v.get("path").is_some() && v.get("target").is_some() && v.get("split").is_some());
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn default_splits_are_stratified_80_10_10() {
        let m = sample().fill_splits(DEFAULT_SPLIT_RATIOS, 0).unwrap();
        assert_eq!(m.split_len(Split::Train), 16);
        assert_eq!(m.split_len(Split::Val), 2);
        assert_eq!(m.split_len(Split::Test), 2);
        for c in 0..2 {
            let val = m
                .records
                .iter()
                .filter(|r| r.split == Some(Split::Val) && r.target.class() == Some(c))
                .count();
            assert_eq!(val, 1);
        }
        m.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_targets() {
        let mut m = sample().fill_splits(DEFAULT_SPLIT_RATIOS, 0).unwrap();
        m.records[0].target = Target::Class(5);
        assert!(matches!(m.validate(), Err(Error::Data(_))));
        let mut l = DatasetManifest::new("l", TaskKind::Landmarks { num_points: 98 }, vec![]);
        l.records.push(Record {
            source: Source::Inline(String::new()),
            target: Target::Vector(vec![0.0; 195]),
            split: Some(Split::Train),
        });
        assert!(l.validate().is_err());
    }

    #[test]
    fn apportion_sums() {
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1]), vec![8, 1, 1]);
        assert_eq!(apportion(3, &[0.8, 0.1, 0.1]), vec![3, 0, 0]);
        assert_eq!(apportion(5, &[1.0, 1.0]), vec![3, 2]);
    }
}
