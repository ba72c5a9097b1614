use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{apportion, DatasetManifest, Split, Target};
use crate::error::{Error, Result};
use crate::multitask::TaskKind;

pub const FIRE_RISK_SOURCE_CLASSES: [&str; 7] =
    ["water", "non-burnable", "very-high", "high", "moderate", "low", "very-low"];
pub const FIRE_RISK_CLASSES: [&str; 3] = ["non-burnable", "high", "low"];
pub const AGE_BINS: [&str; 6] = ["0-3", "4-16", "17-30", "31-45", "46-59", "60+"];

/// Accepts `very_high`, `Very High` and `very-high` alike.
fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase().replace(['_', ' '], "-")
}

/// Seven-way fire-risk label to the three merged classes.
pub fn remap_fire_risk(label: &str) -> Result<usize> {
    match normalize_label(label).as_str() {
        "water" | "non-burnable" => Ok(0),
        "very-high" | "high" | "moderate" => Ok(1),
        "low" | "very-low" => Ok(2),
        _ => Err(Error::Data(format!("unknown fire-risk label `{label}`"))),
    }
}

/// Applies [`remap_fire_risk`] through the manifest's class names.
pub fn remap_fire_risk_manifest(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    let k = manifest
        .num_classes()
        .ok_or_else(|| Error::Data("fire-risk remap needs a classification manifest".into()))?;
    if manifest.class_names.len() != k {
        return Err(Error::Data("fire-risk remap needs class names".into()));
    }
    let table = manifest
        .class_names
        .iter()
        .map(|n| remap_fire_risk(n))
        .collect::<Result<Vec<_>>>()?;
    let mut out = DatasetManifest::new(
        manifest.task_name.clone(),
        TaskKind::Classification { num_classes: 3 },
        FIRE_RISK_CLASSES.iter().map(|s| s.to_string()).collect(),
    );
    for r in &manifest.records {
        let c = class_of(&r.target)?;
        let mut r = r.clone();
        r.target = Target::Class(table[c]);
        out.records.push(r);
    }
    Ok(out)
}

/// Age in years to one of the six bins; both bin edges are inclusive.
pub fn bin_age(age: i64) -> Result<usize> {
    match age {
        a if a < 0 => Err(Error::Data(format!("negative age {a}"))),
        0..=3 => Ok(0),
        4..=16 => Ok(1),
        17..=30 => Ok(2),
        31..=45 => Ok(3),
        46..=59 => Ok(4),
        _ => Ok(5),
    }
}

/// Turns a one-dimensional age regression manifest into the six-way
/// classification manifest.
pub fn bin_age_manifest(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    if manifest.kind != (TaskKind::Regression { out_dim: 1 }) {
        return Err(Error::Data("age binning needs a 1-D regression manifest".into()));
    }
    let mut out = DatasetManifest::new(
        manifest.task_name.clone(),
        TaskKind::Classification { num_classes: AGE_BINS.len() },
        AGE_BINS.iter().map(|s| s.to_string()).collect(),
    );
    for r in &manifest.records {
        let age = r.target.values()[0];
        if age.fract() != 0.0 {
            return Err(Error::Data(format!("age {age} is not a whole number of years")));
        }
        let mut r = r.clone();
        r.target = Target::Class(bin_age(age as i64)?);
        out.records.push(r);
    }
    Ok(out)
}

fn class_of(t: &Target) -> Result<usize> {
    t.class()
        .ok_or_else(|| Error::Data("expected a class-index target".into()))
}

/// Caps every class at `per_class_cap` records, sampling uniformly and keeping
/// each class's split proportions. Record order is preserved.
pub fn downsample_balanced(manifest: &DatasetManifest, per_class_cap: usize, seed: u64) -> Result<DatasetManifest> {
    if per_class_cap == 0 {
        return Err(Error::Config("per-class cap must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(class_of(&r.target)?).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.records.len()];
    for idx in by_class.values() {
        if idx.len() <= per_class_cap {
            idx.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        let mut per_split: BTreeMap<Option<Split>, Vec<usize>> = BTreeMap::new();
        for &i in idx {
            per_split.entry(manifest.records[i].split).or_default().push(i);
        }
        let sizes: Vec<f64> = per_split.values().map(|v| v.len() as f64).collect();
        let quotas = apportion(per_class_cap, &sizes);
        for (members, q) in per_split.values_mut().zip(quotas) {
            members.shuffle(&mut rng);
            members.iter().take(q).for_each(|&i| keep[i] = true);
        }
    }
    let mut out = manifest.clone();
    out.records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    Ok(out)
}

/// Removes one class and renumbers the rest to `0..k-1` in their original
/// order.
pub fn drop_class(manifest: &DatasetManifest, class_name: &str) -> Result<DatasetManifest> {
    let k = manifest
        .num_classes()
        .ok_or_else(|| Error::Data("drop_class needs a classification manifest".into()))?;
    let dropped = manifest
        .class_names
        .iter()
        .position(|n| n == class_name)
        .ok_or_else(|| Error::Data(format!("unknown class `{class_name}`")))?;
    if k < 2 {
        return Err(Error::Data("cannot drop the only class".into()));
    }
    let mut out = DatasetManifest::new(
        manifest.task_name.clone(),
        TaskKind::Classification { num_classes: k - 1 },
        manifest
            .class_names
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != dropped)
            .map(|(_, n)| n.clone())
            .collect(),
    );
    for r in &manifest.records {
        let c = class_of(&r.target)?;
        if c == dropped {
            continue;
        }
        let mut r = r.clone();
        r.target = Target::Class(if c > dropped { c - 1 } else { c });
        out.records.push(r);
    }
    Ok(out)
}
