use std::path::{Path, PathBuf};

use base64::Engine;
use rayon::prelude::*;

use super::image::{load_image, load_image_bytes, Decoded, ImageSpec};
use super::manifest::{DatasetManifest, Source, Split};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::multitask::TaskKind;

/// Decoded samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub images: Vec<Tensor>,
    /// Class indices for classification, otherwise empty.
    pub classes: Vec<usize>,
    /// Row-major `len × out_dim` targets for regression, otherwise empty.
    /// Landmark coordinates are divided by the source image's width/height.
    pub values: Vec<f64>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// A manifest decoded into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_name: String,
    pub kind: TaskKind,
    pub class_names: Vec<String>,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Decodes every record; images are processed in parallel.
    /// `base_dir` resolves relative sample paths.
    pub fn from_manifest(manifest: &DatasetManifest, base_dir: Option<&Path>, spec: &ImageSpec) -> Result<Self> {
        manifest.validate()?;
        spec.validate()?;
        let decoded = manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                decode_source(&r.source, base_dir, spec)
                    .map_err(|e| Error::Data(format!("record {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut splits = [empty(), empty(), empty()];
        for (r, d) in manifest.records.iter().zip(decoded) {
            let slot = &mut splits[r.split.expect("validated") as usize];
            match manifest.kind {
                TaskKind::Classification { .. } => slot.classes.push(r.target.class().expect("validated")),
                TaskKind::Landmarks { .. } => {
                    for (j, v) in r.target.values().into_iter().enumerate() {
                        let side = if j % 2 == 0 { d.width } else { d.height };
                        slot.values.push(v / side as f64);
                    }
                }
                TaskKind::Regression { .. } => slot.values.extend(r.target.values()),
            }
            slot.images.push(d.pixels);
        }
        let [train, val, test] = splits;
        Ok(Self {
            task_name: manifest.task_name.clone(),
            kind: manifest.kind,
            class_names: manifest.class_names.clone(),
            train,
            val,
            test,
        })
    }

    /// Reads a manifest file and resolves paths against its directory.
    pub fn load(path: impl AsRef<Path>, spec: &ImageSpec) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        Self::from_manifest(&manifest, path.parent(), spec)
    }

    pub fn require_nonempty(&self) -> Result<()> {
        for s in Split::ALL {
            if self.split(s).is_empty() {
                return Err(Error::Data(format!("task `{}` has an empty {s} split", self.task_name)));
            }
        }
        Ok(())
    }
}

fn empty() -> SplitData {
    SplitData {
        images: Vec::new(),
        classes: Vec::new(),
        values: Vec::new(),
    }
}

fn decode_source(source: &Source, base_dir: Option<&Path>, spec: &ImageSpec) -> Result<Decoded> {
    match source {
        Source::Inline(b64) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| Error::Data(format!("bad base64: {e}")))?;
            load_image_bytes(&bytes, spec)
        }
        Source::Path(p) => {
            let p = PathBuf::from(p);
            let full = match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p,
            };
            load_image(full, spec)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, Family, SyntheticSpec};

    #[test]
    fn landmarks_are_normalized_by_side() {
        let m = generate_synthetic(&SyntheticSpec::new("lm", Family::Landmarks, 10, 1)).unwrap();
        let ds = TaskDataset::from_manifest(&m, None, &ImageSpec::new(8, 3)).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.train.values.len(), 8 * 196);
        assert!(ds.train.values.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(ds.train.images[0].shape(), &[3, 8, 8]);
        ds.require_nonempty().unwrap();
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let img = crate::data::image::encode_png(&Tensor::full([1, 4, 4], 1.0)).unwrap();
        std::fs::write(dir.path().join("a.png"), img).unwrap();
        let mut m = DatasetManifest::new("t", TaskKind::Regression { out_dim: 1 }, vec![]);
        for split in Split::ALL {
            m.records.push(crate::data::manifest::Record {
                source: Source::Path("a.png".into()),
                target: crate::data::manifest::Target::Scalar(2.0),
                split: Some(split),
            });
        }
        m.write(dir.path().join("m.jsonl")).unwrap();
        let ds = TaskDataset::load(dir.path().join("m.jsonl"), &ImageSpec::new(4, 1)).unwrap();
        assert_eq!(ds.test.values, vec![2.0]);
        assert!(ds.test.images[0].data().iter().all(|&v| v == 1.0));
        std::fs::remove_file(dir.path().join("a.png")).unwrap();
        assert!(matches!(
            TaskDataset::load(dir.path().join("m.jsonl"), &ImageSpec::new(4, 1)),
            Err(Error::Data(_))
        ));
    }
}
