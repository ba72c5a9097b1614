use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneWeights;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};
use crate::lora::LoraAdapter;

use super::{MultiTaskModel, TaskHead, TaskKind};

const FORMAT: &str = "bundle-v1";
const MANIFEST: &str = "bundle.json";
const BACKBONE: &str = "backbone.ltns";
const ADAPTER: &str = "adapter.ltns";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleTask {
    pub name: String,
    pub kind: TaskKind,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub backbone_config_hash: String,
    pub backbone_checksum: String,
    pub adapter: Option<String>,
    pub tasks: Vec<BundleTask>,
}

/// Everything needed to serve several tasks from one directory.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub backbone: BackboneWeights,
    pub adapter: Option<LoraAdapter>,
    pub heads: Vec<TaskHead>,
}

fn head_file(task: &str) -> String {
    format!("heads/{task}.ltns")
}

impl Bundle {
    /// Writes every container first and the manifest last, so a directory
    /// with a manifest is always complete.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<BundleManifest> {
        let dir = dir.as_ref();
        if let Some(a) = &self.adapter {
            a.check_backbone(&self.backbone.config)?;
        }
        self.backbone.save(dir.join(BACKBONE))?;
        if let Some(a) = &self.adapter {
            a.save(dir.join(ADAPTER))?;
        }
        let mut tasks = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            if head.task_name.is_empty() || head.task_name.contains(['/', '\\']) {
                return Err(Error::Config(format!("task name `{}` is not a valid file name", head.task_name)));
            }
            let file = head_file(&head.task_name);
            head.save(dir.join(&file))?;
            tasks.push(BundleTask {
                name: head.task_name.clone(),
                kind: head.kind,
                file,
            });
        }
        let manifest = BundleManifest {
            format: FORMAT.into(),
            backbone_config_hash: self.backbone.config.hash(),
            backbone_checksum: self.backbone.checksum(),
            adapter: self.adapter.as_ref().map(|_| ADAPTER.into()),
            tasks,
        };
        write_json_atomic(dir.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: BundleManifest = read_json(dir.join(MANIFEST))?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!(
                "expected bundle format `{FORMAT}`, found `{}`",
                manifest.format
            )));
        }
        let backbone = BackboneWeights::load(dir.join(BACKBONE))?;
        if backbone.checksum() != manifest.backbone_checksum {
            return Err(Error::Format("bundle backbone checksum does not match its manifest".into()));
        }
        let adapter = manifest
            .adapter
            .as_ref()
            .map(|f| LoraAdapter::load(dir.join(f)))
            .transpose()?;
        let mut heads = Vec::with_capacity(manifest.tasks.len());
        for t in &manifest.tasks {
            let head = TaskHead::load(dir.join(&t.file))?;
            if head.task_name != t.name || head.kind != t.kind {
                return Err(Error::Format(format!(
                    "head file `{}` does not match manifest entry `{}`",
                    t.file, t.name
                )));
            }
            heads.push(head);
        }
        Ok(Self {
            backbone,
            adapter,
            heads,
        })
    }

    pub fn into_model(self) -> Result<MultiTaskModel> {
        let mut model = MultiTaskModel::new(Arc::new(self.backbone), self.adapter)?;
        for head in self.heads {
            model.add_head(head)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::lora::LoraConfig;

    #[test]
    fn round_trip() {
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
        let backbone = BackboneWeights::init(&cfg, 4).unwrap();
        let adapter = LoraAdapter::init(&LoraConfig::new(2), &cfg, "a+b", 1).unwrap();
        let heads = vec![
            TaskHead::init("a", TaskKind::Classification { num_classes: 3 }, 8, 4, 1).unwrap(),
            TaskHead::init("b", TaskKind::Landmarks { num_points: 2 }, 8, 4, 2).unwrap(),
        ];
        let bundle = Bundle {
            backbone,
            adapter: Some(adapter),
            heads,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = bundle.save(dir.path()).unwrap();
        assert_eq!(manifest.tasks.len(), 2);
        let back = Bundle::load(dir.path()).unwrap();
        assert_eq!(back.adapter, bundle.adapter);
        assert_eq!(back.heads, bundle.heads);
        assert_eq!(back.backbone.checksum(), bundle.backbone.checksum());
        let model = back.into_model().unwrap();
        assert_eq!(model.heads().len(), 2);
    }
}
