//! ViT-style encoder with LoRA hook points on the key and value projections.
//!
//! Pre-norm blocks: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`. The pooled
//! feature is `tanh(dense(ln_f(x)[cls]))`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Tensor, Var};
use crate::container::Container;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;
const FORMAT: &str = "backbone-v1";

/// Attention projections that LoRA may target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 2] = [Projection::Key, Projection::Value];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Key => "key",
            Projection::Value => "value",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "key" | "k" => Ok(Projection::Key),
            "value" | "v" => Ok(Projection::Value),
            other => Err(Error::Config(format!("unknown projection `{other}`"))),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooler {
    #[default]
    ClsTanh,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    #[serde(default)]
    pub pooler: Pooler,
}

impl BackboneConfig {
    /// ViT-Base geometry.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_dim: 3072,
            pooler: Pooler::ClsTanh,
        }
    }

    /// Small geometry used for laptop-scale experiments.
    pub fn desk_scale() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 64,
            pooler: Pooler::ClsTanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Short stable fingerprint of the geometry.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }
}

/// Splits a `C×H×W` image into flattened non-overlapping patches.
///
/// Patches are scanned row by row from the top-left; each patch is laid out
/// channel-major, then row-major within the channel.
pub fn patchify(image: &Tensor, config: &BackboneConfig) -> Result<Tensor> {
    let (c, s, p) = (config.channels, config.image_size, config.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::Config(format!(
            "image has shape {:?}, backbone expects [{c}, {s}, {s}]",
            image.shape()
        )));
    }
    let per_side = s / p;
    let data = image.data();
    let mut out = Vec::with_capacity(data.len());
    for py in 0..per_side {
        for px in 0..per_side {
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * s * s + (py * p + dy) * s + px * p;
                    out.extend_from_slice(&data[row..row + p]);
                }
            }
        }
    }
    Tensor::new([per_side * per_side, config.patch_dim()], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: trunc_normal([out_dim, in_dim], INIT_STD, rng),
            bias: Tensor::zeros([out_dim]),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.constant(&self.weight);
        let b = g.constant(&self.bias);
        let y = g.matmul_nt(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn init(dim: usize) -> Self {
        Self {
            gain: Tensor::full([dim], 1.0),
            bias: Tensor::zeros([dim]),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.constant(&self.gain);
        let bias = g.constant(&self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        }
    }

    fn projection_mut(&mut self, p: Projection) -> &mut Linear {
        match p {
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
        }
    }
}

/// Low-rank factors of one adapter placed on a graph.
///
/// Each entry maps `(layer, projection)` to `(A: r×d, B: d×r)`; the
/// projection then computes `W·x + b + scale·B·(A·x)`.
#[derive(Clone, Debug, Default)]
pub struct LoraBinding {
    pub scale: f64,
    pub factors: BTreeMap<(usize, Projection), (Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    /// `d × patch_dim`
    pub patch_embed: Linear,
    /// `d`
    pub cls_token: Tensor,
    /// `(num_patches + 1) × d`, class token slot first.
    pub pos_embed: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Norm,
    pub pooler: Linear,
}

fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break (z * std) as f32;
        }
    })
}

impl BackboneWeights {
    /// Random initialization: truncated normal (±2σ, σ = 0.02), zero biases,
    /// unit norm gains.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let patch_embed = Linear::init(d, config.patch_dim(), &mut rng);
        let cls_token = trunc_normal([d], INIT_STD, &mut rng);
        let pos_embed = trunc_normal([config.num_tokens(), d], INIT_STD, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                norm1: Norm::init(d),
                query: Linear::init(d, d, &mut rng),
                key: Linear::init(d, d, &mut rng),
                value: Linear::init(d, d, &mut rng),
                output: Linear::init(d, d, &mut rng),
                norm2: Norm::init(d),
                fc1: Linear::init(config.mlp_dim, d, &mut rng),
                fc2: Linear::init(d, config.mlp_dim, &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_norm: Norm::init(d),
            pooler: Linear::init(d, d, &mut rng),
        })
    }

    fn expected_shapes(config: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.hidden_dim;
        let mut out = vec![
            ("patch_embed.weight".to_owned(), vec![d, config.patch_dim()]),
            ("patch_embed.bias".to_owned(), vec![d]),
            ("cls_token".to_owned(), vec![d]),
            ("pos_embed".to_owned(), vec![config.num_tokens(), d]),
            ("final_norm.gain".to_owned(), vec![d]),
            ("final_norm.bias".to_owned(), vec![d]),
            ("pooler.dense.weight".to_owned(), vec![d, d]),
            ("pooler.dense.bias".to_owned(), vec![d]),
        ];
        for l in 0..config.num_layers {
            for (name, shape) in [
                ("norm1.gain", vec![d]),
                ("norm1.bias", vec![d]),
                ("attn.query.weight", vec![d, d]),
                ("attn.query.bias", vec![d]),
                ("attn.key.weight", vec![d, d]),
                ("attn.key.bias", vec![d]),
                ("attn.value.weight", vec![d, d]),
                ("attn.value.bias", vec![d]),
                ("attn.output.weight", vec![d, d]),
                ("attn.output.bias", vec![d]),
                ("norm2.gain", vec![d]),
                ("norm2.bias", vec![d]),
                ("mlp.fc1.weight", vec![config.mlp_dim, d]),
                ("mlp.fc1.bias", vec![config.mlp_dim]),
                ("mlp.fc2.weight", vec![d, config.mlp_dim]),
                ("mlp.fc2.bias", vec![d]),
            ] {
                out.push((format!("layer.{l}.{name}"), shape));
            }
        }
        out
    }

    pub fn to_container(&self) -> Container {
        let mut meta = Map::new();
        meta.insert("format".into(), Value::from(FORMAT));
        meta.insert(
            "config".into(),
            serde_json::to_value(&self.config).expect("config serialises"),
        );
        let mut c = Container::new(meta);
        let linear = |c: &mut Container, prefix: &str, lin: &Linear| {
            c.insert(format!("{prefix}.weight"), lin.weight.clone());
            c.insert(format!("{prefix}.bias"), lin.bias.clone());
        };
        let norm = |c: &mut Container, prefix: &str, n: &Norm| {
            c.insert(format!("{prefix}.gain"), n.gain.clone());
            c.insert(format!("{prefix}.bias"), n.bias.clone());
        };
        linear(&mut c, "patch_embed", &self.patch_embed);
        c.insert("cls_token", self.cls_token.clone());
        c.insert("pos_embed", self.pos_embed.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            norm(&mut c, &format!("layer.{l}.norm1"), &layer.norm1);
            linear(&mut c, &format!("layer.{l}.attn.query"), &layer.query);
            linear(&mut c, &format!("layer.{l}.attn.key"), &layer.key);
            linear(&mut c, &format!("layer.{l}.attn.value"), &layer.value);
            linear(&mut c, &format!("layer.{l}.attn.output"), &layer.output);
            norm(&mut c, &format!("layer.{l}.norm2"), &layer.norm2);
            linear(&mut c, &format!("layer.{l}.mlp.fc1"), &layer.fc1);
            linear(&mut c, &format!("layer.{l}.mlp.fc2"), &layer.fc2);
        }
        norm(&mut c, "final_norm", &self.final_norm);
        linear(&mut c, "pooler.dense", &self.pooler);
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_format(FORMAT)?;
        let config: BackboneConfig = serde_json::from_value(
            c.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Format("metadata field `config` missing".into()))?,
        )
        .map_err(|e| Error::Format(format!("bad backbone config: {e}")))?;
        config.validate()?;
        // Check presence and shape of everything up front so errors name the
        // first offending tensor in a stable order.
        for (name, shape) in Self::expected_shapes(&config) {
            let t = c.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        let mut take = |name: &str| -> Tensor { c.tensors.remove(name).expect("checked above") };
        let linear = |take: &mut dyn FnMut(&str) -> Tensor, prefix: &str| Linear {
            weight: take(&format!("{prefix}.weight")),
            bias: take(&format!("{prefix}.bias")),
        };
        let norm = |take: &mut dyn FnMut(&str) -> Tensor, prefix: &str| Norm {
            gain: take(&format!("{prefix}.gain")),
            bias: take(&format!("{prefix}.bias")),
        };
        let patch_embed = linear(&mut take, "patch_embed");
        let cls_token = take("cls_token");
        let pos_embed = take("pos_embed");
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(EncoderLayer {
                norm1: norm(&mut take, &format!("layer.{l}.norm1")),
                query: linear(&mut take, &format!("layer.{l}.attn.query")),
                key: linear(&mut take, &format!("layer.{l}.attn.key")),
                value: linear(&mut take, &format!("layer.{l}.attn.value")),
                output: linear(&mut take, &format!("layer.{l}.attn.output")),
                norm2: norm(&mut take, &format!("layer.{l}.norm2")),
                fc1: linear(&mut take, &format!("layer.{l}.mlp.fc1")),
                fc2: linear(&mut take, &format!("layer.{l}.mlp.fc2")),
            });
        }
        let final_norm = norm(&mut take, "final_norm");
        let pooler = linear(&mut take, "pooler.dense");
        if let Some(extra) = c.tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}` in backbone file")));
        }
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            layers,
            final_norm,
            pooler,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    /// SHA-256 of the serialized weights, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_container().to_bytes()))
    }

    pub fn param_count(&self) -> usize {
        self.to_container().float_count()
    }

    /// Copy with dense `d×d` deltas folded into the targeted projection
    /// weights.
    pub fn with_dense_deltas(&self, deltas: &BTreeMap<(usize, Projection), Tensor>) -> Result<Self> {
        let mut out = self.clone();
        let d = self.config.hidden_dim;
        for (&(layer, proj), delta) in deltas {
            let lin = out
                .layers
                .get_mut(layer)
                .ok_or_else(|| Error::Lookup {
                    layer,
                    projection: proj.to_string(),
                })?
                .projection_mut(proj);
            if delta.shape() != [d, d] {
                return Err(Error::dim("with_dense_deltas", &[d, d], delta.shape()));
            }
            lin.weight
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(w, dw)| *w += dw);
        }
        Ok(out)
    }

    fn projection(
        &self,
        g: &mut Graph,
        h: Var,
        layer: usize,
        proj: Projection,
        lora: Option<&LoraBinding>,
    ) -> Result<Var> {
        let base = self.layers[layer].projection(proj).apply(g, h)?;
        let Some((a, b)) = lora.and_then(|l| l.factors.get(&(layer, proj))) else {
            return Ok(base);
        };
        let scale = lora.map(|l| l.scale).unwrap_or(1.0);
        let ax = g.matmul_nt(h, *a)?;
        let bax = g.matmul_nt(ax, *b)?;
        let delta = g.scale(bax, scale);
        g.add(base, delta)
    }

    fn check_binding(&self, g: &Graph, lora: &LoraBinding) -> Result<()> {
        let d = self.config.hidden_dim;
        for (&(layer, proj), &(a, b)) in &lora.factors {
            if layer >= self.config.num_layers {
                return Err(Error::AdapterMismatch {
                    layer,
                    projection: proj.to_string(),
                    detail: format!("backbone has only {} layers", self.config.num_layers),
                });
            }
            let (sa, sb) = (g.shape(a), g.shape(b));
            let ok = sa.len() == 2 && sb.len() == 2 && sa[1] == d && sb[0] == d && sa[0] == sb[1];
            if !ok {
                return Err(Error::AdapterMismatch {
                    layer,
                    projection: proj.to_string(),
                    detail: format!("factor shapes A {sa:?}, B {sb:?} do not fit hidden_dim {d}"),
                });
            }
        }
        Ok(())
    }

    /// Builds the encoder on `g` for a batch of `C×H×W` images and returns
    /// the pooled `batch × d` features.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        images: &[Tensor],
        lora: Option<&LoraBinding>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if images.is_empty() {
            return Err(Error::Contract("forward called with an empty batch".into()));
        }
        if let Some(binding) = lora {
            self.check_binding(g, binding)?;
        }
        let batch = images.len();
        let (n, t, d) = (cfg.num_patches(), cfg.num_tokens(), cfg.hidden_dim);

        let mut patch_values = Vec::with_capacity(batch * n * cfg.patch_dim());
        for image in images {
            patch_values.extend(patchify(image, cfg)?.data().iter().map(|&v| v as f64));
        }
        let patches = g.constant_f64(vec![batch * n, cfg.patch_dim()], patch_values)?;
        let embedded = self.patch_embed.apply(g, patches)?;
        let cls = g.constant_f64(vec![1, d], self.cls_token.data().iter().map(|&v| v as f64).collect())?;
        let pos = g.constant(&self.pos_embed);
        let mut sequences = Vec::with_capacity(batch);
        for i in 0..batch {
            let p = g.rows(embedded, i * n..(i + 1) * n)?;
            let seq = g.concat_rows(&[cls, p])?;
            sequences.push(g.add(seq, pos)?);
        }
        let mut x = g.concat_rows(&sequences)?;

        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let attn_scale = 1.0 / (dh as f64).sqrt();
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.norm1.apply(g, x)?;
            let q = layer.query.apply(g, h)?;
            let k = self.projection(g, h, l, Projection::Key, lora)?;
            let v = self.projection(g, h, l, Projection::Value, lora)?;
            let mut per_sample = Vec::with_capacity(batch);
            for i in 0..batch {
                let rows = i * t..(i + 1) * t;
                let mut per_head = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let qh = g.slice(q, rows.clone(), cols.clone())?;
                    let kh = g.slice(k, rows.clone(), cols.clone())?;
                    let vh = g.slice(v, rows.clone(), cols)?;
                    let scores = g.matmul_nt(qh, kh)?;
                    let scores = g.scale(scores, attn_scale);
                    let probs = g.softmax_rows(scores)?;
                    per_head.push(g.matmul(probs, vh)?);
                }
                per_sample.push(g.concat_cols(&per_head)?);
            }
            let attn = g.concat_rows(&per_sample)?;
            let attn = layer.output.apply(g, attn)?;
            x = g.add(x, attn)?;

            let h = layer.norm2.apply(g, x)?;
            let m = layer.fc1.apply(g, h)?;
            let m = g.gelu(m);
            let m = layer.fc2.apply(g, m)?;
            x = g.add(x, m)?;
        }
        let x = self.final_norm.apply(g, x)?;
        let cls_rows = (0..batch)
            .map(|i| g.rows(x, i * t..i * t + 1))
            .collect::<Result<Vec<_>>>()?;
        let cls_state = g.concat_rows(&cls_rows)?;
        let dense = self.pooler.apply(g, cls_state)?;
        Ok(g.tanh(dense))
    }

    /// Pooled features for a batch, optionally with an adapter active.
    pub fn forward(
        &self,
        images: &[Tensor],
        adapter: Option<&crate::lora::LoraAdapter>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let binding = match adapter {
            Some(a) => {
                a.check_backbone(&self.config)?;
                Some(a.bind(&mut g, false))
            }
            None => None,
        };
        let out = self.forward_graph(&mut g, images, binding.as_ref())?;
        Ok(g.value(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 16,
            pooler: Pooler::ClsTanh,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        assert!(c.validate().is_ok());
        c.image_size = 10;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::paper_scale().validate().is_ok());
        assert_eq!(BackboneConfig::paper_scale().num_patches(), 196);
    }

    #[test]
    fn patchify_single_patch_is_pixel_order() {
        let cfg = BackboneConfig {
            image_size: 4,
            patch_size: 4,
            ..tiny()
        };
        let img = Tensor::from_fn([1, 4, 4], |i| i as f32);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 16]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patchify_index_arithmetic() {
        let cfg = BackboneConfig {
            image_size: 4,
            patch_size: 2,
            ..tiny()
        };
        let img = Tensor::from_fn([1, 4, 4], |i| i as f32);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        // brute-force oracle: patch (py, px) pixel (dy, dx) = image[(2py+dy)*4 + 2px+dx]
        for py in 0..2 {
            for px in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let expected = ((2 * py + dy) * 4 + 2 * px + dx) as f32;
                        assert_eq!(p.at2(py * 2 + px, dy * 2 + dx), expected);
                    }
                }
            }
        }
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn patchify_shape_and_errors() {
        let cfg = BackboneConfig {
            image_size: 6,
            patch_size: 2,
            channels: 3,
            ..tiny()
        };
        let p = patchify(&Tensor::zeros([3, 6, 6]), &cfg).unwrap();
        assert_eq!(p.shape(), &[9, 12]);
        assert!(matches!(
            patchify(&Tensor::zeros([3, 8, 8]), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_shape_and_determinism() {
        let w = BackboneWeights::init(&tiny(), 3).unwrap();
        let imgs: Vec<Tensor> = (0..3)
            .map(|s| Tensor::from_fn([1, 8, 8], |i| ((i * 7 + s * 13) % 11) as f32 / 11.0 - 0.5))
            .collect();
        let a = w.forward(&imgs, None).unwrap();
        let b = w.forward(&imgs, None).unwrap();
        assert_eq!(a.shape(), &[3, 8]);
        assert!(a.bitwise_eq(&b));
        // batching does not mix samples
        for (i, img) in imgs.iter().enumerate() {
            let single = w.forward(std::slice::from_ref(img), None).unwrap();
            for j in 0..8 {
                assert!((single.at2(0, j) - a.at2(i, j)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn load_reports_missing_and_misshapen_tensors() {
        let w = BackboneWeights::init(&tiny(), 1).unwrap();
        let mut c = w.to_container();
        c.tensors.remove("pooler.dense.weight");
        let err = BackboneWeights::from_container(c).unwrap_err();
        assert!(matches!(&err, Error::MissingTensor(n) if n == "pooler.dense.weight"), "{err}");

        let mut c = w.to_container();
        c.insert("layer.0.attn.key.bias", Tensor::zeros([7]));
        match BackboneWeights::from_container(c).unwrap_err() {
            Error::TensorShape { name, expected, found } => {
                assert_eq!(name, "layer.0.attn.key.bias");
                assert_eq!(expected, vec![8]);
                assert_eq!(found, vec![7]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ltns");
        let w = BackboneWeights::init(&tiny(), 9).unwrap();
        w.save(&path).unwrap();
        let back = BackboneWeights::load(&path).unwrap();
        assert_eq!(back.to_container().to_bytes(), w.to_container().to_bytes());
        assert_eq!(back.checksum(), w.checksum());
    }
}
