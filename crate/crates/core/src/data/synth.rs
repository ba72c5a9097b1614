use std::f64::consts::PI;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::encode_png;
use super::manifest::{DatasetManifest, Record, Source, Target, DEFAULT_SPLIT_RATIOS};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::multitask::TaskKind;

/// Wave vectors (cycles per grating period) for the orientation classes:
/// horizontal, vertical and the two diagonals.
pub const GRATING_DIRECTIONS: [(i32, i32); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
/// Period in pixels of orientation gratings. Equal to the desk patch size, so
/// every patch sees the same pattern.
pub const GRATING_PERIOD: f64 = 4.0;
pub const GRATING_PHASE: f64 = PI / 4.0;
/// Periods in pixels for the frequency classes.
pub const FREQUENCY_PERIODS: [f64; 3] = [2.0, 4.0, 8.0];
pub const LANDMARK_COLS: usize = 14;
pub const LANDMARK_ROWS: usize = 7;
pub const LANDMARK_POINTS: usize = LANDMARK_COLS * LANDMARK_ROWS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Class = grating orientation.
    Gratings,
    /// Class = grating period; shares the grating look with `Gratings`.
    GratingFrequency,
    /// Class = number of bright squares minus one.
    Blobs,
    /// 98 marker dots; target = their pixel coordinates.
    Landmarks,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::from(s))
            .map_err(|_| Error::Config(format!("unknown synthetic family `{s}`")))
    }

    pub fn max_classes(self) -> usize {
        match self {
            Family::Gratings => GRATING_DIRECTIONS.len(),
            Family::GratingFrequency => FREQUENCY_PERIODS.len(),
            Family::Blobs => 4,
            Family::Landmarks => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task_name: String,
    pub family: Family,
    /// Ignored for landmarks.
    pub num_classes: usize,
    pub num_samples: usize,
    pub image_size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(task_name: impl Into<String>, family: Family, num_samples: usize, seed: u64) -> Self {
        Self {
            task_name: task_name.into(),
            family,
            num_classes: family.max_classes().min(2),
            num_samples,
            image_size: 16,
            noise: 0.0,
            seed,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn kind(&self) -> TaskKind {
        match self.family {
            Family::Landmarks => TaskKind::Landmarks { num_points: LANDMARK_POINTS },
            _ => TaskKind::Classification { num_classes: self.num_classes },
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        let n = self.num_classes;
        match self.family {
            Family::Gratings => ["horizontal", "vertical", "diagonal", "anti-diagonal"][..n]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            Family::GratingFrequency => FREQUENCY_PERIODS[..n].iter().map(|p| format!("period-{p}")).collect(),
            Family::Blobs => (1..=n).map(|c| format!("{c}-blobs")).collect(),
            Family::Landmarks => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_samples == 0 {
            return bad("synthetic task needs at least one sample".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.family != Family::Landmarks && !(2..=self.family.max_classes()).contains(&self.num_classes) {
            return bad(format!(
                "{:?} supports 2..={} classes, got {}",
                self.family,
                self.family.max_classes(),
                self.num_classes
            ));
        }
        let min_size = match self.family {
            Family::Blobs => 8,
            Family::Landmarks => 16,
            _ => 8,
        };
        if self.image_size < min_size {
            return bad(format!("image size {} too small for {:?}", self.image_size, self.family));
        }
        Ok(())
    }
}

/// Two tasks over the grating family (orientation and frequency).
pub fn similar_pair(num_samples: usize, seed: u64) -> [SyntheticSpec; 2] {
    [
        SyntheticSpec::new("orientation", Family::Gratings, num_samples, seed),
        SyntheticSpec::new("frequency", Family::GratingFrequency, num_samples, seed.wrapping_add(1)),
    ]
}

/// Two tasks over unrelated families (gratings and blob counts).
pub fn dissimilar_pair(num_samples: usize, seed: u64) -> [SyntheticSpec; 2] {
    [
        SyntheticSpec::new("orientation", Family::Gratings, num_samples, seed),
        SyntheticSpec::new("blobs", Family::Blobs, num_samples, seed.wrapping_add(1)),
    ]
}

/// A quarter of the image side, i.e. one patch at desk scale.
fn blob_side(size: usize) -> usize {
    (size / 4).max(2)
}

fn grating(size: usize, wave: (f64, f64), period: f64, contrast: f64) -> Vec<f64> {
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let phase = 2.0 * PI * (wave.0 * x as f64 + wave.1 * y as f64) / period + GRATING_PHASE;
            px.push(0.5 + 0.5 * contrast * phase.sin());
        }
    }
    px
}

fn blobs(size: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = blob_side(size);
    let mut px = vec![0.0; size * size];
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(count);
    while placed.len() < count {
        let x = rng.random_range(0..=size - side);
        let y = rng.random_range(0..=size - side);
        // Keep at least one background pixel between squares.
        let clear = placed
            .iter()
            .all(|&(px0, py0)| x + side < px0 || px0 + side < x || y + side < py0 || py0 + side < y);
        if clear {
            placed.push((x, y));
        }
    }
    for (x0, y0) in placed {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                px[y * size + x] = 1.0;
            }
        }
    }
    px
}

/// Jittered 14×7 grid, scaled and translated within the frame. Coordinates
/// are continuous with pixel `i` covering `[i, i+1)`.
fn landmark_points(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let width = rng.random_range(0.55..0.8) * s;
    let height = width * 0.6;
    let x0 = rng.random_range(1.0..(s - 1.0 - width));
    let y0 = rng.random_range(1.0..(s - 1.0 - height));
    let dx = width / LANDMARK_COLS as f64;
    let dy = height / LANDMARK_ROWS as f64;
    let mut pts = Vec::with_capacity(2 * LANDMARK_POINTS);
    for r in 0..LANDMARK_ROWS {
        for c in 0..LANDMARK_COLS {
            let jx = rng.random_range(-0.15..0.15) * dx;
            let jy = rng.random_range(-0.15..0.15) * dy;
            pts.push(x0 + (c as f64 + 0.5) * dx + jx);
            pts.push(y0 + (r as f64 + 0.5) * dy + jy);
        }
    }
    pts
}

/// Spreads unit mass over the four pixels nearest each point, so the
/// intensity centroid of an isolated dot is the point itself.
pub fn splat_points(size: usize, points: &[f64]) -> Vec<f64> {
    let mut px = vec![0.0; size * size];
    for p in points.chunks_exact(2) {
        let (u, v) = (p[0] - 0.5, p[1] - 0.5);
        let (xf, yf) = (u.floor(), v.floor());
        let (fx, fy) = (u - xf, v - yf);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (x, y) = (xf as i64 + ox, yf as i64 + oy);
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    px[y as usize * size + x as usize] += wx * wy;
                }
            }
        }
    }
    px
}

/// One image (values in `[0, 1]`, single channel) and its target.
pub fn render_sample(spec: &SyntheticSpec, label: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Target) {
    let size = spec.image_size;
    match spec.family {
        Family::Gratings => {
            let (a, b) = GRATING_DIRECTIONS[label];
            let contrast = rng.random_range(0.6..1.0);
            (grating(size, (a as f64, b as f64), GRATING_PERIOD, contrast), Target::Class(label))
        }
        Family::GratingFrequency => {
            let wave = if rng.random_bool(0.5) { (1.0, 0.0) } else { (0.0, 1.0) };
            let contrast = rng.random_range(0.6..1.0);
            (grating(size, wave, FREQUENCY_PERIODS[label], contrast), Target::Class(label))
        }
        Family::Blobs => (blobs(size, label + 1, rng), Target::Class(label)),
        Family::Landmarks => {
            let pts = landmark_points(size, rng);
            (splat_points(size, &pts), Target::Vector(pts))
        }
    }
}

/// Deterministic manifest with inline PNG images, split 80/10/10.
/// Classification labels cycle through the classes so every class is
/// equally represented.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut manifest = DatasetManifest::new(spec.task_name.clone(), spec.kind(), spec.class_names());
    let classes = spec.num_classes.max(1);
    let engine = base64::engine::general_purpose::STANDARD;
    for i in 0..spec.num_samples {
        let (mut px, target) = render_sample(spec, i % classes, &mut rng);
        if spec.noise > 0.0 {
            for v in &mut px {
                *v += noise.sample(&mut rng);
            }
        }
        let image = Tensor::new(
            [1, spec.image_size, spec.image_size],
            px.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        )?;
        manifest.records.push(Record {
            source: Source::Inline(engine.encode(encode_png(&image)?)),
            target,
            split: None,
        });
    }
    manifest.fill_splits(DEFAULT_SPLIT_RATIOS, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::decode_raw;
    use crate::data::manifest::Split;

    fn pixels(record: &Record) -> Vec<f32> {
        let Source::Inline(b64) = &record.source else { panic!("inline expected") };
        let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
        decode_raw(&bytes, 1).unwrap().into_data()
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::new("b", Family::Blobs, 12, 7).with_noise(0.05);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn blob_count_from_brightness() {
        let spec = SyntheticSpec::new("b", Family::Blobs, 40, 1).with_classes(4);
        let m = generate_synthetic(&spec).unwrap();
        let side = blob_side(16) as f32;
        for r in &m.records {
            let mass: f32 = pixels(r).iter().sum();
            assert_eq!((mass / (side * side)).round() as usize - 1, r.target.class().unwrap());
        }
    }

    #[test]
    fn grating_orientation_from_templates() {
        let spec = SyntheticSpec::new("g", Family::Gratings, 40, 2).with_classes(4);
        let m = generate_synthetic(&spec).unwrap();
        for r in &m.records {
            let px = pixels(r);
            let best = (0..4)
                .map(|k| {
                    let (a, b) = GRATING_DIRECTIONS[k];
                    let t = grating(16, (a as f64, b as f64), GRATING_PERIOD, 1.0);
                    px.iter().zip(&t).map(|(&p, &t)| (p as f64 - 0.5) * (t - 0.5)).sum::<f64>()
                })
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(best, r.target.class().unwrap());
        }
    }

    #[test]
    fn splat_centroid_is_the_point() {
        let px = splat_points(8, &[3.3, 4.9]);
        let mass: f64 = px.iter().sum();
        let cx: f64 = px.iter().enumerate().map(|(i, v)| v * ((i % 8) as f64 + 0.5)).sum::<f64>() / mass;
        let cy: f64 = px.iter().enumerate().map(|(i, v)| v * ((i / 8) as f64 + 0.5)).sum::<f64>() / mass;
        assert!((cx - 3.3).abs() < 1e-12 && (cy - 4.9).abs() < 1e-12);
    }

    #[test]
    fn landmark_targets_and_splits() {
        let spec = SyntheticSpec::new("lm", Family::Landmarks, 10, 3);
        let m = generate_synthetic(&spec).unwrap();
        m.validate().unwrap();
        assert_eq!(m.records[0].target.values().len(), 196);
        assert_eq!(m.split_len(Split::Train), 8);
        for r in &m.records {
            assert!(r.target.values().iter().all(|&v| (0.0..16.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic(&SyntheticSpec::new("g", Family::Gratings, 4, 0).with_classes(5)).is_err());
        assert!(generate_synthetic(&SyntheticSpec::new("g", Family::Gratings, 0, 0)).is_err());
        assert_eq!(Family::parse("grating-frequency").unwrap(), Family::GratingFrequency);
    }
}
