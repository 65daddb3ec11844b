//! Synthetic desk-scale scene generator.
//!
//! Each scene is an elliptical-blob world: every present foreground class
//! owns one blob in the ground-truth mask, the matching feature channel
//! carries weak evidence over the whole blob plus strong evidence in a
//! compact core (so one detector can latch onto the part while the other
//! expands to the whole region), and the remaining channels hold distractor
//! blobs uncorrelated with any class. Images color each class blob
//! distinctly over a gray background so color-sensitive refinement has
//! edges to work with. Everything derives from one seed.

use crate::annotation::{PseudoMask, BACKGROUND};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const BASE_FEATURE: f64 = 0.02;
/// Weak class evidence over the whole object.
const RIM_EVIDENCE: f64 = 0.8;
/// Strong class evidence in the compact core (the discriminative part).
const CORE_EVIDENCE: f64 = 6.0;
const CORE_RADIUS_RATIO: f64 = 0.45;
/// Class-agnostic signal covering every object blob.
const OBJECTNESS: f64 = 3.0;
/// Texture present only off the objects.
const BACKGROUND_TEXTURE: f64 = 3.0;
const DISTRACTOR_EVIDENCE: f64 = 1.0;
const IMAGE_BASE: f64 = 120.0;
const IMAGE_NOISE: f64 = 5.0;

const PALETTE: [[f64; 3]; 8] = [
    [200.0, 60.0, 60.0],
    [60.0, 170.0, 60.0],
    [70.0, 90.0, 200.0],
    [210.0, 180.0, 60.0],
    [170.0, 70.0, 190.0],
    [60.0, 180.0, 180.0],
    [230.0, 130.0, 40.0],
    [120.0, 120.0, 220.0],
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Total class count including background (class 0).
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Probability that each foreground class appears in a scene
    /// (conditioned on at least one appearing).
    pub presence_prob: f64,
    /// Blob area as a fraction of the image, sampled uniformly.
    pub area_frac_min: f64,
    pub area_frac_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 200,
            width: 64,
            height: 64,
            num_classes: 4,
            feature_dim: 6,
            noise_sigma: 0.1,
            seed: 7,
            presence_prob: 0.6,
            area_frac_min: 0.05,
            area_frac_max: 0.09,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(Error::Config("scene extent must be at least 4x4".into()));
        }
        if self.num_classes < 2 || self.num_classes > 200 {
            return Err(Error::Config(
                "num_classes must be in 2..=200 (background plus foreground)".into(),
            ));
        }
        if self.feature_dim < self.num_classes - 1 {
            return Err(Error::Config(format!(
                "feature_dim {} must cover the {} evidence channels",
                self.feature_dim,
                self.num_classes - 1
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(self.presence_prob > 0.0 && self.presence_prob <= 1.0) {
            return Err(Error::Config("presence_prob must be in (0, 1]".into()));
        }
        if !(self.area_frac_min > 0.0 && self.area_frac_max < 0.5) || self.area_frac_min > self.area_frac_max {
            return Err(Error::Config("blob area fractions must satisfy 0 < min <= max < 0.5".into()));
        }
        Ok(())
    }

    pub fn num_foreground(&self) -> usize {
        self.num_classes - 1
    }

    /// Expected per-class pixel coverage implied by the configuration:
    /// conditional presence probability times mean blob area fraction.
    pub fn expected_class_pixel_fraction(&self) -> f64 {
        let k = self.num_foreground() as f64;
        let p = self.presence_prob;
        let present_given_any = p / (1.0 - (1.0 - p).powf(k));
        present_given_any * 0.5 * (self.area_frac_min + self.area_frac_max)
    }
}

/// Standard class names for a synthetic dataset: background plus numbered
/// objects.
pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| {
            if c == usize::from(BACKGROUND) {
                "background".to_string()
            } else {
                format!("object-{c}")
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn scaled(&self, ratio: f64) -> Ellipse {
        Ellipse {
            cx: self.cx,
            cy: self.cy,
            rx: self.rx * ratio,
            ry: self.ry * ratio,
        }
    }
}

fn sample_blob(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, placed: &[Ellipse]) -> Ellipse {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let area_frac = rng.gen_range(cfg.area_frac_min..=cfg.area_frac_max);
    let aspect = rng.gen_range(0.6..=1.6);
    let area = area_frac * w * h;
    let mut rx = (area * aspect / std::f64::consts::PI).sqrt();
    let mut ry = rx / aspect;
    rx = rx.min(w / 2.0 - 1.0).max(1.0);
    ry = ry.min(h / 2.0 - 1.0).max(1.0);

    let mut best = Ellipse { cx: w / 2.0, cy: h / 2.0, rx, ry };
    for _attempt in 0..20 {
        let cx = rng.gen_range(rx..=(w - rx));
        let cy = rng.gen_range(ry..=(h - ry));
        best = Ellipse { cx, cy, rx, ry };
        let clear = placed.iter().all(|e| {
            let dx = e.cx - cx;
            let dy = e.cy - cy;
            let min_sep = 0.8 * (e.rx.max(e.ry) + rx.max(ry));
            dx * dx + dy * dy >= min_sep * min_sep
        });
        if clear {
            break;
        }
    }
    best
}

/// One synthetic scene: image, feature map, ground truth, and labels.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// RGB intensities `[h, w, 3]`,integer values in 0..=255.
    pub image: Tensor,
    /// Feature map `[h, w, d]`, nonnegative.
    pub features: Tensor,
    pub gt_mask: PseudoMask,
    /// Present foreground labels, ascending.
    pub labels: Vec<u8>,
    /// Multi-hot vector over the foreground classes.
    pub label_vec: Vec<f64>,
}

/// Generate scene `index` of the configured dataset. Scenes are seeded
/// independently, so any scene can be regenerated without the others.
pub fn generate_scene(cfg: &DatasetConfig, index: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(cfg.seed, &format!("scene/{index}")));
    let k = cfg.num_foreground();
    let (w, h) = (cfg.width, cfg.height);
    let pixels = w * h;

    loop {
        // Present classes, rejection-sampled so at least one appears.
        let present: Vec<bool> = loop {
            let p: Vec<bool> = (0..k).map(|_| rng.gen::<f64>() < cfg.presence_prob).collect();
            if p.iter().any(|&b| b) {
                break p;
            }
        };

        // One blob per present class; later classes overwrite on overlap.
        let mut placed: Vec<Ellipse> = Vec::new();
        let mut blobs: Vec<(u8, Ellipse)> = Vec::new();
        for (ci, &on) in present.iter().enumerate() {
            if !on {
                continue;
            }
            let blob = sample_blob(cfg, &mut rng, &placed);
            placed.push(blob);
            blobs.push((ci as u8 + 1, blob));
        }

        let mut gt = vec![BACKGROUND; pixels];
        for &(label, blob) in &blobs {
            for y in 0..h {
                for x in 0..w {
                    if blob.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        gt[y * w + x] = label;
                    }
                }
            }
        }

        // Overlap can erase a class entirely; labels come from the final mask.
        let mut counts = vec![0usize; k + 1];
        for &g in &gt {
            counts[usize::from(g)] += 1;
        }
        let labels: Vec<u8> = (1..=k as u8).filter(|&l| counts[usize::from(l)] > 0).collect();
        if labels.is_empty() {
            continue;
        }

        // Features: base plus evidence plus distractors plus noise, clamped
        // to stay nonnegative like rectified backbone activations.
        let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        let d = cfg.feature_dim;
        let mut features = vec![BASE_FEATURE; pixels * d];
        for &(label, blob) in &blobs {
            let core = blob.scaled(CORE_RADIUS_RATIO);
            let channel = usize::from(label) - 1;
            for y in 0..h {
                for x in 0..w {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if blob.contains(fx, fy) {
                        let p = y * w + x;
                        features[p * d + channel] += RIM_EVIDENCE;
                        if core.contains(fx, fy) {
                            features[p * d + channel] += CORE_EVIDENCE;
                        }
                        if d > k {
                            features[p * d + k] += OBJECTNESS;
                        }
                    }
                }
            }
        }
        // Non-evidence channels: objectness (filled above), background
        // texture (zero on object blobs), then distractor blobs
        // uncorrelated with any class.
        if d > k + 1 {
            for (p, &g) in gt.iter().enumerate() {
                if g == BACKGROUND {
                    features[p * d + k + 1] += BACKGROUND_TEXTURE;
                }
            }
        }
        for channel in (k + 2)..d {
            let blob = {
                let narrowed = DatasetConfig {
                    area_frac_min: cfg.area_frac_min * 0.6,
                    area_frac_max: cfg.area_frac_max * 0.6,
                    ..cfg.clone()
                };
                sample_blob(&narrowed, &mut rng, &[])
            };
            for y in 0..h {
                for x in 0..w {
                    if blob.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        features[(y * w + x) * d + channel] += DISTRACTOR_EVIDENCE;
                    }
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            for v in features.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).max(0.0);
            }
        }

        // Image: gray background, one palette color per class blob,
        // quantized to integer intensities.
        let mut image = vec![IMAGE_BASE; pixels * 3];
        for (p, &g) in gt.iter().enumerate() {
            if g != BACKGROUND {
                let color = PALETTE[(usize::from(g) - 1) % PALETTE.len()];
                image[p * 3..p * 3 + 3].copy_from_slice(&color);
            }
        }
        let image_noise = Normal::new(0.0, IMAGE_NOISE)
            .map_err(|e| Error::Config(format!("image noise distribution: {e}")))?;
        for v in image.iter_mut() {
            let noisy = *v + image_noise.sample(&mut rng);
            *v = noisy.round().clamp(0.0, 255.0);
        }

        let label_vec: Vec<f64> = (1..=k as u8)
            .map(|l| if labels.contains(&l) { 1.0 } else { 0.0 })
            .collect();
        return Ok(SyntheticScene {
            image: Tensor::new(vec![h, w, 3], image)?,
            features: Tensor::new(vec![h, w, d], features)?,
            gt_mask: PseudoMask::new(w, h, gt)?,
            labels,
            label_vec,
        });
    }
}
