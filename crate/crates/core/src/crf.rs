//! Mean-field inference for a fully connected pairwise CRF.
//!
//! Pairwise potentials combine a bilateral kernel (spatial distance plus
//! color distance) and a pure spatial smoothness kernel, with Potts
//! compatibility. Message passing is exact over all pixel pairs -- at desk
//! scale (<= 128x128) the O(N^2) sweep is cheaper than approximate lattice
//! machinery. For small images the symmetric kernel matrix is precomputed
//! once; larger images fall back to evaluating kernels on the fly with an
//! identical summation order, so both paths produce identical bits.

use crate::annotation::ProbField;
use crate::annotation::PseudoMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const UNARY_CLAMP: f64 = 1e-10;
/// Kernel matrices beyond this many bytes are recomputed per iteration.
const KERNEL_CACHE_LIMIT_BYTES: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    pub n_iters: usize,
    /// Bilateral (appearance) kernel weight w1.
    pub bilateral_weight: f64,
    /// Bilateral spatial standard deviation, pixels.
    pub spatial_std: f64,
    /// Bilateral color standard deviation, intensity units.
    pub color_std: f64,
    /// Smoothness kernel weight w2.
    pub smoothness_weight: f64,
    /// Smoothness spatial standard deviation, pixels.
    pub smoothness_std: f64,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            n_iters: 5,
            bilateral_weight: 10.0,
            spatial_std: 8.0,
            color_std: 13.0,
            smoothness_weight: 3.0,
            smoothness_std: 3.0,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Config("n_iters must be >= 1".into()));
        }
        if self.bilateral_weight < 0.0 || self.smoothness_weight < 0.0 {
            return Err(Error::Config("kernel weights must be >= 0".into()));
        }
        if !(self.spatial_std > 0.0 && self.color_std > 0.0 && self.smoothness_std > 0.0) {
            return Err(Error::Config("kernel standard deviations must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel label distributions over the image's present classes.
#[derive(Debug, Clone)]
pub struct Marginals {
    width: usize,
    height: usize,
    num_labels: usize,
    values: Vec<f64>,
}

impl Marginals {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.num_labels;
        &self.values[base..base + self.num_labels]
    }
}

/// A probability field compacted to the image's present classes, column
/// `l` carrying the global label `labels[l]`.
#[derive(Debug, Clone)]
pub struct Unary {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    probs: Vec<f64>,
}

impl Unary {
    /// Restrict a full [`ProbField`] to the given present classes.
    pub fn from_prob_field(field: &ProbField, present: &[u8]) -> Result<Self> {
        let mut labels = present.to_vec();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::Data("unary needs at least two labels".into()));
        }
        if labels.iter().any(|&l| usize::from(l) >= field.num_classes()) {
            return Err(Error::Data("present label outside probability field".into()));
        }
        let pixels = field.width() * field.height();
        let c = field.num_classes();
        let l = labels.len();
        let mut probs = vec![0.0; pixels * l];
        for p in 0..pixels {
            for (li, &lab) in labels.iter().enumerate() {
                probs[p * l + li] = field.values()[p * c + usize::from(lab)];
            }
        }
        Ok(Unary {
            width: field.width(),
            height: field.height(),
            labels,
            probs,
        })
    }

    pub fn new(width: usize, height: usize, labels: Vec<u8>, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != width * height * labels.len() {
            return Err(Error::Shape("unary extents do not match".into()));
        }
        if labels.len() < 2 {
            return Err(Error::Data("unary needs at least two labels".into()));
        }
        Ok(Unary {
            width,
            height,
            labels,
            probs,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[inline]
fn pair_kernel(
    xi: f64,
    yi: f64,
    xj: f64,
    yj: f64,
    ci: &[f64],
    cj: &[f64],
    cfg: &CrfConfig,
) -> f64 {
    let dx = xi - xj;
    let dy = yi - yj;
    let d2 = dx * dx + dy * dy;
    let dr = ci[0] - cj[0];
    let dg = ci[1] - cj[1];
    let db = ci[2] - cj[2];
    let c2 = dr * dr + dg * dg + db * db;
    let denom_a = 2.0 * cfg.spatial_std * cfg.spatial_std;
    let denom_b = 2.0 * cfg.color_std * cfg.color_std;
    let denom_g = 2.0 * cfg.smoothness_std * cfg.smoothness_std;
    cfg.bilateral_weight * (-(d2 / denom_a) - (c2 / denom_b)).exp()
        + cfg.smoothness_weight * (-(d2 / denom_g)).exp()
}

fn softmax_neg_energy(energy: &[f64], out: &mut [f64]) {
    let mx = energy.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (o, &e) in out.iter_mut().zip(energy) {
        let v = (-(e - mx)).exp();
        *o = v;
        total += v;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// One mean-field update for pixel `i` given the previous marginals.
/// `kernel_row(j)` evaluates k(i, j); messages accumulate in ascending `j`.
#[inline]
fn update_pixel(
    i: usize,
    pixels: usize,
    l: usize,
    q_prev: &[f64],
    u: &[f64],
    out: &mut [f64],
    mut kernel_row: impl FnMut(usize) -> f64,
) {
    let mut messages = vec![0.0; l];
    for j in 0..pixels {
        if j == i {
            continue;
        }
        let k = kernel_row(j);
        for (m, &q) in messages.iter_mut().zip(&q_prev[j * l..(j + 1) * l]) {
            *m += k * q;
        }
    }
    let mut energy = vec![0.0; l];
    for li in 0..l {
        // Potts compatibility: every other label's message, summed literally.
        let mut pairwise = 0.0;
        for (lj, &m) in messages.iter().enumerate() {
            if lj != li {
                pairwise += m;
            }
        }
        energy[li] = u[i * l + li] + pairwise;
    }
    softmax_neg_energy(&energy, out);
}

/// Run mean-field inference. The image is `[h, w, 3]` intensities sharing
/// the unary's extents; exactly `cfg.n_iters` iterations are performed.
pub fn mean_field(unary: &Unary, image: &Tensor, cfg: &CrfConfig) -> Result<Marginals> {
    mean_field_with_cache_limit(unary, image, cfg, KERNEL_CACHE_LIMIT_BYTES)
}

/// As [`mean_field`] with an explicit kernel-cache budget. Zero forces the
/// on-the-fly kernel path; both paths are bit-identical.
#[doc(hidden)]
pub fn mean_field_with_cache_limit(
    unary: &Unary,
    image: &Tensor,
    cfg: &CrfConfig,
    cache_limit_bytes: usize,
) -> Result<Marginals> {
    cfg.validate()?;
    let (h, w, ch) = image.dims3()?;
    if ch != 3 {
        return Err(Error::Shape(format!("image must be [h,w,3], got {ch} channels")));
    }
    if (w, h) != (unary.width, unary.height) {
        return Err(Error::Shape(format!(
            "unary {}x{} vs image {w}x{h}",
            unary.width, unary.height
        )));
    }
    let l = unary.labels.len();
    let pixels = w * h;

    // Negative log unaries, clamped so absent classes stay finite.
    let u: Vec<f64> = unary
        .probs
        .iter()
        .map(|&z| -(z.max(UNARY_CLAMP)).ln())
        .collect();

    // Q(0) is the per-pixel softmax of -u.
    let mut q = vec![0.0; pixels * l];
    for p in 0..pixels {
        softmax_neg_energy(&u[p * l..(p + 1) * l], &mut q[p * l..(p + 1) * l]);
    }

    let xs: Vec<f64> = (0..pixels).map(|p| (p % w) as f64).collect();
    let ys: Vec<f64> = (0..pixels).map(|p| (p / w) as f64).collect();
    let colors = image.values();

    let cache = if pixels * pixels * std::mem::size_of::<f64>() <= cache_limit_bytes {
        let mut k = vec![0.0; pixels * pixels];
        // Upper triangle in parallel rows, mirrored afterwards; the kernel
        // is symmetric in exact arithmetic because the squared differences
        // are order-independent.
        k.par_chunks_mut(pixels).enumerate().for_each(|(i, row)| {
            for j in (i + 1)..pixels {
                row[j] = pair_kernel(
                    xs[i],
                    ys[i],
                    xs[j],
                    ys[j],
                    &colors[i * 3..i * 3 + 3],
                    &colors[j * 3..j * 3 + 3],
                    cfg,
                );
            }
        });
        for i in 0..pixels {
            for j in (i + 1)..pixels {
                k[j * pixels + i] = k[i * pixels + j];
            }
        }
        Some(k)
    } else {
        None
    };

    let mut q_next = vec![0.0; pixels * l];
    for _ in 0..cfg.n_iters {
        {
            let q_prev = &q;
            q_next
                .par_chunks_mut(l)
                .enumerate()
                .for_each(|(i, out)| match &cache {
                    Some(k) => {
                        let row = &k[i * pixels..(i + 1) * pixels];
                        update_pixel(i, pixels, l, q_prev, &u, out, |j| row[j]);
                    }
                    None => {
                        update_pixel(i, pixels, l, q_prev, &u, out, |j| {
                            pair_kernel(
                                xs[i],
                                ys[i],
                                xs[j],
                                ys[j],
                                &colors[i * 3..i * 3 + 3],
                                &colors[j * 3..j * 3 + 3],
                                cfg,
                            )
                        });
                    }
                });
        }
        std::mem::swap(&mut q, &mut q_next);
    }

    Ok(Marginals {
        width: w,
        height: h,
        num_labels: l,
        values: q,
    })
}

/// Collapse marginals to a hard mask, mapping argmax columns back to global
/// class labels. Ties take the lowest column index; the output contains no
/// void pixels.
pub fn argmax_mask(q: &Marginals, labels: &[u8]) -> Result<PseudoMask> {
    if labels.len() != q.num_labels {
        return Err(Error::Shape(format!(
            "{} labels for {} marginal columns",
            labels.len(),
            q.num_labels
        )));
    }
    let pixels = q.width * q.height;
    let mut out = vec![0u8; pixels];
    for p in 0..pixels {
        let row = &q.values[p * q.num_labels..(p + 1) * q.num_labels];
        let mut best = 0;
        for (li, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = li;
            }
        }
        out[p] = labels[best];
    }
    PseudoMask::new(q.width, q.height, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::build_unary;
    use crate::annotation::VOID;
    use crate::rng::rng_from;
    use rand::Rng;

    fn flat_image(h: usize, w: usize, color: [f64; 3]) -> Tensor {
        let mut vals = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            vals.extend_from_slice(&color);
        }
        Tensor::new(vec![h, w, 3], vals).unwrap()
    }

    fn two_label_unary(w: usize, h: usize, prefer: &[u8], conf: f64) -> Unary {
        let mut probs = vec![0.0; w * h * 2];
        for (p, &lab) in prefer.iter().enumerate() {
            probs[p * 2 + usize::from(lab)] = conf;
            probs[p * 2 + usize::from(1 - lab)] = 1.0 - conf;
        }
        Unary::new(w, h, vec![0, 1], probs).unwrap()
    }

    #[test]
    fn zero_pairwise_weights_reproduce_clamped_unary_softmax() {
        let mut rng = rng_from(1);
        let prefer: Vec<u8> = (0..12).map(|_| rng.gen_range(0..2u8)).collect();
        let unary = two_label_unary(4, 3, &prefer, 0.8);
        let image = flat_image(3, 4, [100.0, 50.0, 25.0]);
        let cfg = CrfConfig {
            bilateral_weight: 0.0,
            smoothness_weight: 0.0,
            n_iters: 7,
            ..CrfConfig::default()
        };
        let out = mean_field(&unary, &image, &cfg).unwrap();
        for p in 0..12 {
            let z0 = unary.probs()[p * 2].max(1e-10);
            let z1 = unary.probs()[p * 2 + 1].max(1e-10);
            let expect0 = z0 / (z0 + z1);
            assert!((out.values()[p * 2] - expect0).abs() < 1e-12);
            assert!((out.values()[p * 2 + 1] - (1.0 - expect0)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_image_returns_unary_distribution() {
        let unary = two_label_unary(1, 1, &[1], 0.7);
        let image = flat_image(1, 1, [0.0, 0.0, 0.0]);
        let out = mean_field(&unary, &image, &CrfConfig::default()).unwrap();
        assert!((out.values()[0] - 0.3).abs() < 1e-12);
        assert!((out.values()[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn flipped_pixel_joins_uniform_neighbors() {
        // 3x3 uniform-color region; center unary prefers label 1, the other
        // eight prefer label 0. Five iterations pull the center to label 0.
        let mut prefer = vec![0u8; 9];
        prefer[4] = 1;
        let unary = two_label_unary(3, 3, &prefer, 0.9);
        let image = flat_image(3, 3, [128.0, 128.0, 128.0]);
        let out = mean_field(&unary, &image, &CrfConfig::default()).unwrap();
        let mask = argmax_mask(&out, &[0, 1]).unwrap();
        assert!(mask.labels().iter().all(|&l| l == 0), "mask {:?}", mask.labels());
    }

    #[test]
    fn marginals_stay_valid_distributions_every_iteration() {
        let mut rng = rng_from(2);
        let prefer: Vec<u8> = (0..25).map(|_| rng.gen_range(0..2u8)).collect();
        let unary = two_label_unary(5, 5, &prefer, 0.85);
        let mut img_vals = Vec::new();
        for _ in 0..25 {
            for _ in 0..3 {
                img_vals.push(rng.gen_range(0.0..255.0));
            }
        }
        let image = Tensor::new(vec![5, 5, 3], img_vals).unwrap();
        for iters in 1..=5 {
            let cfg = CrfConfig {
                n_iters: iters,
                ..CrfConfig::default()
            };
            let out = mean_field(&unary, &image, &cfg).unwrap();
            for p in 0..25 {
                let row = &out.values()[p * 2..(p + 1) * 2];
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn label_permutation_equivariance_under_potts() {
        let mut rng = rng_from(3);
        let pixels = 16;
        let l = 3;
        let mut probs = vec![0.0; pixels * l];
        for p in 0..pixels {
            let mut row: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            probs[p * l..(p + 1) * l].copy_from_slice(&row);
        }
        let unary = Unary::new(4, 4, vec![0, 1, 2], probs.clone()).unwrap();
        // Rotate labels: column order (2, 0, 1).
        let perm = [2usize, 0, 1];
        let mut probs_rot = vec![0.0; pixels * l];
        for p in 0..pixels {
            for (new_col, &old_col) in perm.iter().enumerate() {
                probs_rot[p * l + new_col] = probs[p * l + old_col];
            }
        }
        let unary_rot = Unary::new(4, 4, vec![0, 1, 2], probs_rot).unwrap();
        let mut img_vals = Vec::new();
        for _ in 0..pixels {
            for _ in 0..3 {
                img_vals.push(rng.gen_range(0.0..255.0));
            }
        }
        let image = Tensor::new(vec![4, 4, 3], img_vals).unwrap();
        let cfg = CrfConfig::default();
        let base = mean_field(&unary, &image, &cfg).unwrap();
        let rot = mean_field(&unary_rot, &image, &cfg).unwrap();
        for p in 0..pixels {
            for (new_col, &old_col) in perm.iter().enumerate() {
                let diff = (rot.values()[p * l + new_col] - base.values()[p * l + old_col]).abs();
                assert!(diff < 1e-12, "pixel {p} col {new_col}: diff {diff}");
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = rng_from(4);
        let prefer: Vec<u8> = (0..36).map(|_| rng.gen_range(0..2u8)).collect();
        let unary = two_label_unary(6, 6, &prefer, 0.75);
        let image = flat_image(6, 6, [10.0, 200.0, 90.0]);
        let a = mean_field(&unary, &image, &CrfConfig::default()).unwrap();
        let b = mean_field(&unary, &image, &CrfConfig::default()).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn argmax_mask_cases() {
        // One-hot marginals copy the encoded labels.
        let m = Marginals {
            width: 2,
            height: 1,
            num_labels: 2,
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        let mask = argmax_mask(&m, &[0, 3]).unwrap();
        assert_eq!(mask.labels(), &[0, 3]);

        // Uniform marginals take the lowest column.
        let m = Marginals {
            width: 2,
            height: 1,
            num_labels: 2,
            values: vec![0.5, 0.5, 0.5, 0.5],
        };
        let mask = argmax_mask(&m, &[0, 3]).unwrap();
        assert_eq!(mask.labels(), &[0, 0]);

        // Mixed 2x2 hand oracle.
        let m = Marginals {
            width: 2,
            height: 2,
            num_labels: 3,
            values: vec![
                0.2, 0.5, 0.3, // -> col 1
                0.6, 0.1, 0.3, // -> col 0
                0.1, 0.2, 0.7, // -> col 2
                0.3, 0.3, 0.4, // -> col 2
            ],
        };
        let mask = argmax_mask(&m, &[0, 2, 4]).unwrap();
        assert_eq!(mask.labels(), &[2, 0, 4, 4]);
    }

    #[test]
    fn unary_from_prob_field_compacts_present_columns() {
        let mut mask = PseudoMask::filled(2, 2, VOID);
        mask.set(0, 0, 1);
        mask.set(1, 1, 0);
        let field = build_unary(&mask, &[0, 1], 4, 0.9).unwrap();
        let unary = Unary::from_prob_field(&field, &[0, 1]).unwrap();
        assert_eq!(unary.labels(), &[0, 1]);
        assert_eq!(unary.probs().len(), 8);
        // Pixel (0,0) is labeled 1: (1-tau, tau) over (bg, 1).
        assert!((unary.probs()[0] - 0.1).abs() < 1e-12);
        assert!((unary.probs()[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn mean_field_rejects_bad_shapes() {
        let unary = two_label_unary(2, 2, &[0, 0, 1, 1], 0.8);
        let image = flat_image(3, 2, [0.0; 3]);
        assert!(mean_field(&unary, &image, &CrfConfig::default()).is_err());
        let bad_cfg = CrfConfig {
            n_iters: 0,
            ..CrfConfig::default()
        };
        let image = flat_image(2, 2, [0.0; 3]);
        assert!(mean_field(&unary, &image, &bad_cfg).is_err());
    }
}
