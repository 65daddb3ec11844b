//! Brute-force reference implementations, written as straight-line loops
//! independent of the library's graph machinery, checked against the real
//! code on small fixed instances.

use attnmask_core::annotation::{generate_mask, minmax_normalize, BACKGROUND, VOID};
use attnmask_core::attention::{
    forward_conventional, forward_decoupled, ConventionalParams, ModelParams,
};
use attnmask_core::crf::{mean_field, CrfConfig, Unary};
use attnmask_core::rng::rng_from;
use attnmask_core::tensor::Tensor;
use rand::Rng;

// ── Decoupled forward ───────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn brute_decoupled(
    x: &[f64],
    h: usize,
    w: usize,
    d: usize,
    c: usize,
    ew: &[f64],
    eb: &[f64],
    dw: &[f64],
    db: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let pixels = h * w;
    let mut z = vec![0.0; pixels * c];
    for p in 0..pixels {
        for ci in 0..c {
            let mut pre = eb[ci];
            for di in 0..d {
                pre += ew[di * c + ci] * x[p * d + di];
            }
            z[p * c + ci] = (1.0 + pre.exp()).ln() + eps;
        }
    }
    let mut a = vec![0.0; pixels * c];
    for ci in 0..c {
        let mut total = 0.0;
        for p in 0..pixels {
            total += z[p * c + ci];
        }
        for p in 0..pixels {
            a[p * c + ci] = z[p * c + ci] / total;
        }
    }
    let mut s = vec![0.0; pixels * c];
    for p in 0..pixels {
        for ci in 0..c {
            let mut val = db[ci];
            for di in 0..d {
                val += dw[di * c + ci] * x[p * d + di];
            }
            s[p * c + ci] = val;
        }
    }
    let mut scores = vec![0.0; c];
    for ci in 0..c {
        for p in 0..pixels {
            scores[ci] += s[p * c + ci] * a[p * c + ci];
        }
    }
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    let p_hat: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    (a, s, scores, p_hat)
}

#[test]
fn decoupled_forward_matches_brute_force() {
    let mut rng = rng_from(101);
    let (h, w, d, c) = (3, 3, 4, 2);
    let x: Vec<f64> = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = ModelParams::new(d, c, 0.5, 0.1, 17).unwrap();
    let out = forward_decoupled(
        &Tensor::new(vec![h, w, d], x.clone()).unwrap(),
        &params,
        false,
        0,
    )
    .unwrap();
    let (a, s, scores, p_hat) = brute_decoupled(
        &x,
        h,
        w,
        d,
        c,
        params.expansive_w.values(),
        params.expansive_b.values(),
        params.discriminative_w.values(),
        params.discriminative_b.values(),
        params.eps,
    );
    for (got, expect) in out.expansive.values().iter().zip(&a) {
        assert!((got - expect).abs() < 1e-12, "A: {got} vs {expect}");
    }
    for (got, expect) in out.discriminative.values().iter().zip(&s) {
        assert!((got - expect).abs() < 1e-12, "S: {got} vs {expect}");
    }
    for (got, expect) in out.scores.values().iter().zip(&scores) {
        assert!((got - expect).abs() < 1e-12, "p: {got} vs {expect}");
    }
    for (got, expect) in out.score_softmax.values().iter().zip(&p_hat) {
        assert!((got - expect).abs() < 1e-12, "p_hat: {got} vs {expect}");
    }
}

// ── Conventional forward ────────────────────────────────────────────────────

#[test]
fn conventional_forward_matches_brute_force() {
    let mut rng = rng_from(102);
    let (h, w, d, c) = (2, 2, 3, 2);
    let x: Vec<f64> = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = ConventionalParams::new(d, c, 0.1, 23).unwrap();
    let (attention, scores) =
        forward_conventional(&Tensor::new(vec![h, w, d], x.clone()).unwrap(), &params).unwrap();

    let pixels = h * w;
    let aw = params.attention_w.values();
    let ab = params.attention_b.values()[0];
    // z_ij = F(w^T x_ij + b); a_ij = z_ij / sum z
    let mut z = vec![0.0; pixels];
    for p in 0..pixels {
        let mut pre = ab;
        for di in 0..d {
            pre += aw[di] * x[p * d + di];
        }
        z[p] = (1.0 + pre.exp()).ln() + params.eps;
    }
    let total: f64 = z.iter().sum();
    let a: Vec<f64> = z.iter().map(|&v| v / total).collect();
    // p_c = (sum_ij x_ij a_ij)^T v_c + h_c
    let mut pooled = vec![0.0; d];
    for p in 0..pixels {
        for di in 0..d {
            pooled[di] += x[p * d + di] * a[p];
        }
    }
    let cw = params.classifier_w.values();
    let cb = params.classifier_b.values();
    let mut expect = vec![0.0; c];
    for ci in 0..c {
        expect[ci] = cb[ci];
        for di in 0..d {
            expect[ci] += pooled[di] * cw[di * c + ci];
        }
    }
    for (got, want) in attention.values().iter().zip(&a) {
        assert!((got - want).abs() < 1e-12);
    }
    for (got, want) in scores.values().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

// ── Mask generation ─────────────────────────────────────────────────────────

#[test]
fn generate_mask_matches_brute_force_enumeration() {
    let mut rng = rng_from(103);
    let (h, w, k) = (8, 8, 3);
    let pixels = h * w;
    let labels: Vec<u8> = vec![1, 2, 3];
    let raw: Vec<f64> = (0..pixels * k).map(|_| rng.gen_range(0.0..1.0)).collect();
    // Normalize channels the way the pipeline does before masking.
    let mut merged = vec![0.0; pixels * k];
    for ci in 0..k {
        let plane: Vec<f64> = (0..pixels).map(|p| raw[p * k + ci]).collect();
        let norm = minmax_normalize(&plane);
        for p in 0..pixels {
            merged[p * k + ci] = norm[p];
        }
    }
    let feats: Vec<f64> = (0..pixels * 2).map(|_| rng.gen_range(0.0..2.0)).collect();
    let (thr_fg, thr_bg) = (0.6, 0.3);

    let mask = generate_mask(
        &Tensor::new(vec![h, w, k], merged.clone()).unwrap(),
        &Tensor::new(vec![h, w, 2], feats.clone()).unwrap(),
        &labels,
        thr_fg,
        thr_bg,
    )
    .unwrap();

    // Straight-line enumeration of the rule.
    let mut cand = vec![[false; 3]; pixels];
    let mut sizes = [0usize; 3];
    for (li, _) in labels.iter().enumerate() {
        for p in 0..pixels {
            if merged[p * k + li] > thr_fg {
                cand[p][li] = true;
                sizes[li] += 1;
            }
        }
    }
    let sums: Vec<f64> = (0..pixels).map(|p| feats[p * 2] + feats[p * 2 + 1]).collect();
    let lo = sums.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut expect = vec![VOID; pixels];
    for p in 0..pixels {
        let mut best: Option<usize> = None;
        for li in 0..3 {
            if cand[p][li] {
                best = match best {
                    None => Some(li),
                    Some(b) if sizes[li] < sizes[b] => Some(li),
                    other => other,
                };
            }
        }
        expect[p] = match best {
            Some(li) => labels[li],
            None => {
                let norm = (sums[p] - lo) / (hi - lo);
                if norm < thr_bg {
                    BACKGROUND
                } else {
                    VOID
                }
            }
        };
    }
    assert_eq!(mask.labels(), expect.as_slice());
}

// ── Mean-field CRF ──────────────────────────────────────────────────────────

/// Literal serial double-loop mean-field: the same update equations with no
/// kernel caching, no symmetry exploitation, and no parallelism.
fn brute_mean_field(
    probs: &[f64],
    labels: usize,
    width: usize,
    height: usize,
    image: &[f64],
    cfg: &CrfConfig,
) -> Vec<f64> {
    let pixels = width * height;
    let l = labels;
    let u: Vec<f64> = probs.iter().map(|&z| -(z.max(1e-10)).ln()).collect();
    let softmax_neg = |energy: &[f64], out: &mut [f64]| {
        let mn = energy.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for (o, &e) in out.iter_mut().zip(energy) {
            let v = (-(e - mn)).exp();
            *o = v;
            total += v;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    };
    let mut q = vec![0.0; pixels * l];
    for p in 0..pixels {
        softmax_neg(&u[p * l..(p + 1) * l], &mut q[p * l..(p + 1) * l]);
    }
    let denom_a = 2.0 * cfg.spatial_std * cfg.spatial_std;
    let denom_b = 2.0 * cfg.color_std * cfg.color_std;
    let denom_g = 2.0 * cfg.smoothness_std * cfg.smoothness_std;
    for _ in 0..cfg.n_iters {
        let mut q_next = vec![0.0; pixels * l];
        for i in 0..pixels {
            let (xi, yi) = ((i % width) as f64, (i / width) as f64);
            let mut messages = vec![0.0; l];
            for j in 0..pixels {
                if j == i {
                    continue;
                }
                let (xj, yj) = ((j % width) as f64, (j / width) as f64);
                let dx = xi - xj;
                let dy = yi - yj;
                let d2 = dx * dx + dy * dy;
                let dr = image[i * 3] - image[j * 3];
                let dg = image[i * 3 + 1] - image[j * 3 + 1];
                let db = image[i * 3 + 2] - image[j * 3 + 2];
                let c2 = dr * dr + dg * dg + db * db;
                let kernel = cfg.bilateral_weight * (-(d2 / denom_a) - (c2 / denom_b)).exp()
                    + cfg.smoothness_weight * (-(d2 / denom_g)).exp();
                for (m, &qj) in messages.iter_mut().zip(&q[j * l..(j + 1) * l]) {
                    *m += kernel * qj;
                }
            }
            let mut energy = vec![0.0; l];
            for li in 0..l {
                let mut pairwise = 0.0;
                for (lj, &m) in messages.iter().enumerate() {
                    if lj != li {
                        pairwise += m;
                    }
                }
                energy[li] = u[i * l + li] + pairwise;
            }
            softmax_neg(&energy, &mut q_next[i * l..(i + 1) * l]);
        }
        q = q_next;
    }
    q
}

#[test]
fn mean_field_matches_literal_double_loop_bit_for_bit() {
    let mut rng = rng_from(104);
    let (w, h, l) = (8, 8, 3);
    let pixels = w * h;
    let mut probs = vec![0.0; pixels * l];
    for p in 0..pixels {
        let mut row: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        probs[p * l..(p + 1) * l].copy_from_slice(&row);
    }
    // Blocky image so the bilateral kernel has structure to respond to.
    let image: Vec<f64> = (0..pixels)
        .flat_map(|p| {
            let x = p % w;
            if x < 4 {
                [200.0, 40.0, 40.0]
            } else {
                [30.0, 30.0, 180.0]
            }
        })
        .collect();
    let cfg = CrfConfig::default();
    let unary = Unary::new(w, h, vec![0, 1, 2], probs.clone()).unwrap();
    let out = mean_field(
        &unary,
        &Tensor::new(vec![h, w, 3], image.clone()).unwrap(),
        &cfg,
    )
    .unwrap();
    let expect = brute_mean_field(&probs, l, w, h, &image, &cfg);
    assert_eq!(out.values().len(), expect.len());
    for (i, (got, want)) in out.values().iter().zip(&expect).enumerate() {
        assert_eq!(
            got.to_bits(),
            want.to_bits(),
            "index {i}: {got:e} vs {want:e}"
        );
    }
}

#[test]
fn mean_field_uncached_path_matches_reference_too() {
    // A zero cache budget forces kernels to be recomputed per iteration;
    // the summation order is unchanged, so the bits still match.
    let mut rng = rng_from(105);
    let (w, h, l) = (12, 12, 2);
    let pixels = w * h;
    let mut probs = vec![0.0; pixels * l];
    for p in 0..pixels {
        let a = rng.gen_range(0.05..0.95);
        probs[p * l] = a;
        probs[p * l + 1] = 1.0 - a;
    }
    let image: Vec<f64> = (0..pixels * 3).map(|_| rng.gen_range(0.0..255.0)).collect();
    let cfg = CrfConfig {
        n_iters: 3,
        ..CrfConfig::default()
    };
    let unary = Unary::new(w, h, vec![0, 1], probs.clone()).unwrap();
    let image_t = Tensor::new(vec![h, w, 3], image.clone()).unwrap();
    let out = attnmask_core::crf::mean_field_with_cache_limit(&unary, &image_t, &cfg, 0).unwrap();
    let expect = brute_mean_field(&probs, l, w, h, &image, &cfg);
    for (got, want) in out.values().iter().zip(&expect) {
        assert_eq!(got.to_bits(), want.to_bits());
    }
    // And the cached path agrees with the uncached one exactly.
    let cached = mean_field(&unary, &image_t, &cfg).unwrap();
    for (got, want) in cached.values().iter().zip(out.values()) {
        assert_eq!(got.to_bits(), want.to_bits());
    }
}
