//! Pseudo-annotation generation from attention maps.
//!
//! The path from attention to mask: min-max normalize each class channel,
//! merge the expansive and discriminative maps per class with the softmaxed
//! image score as the mixing weight, threshold the merged map (> 0.2) for
//! foreground candidates and the feature channel-sum (< 0.3) for background,
//! resolve multi-class claims in favor of the smallest candidate region, and
//! leave everything else void. Labeled masks then become per-pixel class
//! probability vectors that feed the CRF unaries.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sentinel mask label for pixels whose class is left undecided.
pub const VOID: u8 = 255;

/// Background class index.
pub const BACKGROUND: u8 = 0;

/// A per-pixel label grid: 0 = background, 1.. = foreground classes,
/// [`VOID`] = undecided.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl PseudoMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(PseudoMask { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        PseudoMask {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    /// Distinct non-void labels present, ascending.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=254u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// Per-pixel class probability vectors over the full dataset label set.
/// Entries for classes absent from the image are exactly zero.
#[derive(Debug, Clone)]
pub struct ProbField {
    width: usize,
    height: usize,
    num_classes: usize,
    values: Vec<f64>,
}

impl ProbField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.num_classes;
        &self.values[base..base + self.num_classes]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.num_classes],
            self.values.clone(),
        )
        .expect("field dimensions are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.dims3()?;
        Ok(ProbField {
            width: w,
            height: h,
            num_classes: c,
            values: t.values().to_vec(),
        })
    }
}

/// Min-max normalize a map to [0, 1]. A constant map carries no localization
/// signal and maps to all zeros.
pub fn minmax_normalize(map: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|&v| (v - lo) / range).collect()
}

/// Merge per-class normalized attention maps: `T_c = p_c * A_c + (1 - p_c)
/// * S_c`. Callers min-max normalize `A_c` and `S_c` per class first.
pub fn merge_attention(a: &Tensor, s: &Tensor, score_softmax: &[f64]) -> Result<Tensor> {
    let (h, w, c) = a.dims3()?;
    if s.shape() != a.shape() {
        return Err(Error::Shape(format!(
            "merge: A {:?} vs S {:?}",
            a.shape(),
            s.shape()
        )));
    }
    if score_softmax.len() != c {
        return Err(Error::Shape(format!(
            "merge: {c} channels vs {} weights",
            score_softmax.len()
        )));
    }
    if score_softmax.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::Contract("merge weights must lie in [0,1]".into()));
    }
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        for ci in 0..c {
            let weight = score_softmax[ci];
            out[p * c + ci] =
                weight * a.values()[p * c + ci] + (1.0 - weight) * s.values()[p * c + ci];
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Threshold a per-class attention map into a pseudo-mask.
///
/// The map's channels must already be normalized to a [0, 1]-comparable
/// scale (min-max per class, or a merge of such maps); they are thresholded
/// directly, so a uniformly high channel claims every pixel. `labels` holds
/// the image's foreground labels (1-based; label `l` reads channel `l - 1`).
/// Foreground candidates are pixels whose channel exceeds `thr_fg`;
/// background is where the min-max normalized channel-sum of the raw
/// feature map falls below `thr_bg`. Conflicting foreground claims go to
/// the label with the smallest candidate set (lowest label on ties),
/// foreground beats background, and unclaimed non-background pixels are
/// void.
pub fn generate_mask(
    merged: &Tensor,
    features: &Tensor,
    labels: &[u8],
    thr_fg: f64,
    thr_bg: f64,
) -> Result<PseudoMask> {
    let (h, w, c) = merged.dims3()?;
    let (fh, fw, _) = features.dims3()?;
    if (fh, fw) != (h, w) {
        return Err(Error::Shape(format!(
            "mask: merged {h}x{w} vs features {fh}x{fw}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("label set is empty".into()));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &l in &sorted {
        if l == BACKGROUND || l == VOID || usize::from(l) > c {
            return Err(Error::Data(format!(
                "label {l} outside foreground range 1..={c}"
            )));
        }
    }

    let pixels = h * w;
    let mut candidates: Vec<(u8, Vec<bool>, usize)> = Vec::with_capacity(sorted.len());
    for &l in &sorted {
        let channel = merged.channel_plane(usize::from(l) - 1)?;
        let set: Vec<bool> = channel.iter().map(|&v| v > thr_fg).collect();
        let size = set.iter().filter(|&&b| b).count();
        candidates.push((l, set, size));
    }

    // Background from the feature channel-sum.
    let (_, _, d) = features.dims3()?;
    let mut channel_sum = vec![0.0; pixels];
    for p in 0..pixels {
        for di in 0..d {
            channel_sum[p] += features.values()[p * d + di];
        }
    }
    let bg_norm = minmax_normalize(&channel_sum);
    let background: Vec<bool> = bg_norm.iter().map(|&v| v < thr_bg).collect();

    let mut out = vec![VOID; pixels];
    for p in 0..pixels {
        let mut chosen: Option<(u8, usize)> = None;
        for &(l, ref set, size) in &candidates {
            if set[p] {
                // Smallest candidate region wins; ties fall to the lowest
                // label because candidates are sorted ascending.
                match chosen {
                    Some((_, best)) if size >= best => {}
                    _ => chosen = Some((l, size)),
                }
            }
        }
        out[p] = match chosen {
            Some((l, _)) => l,
            None if background[p] => BACKGROUND,
            None => VOID,
        };
    }
    PseudoMask::new(w, h, out)
}

/// Expand a pseudo-mask into per-pixel class probability vectors.
///
/// `present` is the image's label set including background; `num_classes` is
/// the full dataset label count. Void pixels spread uniformly over the
/// present classes; labeled pixels put `tau` on their own label and share
/// the remainder over the other present classes.
pub fn build_unary(
    mask: &PseudoMask,
    present: &[u8],
    num_classes: usize,
    tau: f64,
) -> Result<ProbField> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0.5, 1), got {tau}")));
    }
    let mut present_sorted = present.to_vec();
    present_sorted.sort_unstable();
    present_sorted.dedup();
    if !present_sorted.contains(&BACKGROUND) {
        return Err(Error::Data("present label set must include background".into()));
    }
    if present_sorted.len() < 2 {
        return Err(Error::Data(
            "present label set needs at least two entries (background plus one class)".into(),
        ));
    }
    if present_sorted.iter().any(|&l| usize::from(l) >= num_classes) {
        return Err(Error::Data(format!(
            "present label outside dataset range 0..{num_classes}"
        )));
    }
    for &l in mask.labels() {
        if l != VOID && !present_sorted.contains(&l) {
            return Err(Error::Data(format!("mask label {l} not in present set")));
        }
    }

    let k = present_sorted.len();
    let uniform = 1.0 / k as f64;
    let off = (1.0 - tau) / (k - 1) as f64;
    let mut values = vec![0.0; mask.width() * mask.height() * num_classes];
    for (p, &label) in mask.labels().iter().enumerate() {
        let row = &mut values[p * num_classes..(p + 1) * num_classes];
        if label == VOID {
            for &l in &present_sorted {
                row[usize::from(l)] = uniform;
            }
        } else {
            for &l in &present_sorted {
                row[usize::from(l)] = if l == label { tau } else { off };
            }
        }
    }
    Ok(ProbField {
        width: mask.width(),
        height: mask.height(),
        num_classes,
        values,
    })
}
