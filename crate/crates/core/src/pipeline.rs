//! End-to-end pipeline: dataset generation, training, annotation, CRF
//! refinement, and evaluation, plus the dropout-sweep experiment harness.
//!
//! Every stage works through the filesystem layout that the CLI exposes:
//!
//! ```text
//! dataset/                       run-output/
//!   manifest.json                  checkpoint/{model.json, *.dten}
//!   scenes/<id>/features.dten      loss_curve.json
//!   scenes/<id>/image.ppm          maps/<id>/{expansive,discriminative,merged,unary}.dten
//!   scenes/<id>/gt_mask.pgm        masks/<column>/<id>.pgm
//!                                  report.{json,txt}
//! ```
//!
//! Annotation fans out over scenes on a worker pool; training and mean-field
//! refinement of one image stay sequential over scenes (the CRF parallelizes
//! internally over pixels).

use crate::annotation::{build_unary, generate_mask, merge_attention, minmax_normalize, ProbField, PseudoMask, BACKGROUND, VOID};
use crate::attention::{
    forward_conventional, forward_decoupled, forward_single_stream, train, train_conventional,
    train_single_stream, ModelParams, ConventionalParams, SingleStreamParams, Sample, TrainConfig,
    TrainReport, TrainedModel, Variant,
};
use crate::crf::{argmax_mask, mean_field, CrfConfig, Unary};
use crate::error::{Error, Result};
use crate::io::{
    read_dten, read_image_ppm, read_mask, write_dten, write_image_ppm, write_json, write_mask,
    DatasetManifest, DtenMeta, MaskMeta, SceneEntry, load_model, save_model,
};
use crate::metrics::{score, ConfusionTally, Scores};
use crate::rng::derive_seed;
use crate::synthetic::{class_names, generate_scene, DatasetConfig};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

/// How per-class maps are normalized before the weighted merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeNorm {
    /// Min-max normalize each class channel to [0, 1] (default).
    MinMax,
    /// Divide each channel by its spatial sum (the comparison variant).
    SpatialSum,
}

/// Full experiment description; JSON-serializable for `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Model dropout rate (expansive detector / single-stream detector).
    pub dropout_rate: f64,
    /// Softplus offset keeping attention strictly positive.
    pub eps: f64,
    /// Confidence placed on a mask's own label in the CRF unaries.
    pub tau: f64,
    pub thr_fg: f64,
    pub thr_bg: f64,
    pub crf: CrfConfig,
    pub variant: Variant,
    /// Rates exercised by the dropout sweep.
    pub dropout_rates: Vec<f64>,
    /// Refine the primary mask column with the dense CRF.
    pub use_crf: bool,
    pub merge_normalization: MergeNorm,
    /// Include background in the metric means.
    pub include_background: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            dropout_rate: 0.5,
            eps: 0.1,
            tau: 0.9,
            thr_fg: 0.2,
            thr_bg: 0.3,
            crf: CrfConfig::default(),
            variant: Variant::Decoupled,
            dropout_rates: vec![0.0, 0.3, 0.4, 0.5, 0.6, 0.7],
            use_crf: true,
            merge_normalization: MergeNorm::MinMax,
            include_background: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.crf.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if !(self.tau > 0.5 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0.5,1), got {}", self.tau)));
        }
        for &r in &self.dropout_rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("sweep rate {r} outside [0,1)")));
            }
        }
        Ok(())
    }

    /// Apply a master seed to every seeded component.
    pub fn reseed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = derive_seed(seed, "train");
    }
}

// ── Dataset generation and loading ──────────────────────────────────────────

fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Write a synthetic dataset to `out_dir`. Deterministic per seed; a zero
/// count produces just an empty manifest.
pub fn gen_synthetic(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let names = class_names(cfg.num_classes);
    let mut entries = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let id = scene_id(index);
        let scene = generate_scene(cfg, index)?;
        let rel_dir = format!("scenes/{id}");
        let scene_dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&scene_dir)?;

        write_dten(&scene_dir.join("features.dten"), &scene.features)?;
        write_json(
            &scene_dir.join("features.json"),
            &DtenMeta {
                axes: vec!["height".into(), "width".into(), "channel".into()],
                class_names: Some(names.clone()),
            },
        )?;
        write_image_ppm(&scene_dir.join("image.ppm"), &scene.image)?;
        write_mask(&scene_dir.join("gt_mask.pgm"), &scene.gt_mask)?;
        write_json(&scene_dir.join("gt_mask.json"), &mask_meta(&names))?;

        entries.push(SceneEntry {
            id,
            features: format!("{rel_dir}/features.dten"),
            image: format!("{rel_dir}/image.ppm"),
            gt_mask: format!("{rel_dir}/gt_mask.pgm"),
            labels: scene.labels,
        });
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        width: cfg.width,
        height: cfg.height,
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
        noise_sigma: cfg.noise_sigma,
        class_names: names,
        scenes: entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn mask_meta(names: &[String]) -> MaskMeta {
    let labels: BTreeMap<u8, String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (i as u8, n.clone()))
        .collect();
    MaskMeta { labels, void: VOID }
}

/// A dataset scene loaded back into memory.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub id: String,
    pub features: Tensor,
    pub image: Tensor,
    pub gt_mask: PseudoMask,
    /// Present foreground labels, ascending.
    pub labels: Vec<u8>,
}

impl LoadedScene {
    /// Multi-hot label vector over `k` foreground classes.
    pub fn label_vec(&self, k: usize) -> Vec<f64> {
        (1..=k as u8)
            .map(|l| if self.labels.contains(&l) { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn load_scenes(dataset_dir: &Path, manifest: &DatasetManifest) -> Result<Vec<LoadedScene>> {
    manifest
        .scenes
        .iter()
        .map(|entry| {
            Ok(LoadedScene {
                id: entry.id.clone(),
                features: read_dten(&dataset_dir.join(&entry.features))?,
                image: read_image_ppm(&dataset_dir.join(&entry.image))?,
                gt_mask: read_mask(&dataset_dir.join(&entry.gt_mask))?,
                labels: entry.labels.clone(),
            })
        })
        .collect()
}

// ── Training ────────────────────────────────────────────────────────────────

/// Train the spec's model variant on the loaded scenes.
pub fn train_model(
    spec: &ExperimentSpec,
    manifest: &DatasetManifest,
    scenes: &[LoadedScene],
) -> Result<(TrainedModel, TrainReport)> {
    spec.validate()?;
    let k = manifest.num_classes - 1;
    let d = manifest.feature_dim;
    let dataset: Vec<Sample> = scenes
        .iter()
        .map(|s| (s.features.clone(), s.label_vec(k)))
        .collect();
    let init_seed = derive_seed(spec.train.seed, "init");
    match spec.variant {
        Variant::Decoupled => {
            let mut params = ModelParams::new(d, k, spec.dropout_rate, spec.eps, init_seed)?;
            let report = train(&mut params, &dataset, &spec.train)?;
            Ok((TrainedModel::Decoupled(params), report))
        }
        Variant::Conventional => {
            let mut params = ConventionalParams::new(d, k, spec.eps, init_seed)?;
            let report = train_conventional(&mut params, &dataset, &spec.train)?;
            Ok((TrainedModel::Conventional(params), report))
        }
        Variant::SingleStream => {
            let mut params = SingleStreamParams::new(d, k, spec.dropout_rate, init_seed)?;
            let report = train_single_stream(&mut params, &dataset, &spec.train)?;
            Ok((TrainedModel::SingleStream(params), report))
        }
    }
}

// ── Annotation ──────────────────────────────────────────────────────────────

/// Attention maps and masks produced for one scene. Map entries are present
/// only for the decoupled variant.
#[derive(Debug, Clone)]
pub struct SceneAnnotation {
    pub expansive: Option<Tensor>,
    pub discriminative: Option<Tensor>,
    pub merged: Option<Tensor>,
    /// Column name -> raw mask.
    pub masks: Vec<(String, PseudoMask)>,
    /// Unary probabilities for the primary column's mask.
    pub unary: ProbField,
}

/// The mask column that feeds CRF refinement and headline metrics.
pub fn primary_column(variant: Variant) -> &'static str {
    match variant {
        Variant::Decoupled => "merged",
        Variant::Conventional => "conventional",
        Variant::SingleStream => "single-stream",
    }
}

fn normalize_per_class(map: &Tensor, mode: MergeNorm) -> Result<Tensor> {
    let (h, w, c) = map.dims3()?;
    let mut out = vec![0.0; h * w * c];
    for ci in 0..c {
        let plane = map.channel_plane(ci)?;
        let norm = match mode {
            MergeNorm::MinMax => minmax_normalize(&plane),
            MergeNorm::SpatialSum => {
                let total: f64 = plane.iter().sum();
                if !(total > 0.0) {
                    return Err(Error::DegenerateNormalization { channel: ci, sum: total });
                }
                plane.iter().map(|&v| v / total).collect()
            }
        };
        for (p, &v) in norm.iter().enumerate() {
            out[p * c + ci] = v;
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Replicate a class-agnostic `[h, w]` map into `[h, w, k]` channels.
fn replicate_map(map: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let mut out = vec![0.0; h * w * k];
    for (p, &v) in map.values().iter().enumerate() {
        for ci in 0..k {
            out[p * k + ci] = v;
        }
    }
    Tensor::new(vec![h, w, k], out)
}

/// Annotate one scene: run the model in inference mode, derive the mask
/// columns, and build the CRF unary for the primary column.
pub fn annotate_scene(
    spec: &ExperimentSpec,
    model: &TrainedModel,
    scene: &LoadedScene,
    num_classes: usize,
) -> Result<SceneAnnotation> {
    let mut masks = Vec::new();
    let (expansive, discriminative, merged) = match model {
        TrainedModel::Decoupled(params) => {
            let out = forward_decoupled(&scene.features, params, false, 0)?;
            // Component columns always threshold min-max normalized
            // channels. The merged map follows the configured normalization
            // and is thresholded as-is, so under spatial-sum normalization
            // (values on a 1/(w*h) scale, strictly positive) the thresholds
            // must be chosen on that scale.
            let a_minmax = normalize_per_class(&out.expansive, MergeNorm::MinMax)?;
            let s_minmax = normalize_per_class(&out.discriminative, MergeNorm::MinMax)?;
            let merged = match spec.merge_normalization {
                MergeNorm::MinMax => {
                    merge_attention(&a_minmax, &s_minmax, out.score_softmax.values())?
                }
                MergeNorm::SpatialSum => {
                    let a_norm = normalize_per_class(&out.expansive, MergeNorm::SpatialSum)?;
                    let s_norm = normalize_per_class(&out.discriminative, MergeNorm::SpatialSum)?;
                    merge_attention(&a_norm, &s_norm, out.score_softmax.values())?
                }
            };
            masks.push((
                "expansive".to_string(),
                generate_mask(&a_minmax, &scene.features, &scene.labels, spec.thr_fg, spec.thr_bg)?,
            ));
            masks.push((
                "discriminative".to_string(),
                generate_mask(&s_minmax, &scene.features, &scene.labels, spec.thr_fg, spec.thr_bg)?,
            ));
            masks.push((
                "merged".to_string(),
                generate_mask(&merged, &scene.features, &scene.labels, spec.thr_fg, spec.thr_bg)?,
            ));
            (Some(out.expansive), Some(out.discriminative), Some(merged))
        }
        TrainedModel::Conventional(params) => {
            let (attention, _) = forward_conventional(&scene.features, params)?;
            let norm = Tensor::new(
                vec![attention.shape()[0], attention.shape()[1]],
                minmax_normalize(attention.values()),
            )?;
            let per_class = replicate_map(&norm, params.num_classes())?;
            masks.push((
                "conventional".to_string(),
                generate_mask(&per_class, &scene.features, &scene.labels, spec.thr_fg, spec.thr_bg)?,
            ));
            (None, None, None)
        }
        TrainedModel::SingleStream(params) => {
            let (s, _) = forward_single_stream(&scene.features, params, false, 0)?;
            let s_minmax = normalize_per_class(&s, MergeNorm::MinMax)?;
            masks.push((
                "single-stream".to_string(),
                generate_mask(&s_minmax, &scene.features, &scene.labels, spec.thr_fg, spec.thr_bg)?,
            ));
            (None, None, None)
        }
    };

    let primary = primary_column(spec.variant);
    let primary_mask = masks
        .iter()
        .find(|(name, _)| name == primary)
        .map(|(_, m)| m.clone())
        .ok_or_else(|| Error::Contract(format!("primary column {primary} missing")))?;
    let mut present = vec![BACKGROUND];
    present.extend_from_slice(&scene.labels);
    let unary = build_unary(&primary_mask, &present, num_classes, spec.tau)?;

    Ok(SceneAnnotation {
        expansive,
        discriminative,
        merged,
        masks,
        unary,
    })
}

fn write_scene_annotation(
    out_dir: &Path,
    names: &[String],
    scene: &LoadedScene,
    anno: &SceneAnnotation,
) -> Result<()> {
    let maps_dir = out_dir.join("maps").join(&scene.id);
    fs::create_dir_all(&maps_dir)?;
    let meta = DtenMeta {
        axes: vec!["height".into(), "width".into(), "class".into()],
        class_names: Some(names[1..].to_vec()),
    };
    if let Some(t) = &anno.expansive {
        write_dten(&maps_dir.join("expansive.dten"), t)?;
        write_json(&maps_dir.join("expansive.json"), &meta)?;
    }
    if let Some(t) = &anno.discriminative {
        write_dten(&maps_dir.join("discriminative.dten"), t)?;
        write_json(&maps_dir.join("discriminative.json"), &meta)?;
    }
    if let Some(t) = &anno.merged {
        write_dten(&maps_dir.join("merged.dten"), t)?;
        write_json(&maps_dir.join("merged.json"), &meta)?;
    }
    write_dten(&maps_dir.join("unary.dten"), &anno.unary.to_tensor())?;
    write_json(
        &maps_dir.join("unary.json"),
        &DtenMeta {
            axes: vec!["height".into(), "width".into(), "class".into()],
            class_names: Some(names.to_vec()),
        },
    )?;
    for (column, mask) in &anno.masks {
        let col_dir = out_dir.join("masks").join(column);
        fs::create_dir_all(&col_dir)?;
        write_mask(&col_dir.join(format!("{}.pgm", scene.id)), mask)?;
        write_json(&col_dir.join(format!("{}.json", scene.id)), &mask_meta(names))?;
    }
    Ok(())
}

/// Annotate every scene, writing maps and raw mask columns under `out_dir`.
/// Returns the column names written.
pub fn annotate_dataset(
    spec: &ExperimentSpec,
    model: &TrainedModel,
    manifest: &DatasetManifest,
    scenes: &[LoadedScene],
    out_dir: &Path,
) -> Result<Vec<String>> {
    if model.num_classes() != manifest.num_classes - 1 {
        return Err(Error::Data(format!(
            "model scores {} classes but dataset has {} foreground classes",
            model.num_classes(),
            manifest.num_classes - 1
        )));
    }
    let annotations: Vec<(usize, SceneAnnotation)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let anno = annotate_scene(spec, model, scene, manifest.num_classes)?;
            write_scene_annotation(out_dir, &manifest.class_names, scene, &anno)?;
            Ok((i, anno))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut columns: Vec<String> = annotations
        .first()
        .map(|(_, a)| a.masks.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    columns.dedup();
    Ok(columns)
}

// ── CRF refinement ──────────────────────────────────────────────────────────

/// Refine one mask with mean-field inference over its unary probabilities.
pub fn refine_mask(
    spec: &ExperimentSpec,
    mask: &PseudoMask,
    labels: &[u8],
    image: &Tensor,
    num_classes: usize,
) -> Result<PseudoMask> {
    let mut present = vec![BACKGROUND];
    present.extend_from_slice(labels);
    let field = build_unary(mask, &present, num_classes, spec.tau)?;
    let unary = Unary::from_prob_field(&field, &present)?;
    let q = mean_field(&unary, image, &spec.crf)?;
    argmax_mask(&q, unary.labels())
}

/// Refine a mask column on disk: reads `masks/<column>/<id>.pgm`, writes
/// `masks/<column>-crf/<id>.pgm`. Returns the refined column name.
pub fn refine_dataset(
    spec: &ExperimentSpec,
    manifest: &DatasetManifest,
    scenes: &[LoadedScene],
    run_dir: &Path,
    column: &str,
) -> Result<String> {
    let refined_column = format!("{column}-crf");
    let col_dir = run_dir.join("masks").join(column);
    let out_dir = run_dir.join("masks").join(&refined_column);
    fs::create_dir_all(&out_dir)?;
    for scene in scenes {
        let mask = read_mask(&col_dir.join(format!("{}.pgm", scene.id)))?;
        let refined = refine_mask(spec, &mask, &scene.labels, &scene.image, manifest.num_classes)?;
        write_mask(&out_dir.join(format!("{}.pgm", scene.id)), &refined)?;
        write_json(
            &out_dir.join(format!("{}.json", scene.id)),
            &mask_meta(&manifest.class_names),
        )?;
    }
    Ok(refined_column)
}

// ── Evaluation ──────────────────────────────────────────────────────────────

/// Score one mask column on disk against the dataset's ground truth.
pub fn evaluate_column(
    spec: &ExperimentSpec,
    manifest: &DatasetManifest,
    scenes: &[LoadedScene],
    masks_root: &Path,
    column: &str,
) -> Result<Scores> {
    let col_dir = masks_root.join(column);
    let mut tally = ConfusionTally::new(manifest.num_classes);
    for scene in scenes {
        let pred = read_mask(&col_dir.join(format!("{}.pgm", scene.id)))?;
        tally.accumulate(&pred, &scene.gt_mask)?;
    }
    Ok(score(&tally, spec.include_background))
}

// ── Full pipeline ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnReport {
    pub column: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub variant: Variant,
    pub columns: Vec<ColumnReport>,
}

impl PipelineReport {
    pub fn column(&self, name: &str) -> Option<&Scores> {
        self.columns
            .iter()
            .find(|c| c.column == name)
            .map(|c| &c.scores)
    }

    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!("variant: {}\n\n", self.variant));
        out.push_str(&format!(
            "{:<20} {:>7} {:>7} {:>7}\n",
            "column", "mS_IoU", "mS_prec", "mS_rec"
        ));
        for c in &self.columns {
            let cell = |v: Option<f64>| match v {
                Some(x) => format!("{x:>7.4}"),
                None => format!("{:>7}", "-"),
            };
            out.push_str(&format!(
                "{:<20} {} {} {}\n",
                c.column,
                cell(c.scores.mean_iou),
                cell(c.scores.mean_precision),
                cell(c.scores.mean_recall)
            ));
        }
        for c in &self.columns {
            out.push_str(&format!("\n[{}]\n", c.column));
            out.push_str(&c.scores.to_text(class_names));
        }
        out
    }
}

/// Wall-clock timings of the pipeline stages; reported to the caller but
/// never written into artifacts, which must stay byte-reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineTimings {
    pub train_seconds: f64,
    pub annotate_seconds: f64,
    pub refine_seconds: f64,
    pub eval_seconds: f64,
}

/// Train, annotate, optionally refine, and evaluate. Artifacts land under
/// `out_dir`; the report compares every mask column against ground truth.
pub fn run_pipeline(
    spec: &ExperimentSpec,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<(PipelineReport, PipelineTimings)> {
    spec.validate()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    let scenes = load_scenes(dataset_dir, &manifest)?;
    if scenes.is_empty() {
        return Err(Error::Data("dataset has no scenes".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut timings = PipelineTimings::default();

    let t0 = Instant::now();
    let (model, train_report) = train_model(spec, &manifest, &scenes)?;
    timings.train_seconds = t0.elapsed().as_secs_f64();
    save_model(&out_dir.join("checkpoint"), &model, &manifest.class_names)?;
    write_json(&out_dir.join("loss_curve.json"), &train_report)?;

    let t1 = Instant::now();
    let mut columns = annotate_dataset(spec, &model, &manifest, &scenes, out_dir)?;
    timings.annotate_seconds = t1.elapsed().as_secs_f64();

    if spec.use_crf {
        let t2 = Instant::now();
        let refined = refine_dataset(spec, &manifest, &scenes, out_dir, primary_column(spec.variant))?;
        columns.push(refined);
        timings.refine_seconds = t2.elapsed().as_secs_f64();
    }

    let t3 = Instant::now();
    let mut reports = Vec::new();
    for column in &columns {
        let scores = evaluate_column(spec, &manifest, &scenes, &out_dir.join("masks"), column)?;
        reports.push(ColumnReport {
            column: column.clone(),
            scores,
        });
    }
    timings.eval_seconds = t3.elapsed().as_secs_f64();

    let report = PipelineReport {
        variant: spec.variant,
        columns: reports,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    fs::write(
        out_dir.join("report.txt"),
        report.to_text(&manifest.class_names),
    )?;
    Ok((report, timings))
}

// ── Dropout sweep ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub ms_iou: Option<f64>,
    pub ms_precision: Option<f64>,
    pub ms_recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub variant: Variant,
    pub column: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Rates as columns, one row per metric.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:>7.4}"),
            None => format!("{:>7}", "-"),
        };
        let mut out = String::new();
        out.push_str(&format!("{:<8}", "DR"));
        for row in &self.rows {
            out.push_str(&format!("{:>8.2}", row.rate));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "mS_prec"));
        for row in &self.rows {
            out.push_str(&format!(" {}", cell(row.ms_precision)));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "mS_rec"));
        for row in &self.rows {
            out.push_str(&format!(" {}", cell(row.ms_recall)));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "mS_IoU"));
        for row in &self.rows {
            out.push_str(&format!(" {}", cell(row.ms_iou)));
        }
        out.push('\n');
        out
    }
}

/// Train one model per dropout rate and score the primary raw-mask column
/// for each, all with the same training seed.
pub fn run_dropout_sweep(
    spec: &ExperimentSpec,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<SweepTable> {
    spec.validate()?;
    if spec.variant == Variant::Conventional {
        return Err(Error::Config(
            "the conventional baseline has no dropout to sweep".into(),
        ));
    }
    let manifest = DatasetManifest::load(dataset_dir)?;
    let scenes = load_scenes(dataset_dir, &manifest)?;
    if scenes.is_empty() {
        return Err(Error::Data("dataset has no scenes".into()));
    }
    fs::create_dir_all(out_dir)?;

    let column = primary_column(spec.variant).to_string();
    let mut rows = Vec::with_capacity(spec.dropout_rates.len());
    for &rate in &spec.dropout_rates {
        let mut rate_spec = spec.clone();
        rate_spec.dropout_rate = rate;
        let (model, _) = train_model(&rate_spec, &manifest, &scenes)?;
        let mut tally = ConfusionTally::new(manifest.num_classes);
        let per_scene: Vec<ConfusionTally> = scenes
            .par_iter()
            .map(|scene| {
                let anno = annotate_scene(&rate_spec, &model, scene, manifest.num_classes)?;
                let mask = &anno
                    .masks
                    .iter()
                    .find(|(name, _)| *name == column)
                    .expect("primary column always produced")
                    .1;
                let mut t = ConfusionTally::new(manifest.num_classes);
                t.accumulate(mask, &scene.gt_mask)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        for t in &per_scene {
            tally.merge(t)?;
        }
        let scores = score(&tally, spec.include_background);
        rows.push(SweepRow {
            rate,
            ms_iou: scores.mean_iou,
            ms_precision: scores.mean_precision,
            ms_recall: scores.mean_recall,
        });
    }
    let table = SweepTable {
        variant: spec.variant,
        column,
        rows,
    };
    write_json(&out_dir.join("sweep.json"), &table)?;
    fs::write(out_dir.join("sweep.txt"), table.to_text())?;
    Ok(table)
}

/// Re-annotate with a stored checkpoint (the CLI `annotate` verb).
pub fn annotate_with_checkpoint(
    spec: &ExperimentSpec,
    checkpoint_dir: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let (model, _) = load_model(checkpoint_dir)?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    let scenes = load_scenes(dataset_dir, &manifest)?;
    fs::create_dir_all(out_dir)?;
    annotate_dataset(spec, &model, &manifest, &scenes, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            dataset: DatasetConfig {
                count: 6,
                width: 16,
                height: 16,
                num_classes: 3,
                feature_dim: 4,
                seed: 5,
                ..DatasetConfig::default()
            },
            train: TrainConfig {
                total_epochs: 4,
                decay_epoch: 2,
                seed: 5,
                ..TrainConfig::default()
            },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn gen_zero_scenes_writes_empty_manifest() {
        let dir = TempDir::new().unwrap();
        let cfg = DatasetConfig {
            count: 0,
            ..tiny_spec().dataset
        };
        let manifest = gen_synthetic(&cfg, dir.path()).unwrap();
        assert!(manifest.scenes.is_empty());
        assert!(dir.path().join("manifest.json").exists());
        assert!(!dir.path().join("scenes").exists());
    }

    #[test]
    fn gen_is_deterministic_per_seed() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let cfg = DatasetConfig {
            count: 2,
            width: 12,
            height: 12,
            num_classes: 3,
            feature_dim: 4,
            seed: 9,
            ..DatasetConfig::default()
        };
        gen_synthetic(&cfg, a.path()).unwrap();
        gen_synthetic(&cfg, b.path()).unwrap();
        for rel in [
            "manifest.json",
            "scenes/scene_0000/features.dten",
            "scenes/scene_0000/image.ppm",
            "scenes/scene_0000/gt_mask.pgm",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel} differs"
            );
        }
    }

    #[test]
    fn pipeline_without_crf_matches_raw_columns_of_crf_run() {
        let data = TempDir::new().unwrap();
        let spec = tiny_spec();
        gen_synthetic(&spec.dataset, data.path()).unwrap();

        let run_a = TempDir::new().unwrap();
        let mut spec_a = spec.clone();
        spec_a.use_crf = false;
        let (report_a, _) = run_pipeline(&spec_a, data.path(), run_a.path()).unwrap();

        let run_b = TempDir::new().unwrap();
        let mut spec_b = spec.clone();
        spec_b.use_crf = true;
        let (report_b, _) = run_pipeline(&spec_b, data.path(), run_b.path()).unwrap();

        for column in ["expansive", "discriminative", "merged"] {
            let a = report_a.column(column).unwrap();
            let b = report_b.column(column).unwrap();
            assert_eq!(a.mean_iou, b.mean_iou, "{column} mean iou");
            assert_eq!(a.mean_precision, b.mean_precision);
            assert_eq!(a.mean_recall, b.mean_recall);
        }
        assert!(report_a.column("merged-crf").is_none());
        assert!(report_b.column("merged-crf").is_some());
    }

    #[test]
    fn pipeline_report_has_three_variants_and_three_metrics() {
        let data = TempDir::new().unwrap();
        let mut spec = tiny_spec();
        spec.use_crf = false;
        gen_synthetic(&spec.dataset, data.path()).unwrap();
        let run = TempDir::new().unwrap();
        let (report, _) = run_pipeline(&spec, data.path(), run.path()).unwrap();
        for column in ["expansive", "discriminative", "merged"] {
            let s = report.column(column).unwrap();
            assert!(s.mean_iou.is_some());
            assert!(s.mean_precision.is_some());
            assert!(s.mean_recall.is_some());
        }
        assert!(run.path().join("report.json").exists());
        assert!(run.path().join("report.txt").exists());
        assert!(run.path().join("maps/scene_0000/merged.dten").exists());
        assert!(run.path().join("maps/scene_0000/unary.dten").exists());
        assert!(run.path().join("masks/merged/scene_0000.pgm").exists());
    }

    #[test]
    fn sweep_single_rate_gives_single_row_and_duplicates_repeat() {
        let data = TempDir::new().unwrap();
        let mut spec = tiny_spec();
        spec.dropout_rates = vec![0.4];
        gen_synthetic(&spec.dataset, data.path()).unwrap();
        let out = TempDir::new().unwrap();
        let table = run_dropout_sweep(&spec, data.path(), out.path()).unwrap();
        assert_eq!(table.rows.len(), 1);

        spec.dropout_rates = vec![0.4, 0.4];
        let out2 = TempDir::new().unwrap();
        let table2 = run_dropout_sweep(&spec, data.path(), out2.path()).unwrap();
        assert_eq!(table2.rows.len(), 2);
        assert_eq!(table2.rows[0].ms_iou, table2.rows[1].ms_iou);
        assert_eq!(table2.rows[0].ms_precision, table2.rows[1].ms_precision);
    }

    #[test]
    fn sweep_rejects_conventional_variant() {
        let data = TempDir::new().unwrap();
        let mut spec = tiny_spec();
        spec.variant = Variant::Conventional;
        gen_synthetic(&spec.dataset, data.path()).unwrap();
        let out = TempDir::new().unwrap();
        assert!(matches!(
            run_dropout_sweep(&spec, data.path(), out.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_variants_produce_their_primary_column() {
        let data = TempDir::new().unwrap();
        let mut spec = tiny_spec();
        spec.use_crf = false;
        gen_synthetic(&spec.dataset, data.path()).unwrap();
        for variant in [Variant::Decoupled, Variant::Conventional, Variant::SingleStream] {
            spec.variant = variant;
            let run = TempDir::new().unwrap();
            let (report, _) = run_pipeline(&spec, data.path(), run.path()).unwrap();
            assert!(
                report.column(primary_column(variant)).is_some(),
                "{variant} missing primary column"
            );
        }
    }
}
