//! Fluid-class agreement metrics and the fusion-weight sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::FusionConfig;
use crate::refnet::{Model, ModelConfig};
use crate::trainer::{split_by_eye, train, LabeledVolume, TrainConfig, TrainHistory};
use crate::volume::{codes, LabelVolume, ProbabilityVolume, ScanVolume, NUM_CLASSES};

/// Fluid-versus-rest pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion_codes(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} voxels, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        if t == codes::UNRESOLVED {
            return Err(Error::UnresolvedLabels(truth.iter().filter(|&&x| x == codes::UNRESOLVED).count()));
        }
        match (p == codes::FLUID, t == codes::FLUID) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion(pred: &LabelVolume, truth: &LabelVolume) -> Result<ConfusionCounts> {
    if pred.shape != truth.shape {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape.as_array(),
            truth.shape.as_array()
        )));
    }
    truth.require_complete()?;
    confusion_codes(&pred.codes, &truth.codes)
}

/// `2TP / (2TP + FP + FN)`, and 1 when there is no fluid in either map.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `TP / (TP + FP + FN)`, and 1 when the denominator is zero.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic, using average
/// ranks for tied scores.
pub fn aroc<S: Into<f64> + Copy>(scores: &[S], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::ArocUndefined {
            positives: pos,
            negatives: neg,
        });
    }
    let vals: Vec<f64> = scores.iter().map(|&s| s.into()).collect();
    let mut order: Vec<u32> = (0..vals.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| vals[a as usize].total_cmp(&vals[b as usize]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && vals[order[j] as usize] == vals[order[i] as usize] {
            j += 1;
        }
        // Ranks i+1 ..= j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        let n_pos = order[i..j].iter().filter(|&&k| truth[k as usize]).count();
        rank_sum_pos += avg * n_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Anything that maps a prepared input volume to class probabilities.
pub trait VolumeSegmenter {
    fn segment(&self, input: &ScanVolume) -> Result<ProbabilityVolume>;
}

impl VolumeSegmenter for Model {
    fn segment(&self, input: &ScanVolume) -> Result<ProbabilityVolume> {
        self.predict_volume(input, 8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub iou: f64,
    /// Absent when the reference has no fluid (or only fluid).
    pub aroc: Option<f64>,
}

pub fn volume_metrics(probs: &ProbabilityVolume, truth: &LabelVolume) -> Result<VolumeMetrics> {
    if probs.shape != truth.shape {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs truth {:?}",
            probs.shape.as_array(),
            truth.shape.as_array()
        )));
    }
    truth.require_complete()?;
    let pred = probs.argmax();
    let counts = confusion_codes(&pred.codes, &truth.codes)?;
    let fluid = probs.class_channel(codes::FLUID as usize);
    let is_fluid: Vec<bool> = truth.codes.iter().map(|&c| c == codes::FLUID).collect();
    let aroc = match aroc(&fluid, &is_fluid) {
        Ok(a) => Some(a),
        Err(Error::ArocUndefined { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(VolumeMetrics {
        volume_id: truth.volume_id.clone(),
        counts,
        f1: f1(&counts),
        iou: iou(&counts),
        aroc,
    })
}

/// Mean and population standard deviation across test volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub aroc_mean: f64,
    pub aroc_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub volumes: usize,
    /// Volumes left out of the AROC average for lack of positives or
    /// negatives.
    pub aroc_skipped: usize,
    pub best: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn aggregate(label: &str, per_volume: &[VolumeMetrics]) -> Result<MetricRow> {
    if per_volume.is_empty() {
        return Err(Error::Empty("no volumes to aggregate".into()));
    }
    let f: Vec<f64> = per_volume.iter().map(|m| m.f1).collect();
    let j: Vec<f64> = per_volume.iter().map(|m| m.iou).collect();
    let a: Vec<f64> = per_volume.iter().filter_map(|m| m.aroc).collect();
    let (f1_mean, f1_std) = mean_std(&f);
    let (iou_mean, iou_std) = mean_std(&j);
    let (aroc_mean, aroc_std) = mean_std(&a);
    Ok(MetricRow {
        label: label.to_string(),
        aroc_mean,
        aroc_std,
        iou_mean,
        iou_std,
        f1_mean,
        f1_std,
        volumes: per_volume.len(),
        aroc_skipped: per_volume.len() - a.len(),
        best: false,
    })
}

/// Scores already computed probability volumes against their references.
pub fn evaluate_predictions(
    label: &str,
    pairs: &[(ProbabilityVolume, LabelVolume)],
) -> Result<(MetricRow, Vec<VolumeMetrics>)> {
    let per: Vec<VolumeMetrics> = pairs
        .iter()
        .map(|(p, t)| volume_metrics(p, t))
        .collect::<Result<_>>()?;
    Ok((aggregate(label, &per)?, per))
}

/// Runs `model` over every test volume (inputs prepared with `beta`) and
/// aggregates fluid F1, IoU and AROC.
pub fn evaluate_model(
    model: &dyn VolumeSegmenter,
    test: &[LabeledVolume],
    beta: Option<FusionConfig>,
    label: &str,
) -> Result<(MetricRow, Vec<VolumeMetrics>)> {
    if test.is_empty() {
        return Err(Error::Empty("no test volumes".into()));
    }
    let mut per = Vec::with_capacity(test.len());
    for v in test {
        v.labels.require_complete()?;
        let probs = model.segment(&v.input(beta)?)?;
        per.push(volume_metrics(&probs, &v.labels)?);
    }
    Ok((aggregate(label, &per)?, per))
}

/// Flags the row with the highest mean F1 (AROC breaks ties).
pub fn mark_best(rows: &mut [MetricRow]) {
    let best = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            a.f1_mean
                .total_cmp(&b.f1_mean)
                .then(a.aroc_mean.total_cmp(&b.aroc_mean))
        })
        .map(|(i, _)| i);
    for (i, r) in rows.iter_mut().enumerate() {
        r.best = Some(i) == best;
    }
}

pub fn rows_to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("label,aroc_mean,aroc_std,iou_mean,iou_std,f1_mean,f1_std,volumes,aroc_skipped,best\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            r.label,
            r.aroc_mean,
            r.aroc_std,
            r.iou_mean,
            r.iou_std,
            r.f1_mean,
            r.f1_std,
            r.volumes,
            r.aroc_skipped,
            r.best
        ));
    }
    s
}

pub fn rows_to_table(rows: &[MetricRow]) -> String {
    let mut s = format!(
        "{:<12} {:>17} {:>17} {:>17}\n",
        "model", "AROC", "IoU", "F1"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3} {:>8.3} ± {:<6.3}{}\n",
            r.label,
            r.aroc_mean,
            r.aroc_std,
            r.iou_mean,
            r.iou_std,
            r.f1_mean,
            r.f1_std,
            if r.best { " *" } else { "" }
        ));
    }
    s
}

pub fn row_label(beta: Option<f64>) -> String {
    match beta {
        None => "oct-only".to_string(),
        Some(b) => format!("beta={b:.2}"),
    }
}

/// One trained model of a sweep with its scores.
#[derive(Debug)]
pub struct SweepEntry {
    pub beta: Option<f64>,
    pub model: Model,
    pub history: TrainHistory,
    pub per_volume: Vec<VolumeMetrics>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// OCT-only first, then one row per beta in the order given.
    pub rows: Vec<MetricRow>,
    pub entries: Vec<SweepEntry>,
}

/// Splits `dataset` once by eye, then trains and scores an OCT-only model and
/// one fused model per beta on the shared split.
pub fn sweep_beta(
    dataset: &[LabeledVolume],
    betas: &[f64],
    train_config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<SweepOutcome> {
    if betas.is_empty() {
        return Err(Error::Empty("no beta values to sweep".into()));
    }
    for &b in betas {
        FusionConfig::new(b)?;
    }
    let pairs: Vec<(String, String)> = dataset
        .iter()
        .map(|v| (v.volume_id().to_string(), v.eye_id().to_string()))
        .collect();
    let (train_ids, test_ids) = split_by_eye(&pairs, train_config.split_ratio, train_config.seed)?;
    let select = |ids: &[String]| -> Vec<LabeledVolume> {
        dataset
            .iter()
            .filter(|v| ids.iter().any(|i| i == v.volume_id()))
            .cloned()
            .collect()
    };
    let train_set = select(&train_ids);
    let test_set = select(&test_ids);
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    let settings = std::iter::once(None).chain(betas.iter().map(|&b| Some(b)));
    for beta in settings {
        let fusion = beta.map(|b| FusionConfig { beta: b });
        let cfg = TrainConfig {
            beta: fusion,
            ..train_config.clone()
        };
        let (model, history) = train(&train_set, &cfg, model_config)?;
        let (row, per_volume) = evaluate_model(&model, &test_set, fusion, &row_label(beta))?;
        rows.push(row);
        entries.push(SweepEntry {
            beta,
            model,
            history,
            per_volume,
        });
    }
    mark_best(&mut rows);
    Ok(SweepOutcome {
        train_ids,
        test_ids,
        rows,
        entries,
    })
}

/// Outputs the reference labels one-hot; a perfect segmenter for tests and
/// calibration.
pub struct OracleSegmenter<'a> {
    pub truth: &'a [LabelVolume],
}

impl VolumeSegmenter for OracleSegmenter<'_> {
    fn segment(&self, input: &ScanVolume) -> Result<ProbabilityVolume> {
        let t = self
            .truth
            .iter()
            .find(|t| t.volume_id == input.volume_id)
            .ok_or_else(|| Error::Empty(format!("no reference for {}", input.volume_id)))?;
        let mut probs = vec![0f32; t.codes.len() * NUM_CLASSES];
        for (i, &c) in t.codes.iter().enumerate() {
            probs[i * NUM_CLASSES + c as usize] = 1.0;
        }
        Ok(ProbabilityVolume {
            shape: t.shape,
            spacing: t.spacing,
            volume_id: t.volume_id.clone(),
            eye_id: t.eye_id.clone(),
            extras: Default::default(),
            probs,
        })
    }
}
