//! Training: loss, learning-rate schedule, dataset splitting and the epoch
//! loop.

pub mod loss;
pub mod schedule;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{zero_grad, AdamW, AdamWConfig, Tensor};
use crate::preprocess::{prepare_input, FusionConfig};
use crate::refnet::{Mode, Model, ModelConfig};
use crate::volume::{LabelVolume, ScanVolume, NUM_CLASSES};

pub use loss::{
    class_losses, cross_entropy, jaccard_class_loss, jaccard_class_loss_grad, one_hot,
    total_loss, total_loss_grad, ClassWeights, LossConfig,
};
pub use schedule::{fit, Decision, EpochLosses, EpochRecord, Schedule, ScheduleConfig, TrainHistory};

/// How flip augmentation expands the B-scan pool each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    None,
    /// Each B-scan is flipped with probability one half.
    Random,
    /// Each B-scan appears both as is and mirrored.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    pub seed: u64,
    /// Fusion weight for the input; `None` trains on OCT alone.
    pub beta: Option<FusionConfig>,
    pub weight_decay: f64,
    /// Fraction of training eyes held out to monitor the schedule.
    pub validation_fraction: f64,
    /// Caps the number of B-scans drawn per epoch.
    pub samples_per_epoch: Option<usize>,
    pub flip: FlipMode,
    /// Validation uses every n-th B-scan.
    pub val_bscan_stride: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 15,
            max_epochs: 100,
            batch_size: 8,
            split_ratio: 40.0 / 51.0,
            seed: 0,
            beta: Some(FusionConfig { beta: 0.2 }),
            weight_decay: 1e-4,
            validation_fraction: 0.1,
            samples_per_epoch: None,
            flip: FlipMode::Both,
            val_bscan_stride: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            initial_lr: self.initial_lr,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.loss.validate()?;
        if let Some(f) = &self.beta {
            f.validate()?;
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 || self.val_bscan_stride == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and val_bscan_stride must be at least 1".into(),
            ));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::InvalidConfig("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// One scan with its reference labels; OCTA is needed only for fusion.
#[derive(Clone, Debug)]
pub struct LabeledVolume {
    pub oct: ScanVolume,
    pub octa: Option<ScanVolume>,
    pub labels: LabelVolume,
}

impl LabeledVolume {
    pub fn volume_id(&self) -> &str {
        &self.oct.volume_id
    }

    /// Eye identifier, falling back to the volume id.
    pub fn eye_id(&self) -> &str {
        self.oct.eye_id.as_deref().unwrap_or(&self.oct.volume_id)
    }

    pub fn validate(&self) -> Result<()> {
        self.oct.validate()?;
        self.labels.validate()?;
        if self.labels.shape != self.oct.shape {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs scan {:?}",
                self.labels.shape.as_array(),
                self.oct.shape.as_array()
            )));
        }
        if let Some(a) = &self.octa {
            a.validate()?;
            if a.shape != self.oct.shape {
                return Err(Error::ShapeMismatch(format!(
                    "octa {:?} vs oct {:?}",
                    a.shape.as_array(),
                    self.oct.shape.as_array()
                )));
            }
        }
        self.labels.require_complete()
    }

    /// The network input for this volume under `fusion`.
    pub fn input(&self, fusion: Option<FusionConfig>) -> Result<ScanVolume> {
        prepare_input(&self.oct, self.octa.as_ref(), fusion)
    }
}

/// Shuffles `ids` with `seed` and puts `round(ratio * n)` of them in the
/// first set. Both halves are returned sorted.
pub fn split_dataset(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::Empty("cannot split an empty id list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidConfig("ids must be distinct".into()));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ids.len() as f64).round() as usize).min(ids.len());
    let mut test = shuffled.split_off(n_train);
    shuffled.sort();
    test.sort();
    Ok((shuffled, test))
}

/// Splits `(volume_id, eye_id)` pairs so that all volumes of an eye land on
/// the same side; `ratio` applies to eyes. Returns volume ids.
pub fn split_by_eye(
    volumes: &[(String, String)],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    let mut eyes: Vec<String> = Vec::new();
    for (_, eye) in volumes {
        if !eyes.contains(eye) {
            eyes.push(eye.clone());
        }
    }
    let (train_eyes, _) = split_dataset(&eyes, ratio, seed)?;
    let train_eyes: BTreeSet<&String> = train_eyes.iter().collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (v, eye) in volumes {
        if train_eyes.contains(eye) {
            a.push(v.clone());
        } else {
            b.push(v.clone());
        }
    }
    a.sort();
    b.sort();
    Ok((a, b))
}

struct Prepared {
    inputs: Vec<ScanVolume>,
    labels: Vec<LabelVolume>,
}

impl Prepared {
    fn new(volumes: &[&LabeledVolume], fusion: Option<FusionConfig>) -> Result<Self> {
        let mut inputs = Vec::with_capacity(volumes.len());
        let mut labels = Vec::with_capacity(volumes.len());
        for v in volumes {
            inputs.push(v.input(fusion)?);
            labels.push(v.labels.clone());
        }
        Ok(Self { inputs, labels })
    }

    /// Copies B-scan `b` of volume `v` into `img`/`codes`, mirrored when
    /// `flip` is set.
    fn fill(&self, v: usize, b: usize, flip: bool, img: &mut [f32], codes: &mut Vec<u8>) {
        let w = self.inputs[v].shape.width;
        let src = self.inputs[v].bscan(b);
        let lab = self.labels[v].bscan(b);
        codes.clear();
        codes.extend_from_slice(lab);
        img.copy_from_slice(src);
        if flip {
            for row in img.chunks_exact_mut(w) {
                row.reverse();
            }
            for row in codes.chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    volume: usize,
    bscan: usize,
    flip: bool,
}

fn epoch_samples(data: &Prepared, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let mut out = Vec::new();
    for (v, input) in data.inputs.iter().enumerate() {
        for b in 0..input.shape.n_bscans {
            match cfg.flip {
                FlipMode::None => out.push(Sample { volume: v, bscan: b, flip: false }),
                FlipMode::Random => out.push(Sample {
                    volume: v,
                    bscan: b,
                    flip: rng.random_bool(0.5),
                }),
                FlipMode::Both => {
                    out.push(Sample { volume: v, bscan: b, flip: false });
                    out.push(Sample { volume: v, bscan: b, flip: true });
                }
            }
        }
    }
    out.shuffle(rng);
    if let Some(cap) = cfg.samples_per_epoch {
        out.truncate(cap);
    }
    out
}

/// Loss gradient for a batch of probabilities against label maps, scaled
/// by `1 / batch` so the step follows the batch-mean loss. Returns the summed
/// per-image loss.
fn batch_loss_grad(
    probs: &Tensor,
    codes: &[Vec<u8>],
    loss: &LossConfig,
    grad: &mut Tensor,
) -> Result<f64> {
    let pixels = probs.plane();
    let scale = 1.0 / probs.n as f64;
    let mut sum = 0.0;
    for (i, c) in codes.iter().enumerate() {
        let y = one_hot(c);
        let (l, g) = total_loss_grad(&y, probs.image(i), pixels, loss)?;
        sum += l;
        for (d, v) in grad.image_mut(i).iter_mut().zip(g) {
            *d = (v * scale) as f32;
        }
    }
    Ok(sum)
}

fn validation_loss(model: &Model, data: &Prepared, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut idx = Vec::new();
    for (v, input) in data.inputs.iter().enumerate() {
        for b in (0..input.shape.n_bscans).step_by(cfg.val_bscan_stride) {
            idx.push((v, b));
        }
    }
    for chunk in idx.chunks(cfg.batch_size) {
        let s = data.inputs[chunk[0].0].shape;
        let mut x = Tensor::zeros(chunk.len(), 1, s.depth, s.width);
        let mut codes = Vec::with_capacity(chunk.len());
        for (i, &(v, b)) in chunk.iter().enumerate() {
            let mut c = Vec::new();
            data.fill(v, b, false, x.image_mut(i), &mut c);
            codes.push(c);
        }
        let probs = model.predict(&x)?;
        for (i, c) in codes.iter().enumerate() {
            total += total_loss(&one_hot(c), probs.image(i), probs.plane(), &cfg.loss)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Trains a fresh model on `volumes`, holding out a fraction of eyes for the
/// plateau/early-stop monitor, and returns the weights from the epoch with
/// the lowest validation loss.
pub fn train(
    volumes: &[LabeledVolume],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if volumes.is_empty() {
        return Err(Error::Empty("no training volumes".into()));
    }
    let shape = volumes[0].oct.shape;
    for v in volumes {
        v.validate()?;
        if v.oct.shape != shape {
            return Err(Error::ShapeMismatch(
                "training volumes must share one shape".into(),
            ));
        }
    }
    let pairs: Vec<(String, String)> = volumes
        .iter()
        .map(|v| (v.volume_id().to_string(), v.eye_id().to_string()))
        .collect();
    let n_eyes = pairs.iter().map(|p| &p.1).collect::<BTreeSet<_>>().len();
    let (fit_ids, val_ids) = if n_eyes >= 2 && config.validation_fraction > 0.0 {
        let n_val = ((config.validation_fraction * n_eyes as f64).round() as usize).clamp(1, n_eyes - 1);
        split_by_eye(&pairs, 1.0 - n_val as f64 / n_eyes as f64, config.seed ^ 0x7661_6c69)?
    } else {
        // A single eye cannot be split; monitor the training set itself.
        let all: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        (all.clone(), all)
    };
    let pick = |ids: &[String]| -> Vec<&LabeledVolume> {
        volumes
            .iter()
            .filter(|v| ids.iter().any(|i| i == v.volume_id()))
            .collect()
    };
    let train_data = Prepared::new(&pick(&fit_ids), config.beta)?;
    let val_data = Prepared::new(&pick(&val_ids), config.beta)?;

    let mut model = Model::build(model_config.clone())?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.initial_lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(f64, Model)> = None;
    let plane = shape.bscan_len();

    let history = fit(config.schedule(), |_, lr| {
        model.set_mode(Mode::Train);
        opt.set_lr(lr);
        let samples = epoch_samples(&train_data, config, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in samples.chunks(config.batch_size) {
            let mut x = Tensor::zeros(chunk.len(), 1, shape.depth, shape.width);
            let mut codes = Vec::with_capacity(chunk.len());
            for (i, s) in chunk.iter().enumerate() {
                let mut c = Vec::with_capacity(plane);
                train_data.fill(s.volume, s.bscan, s.flip, x.image_mut(i), &mut c);
                codes.push(c);
            }
            zero_grad(&mut model);
            let probs = model.forward(&x)?;
            let mut grad = Tensor::zeros(chunk.len(), NUM_CLASSES, shape.depth, shape.width);
            loss_sum += batch_loss_grad(&probs, &codes, &config.loss, &mut grad)?;
            model.backward(&grad)?;
            opt.step(&mut model);
        }
        model.set_mode(Mode::Eval);
        let val = validation_loss(&model, &val_data, config)?;
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, model.clone()));
        }
        Ok(EpochLosses {
            train: loss_sum / samples.len().max(1) as f64,
            val,
        })
    })?;
    let mut out = best.map(|(_, m)| m).unwrap_or(model);
    out.set_mode(Mode::Eval);
    Ok((out, history))
}
