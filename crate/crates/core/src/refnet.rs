//! ReF-Net: a U-shaped encoder-decoder with a multi-scale input block and
//! residual convolutional blocks, producing per-pixel probabilities for
//! background, tissue and fluid.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, maxpool2x2, maxpool2x2_backward, softmax_channels,
    softmax_channels_backward, split_channels, upsample2x, upsample2x_backward, Conv2d, ConvUnit,
    Module, Param, ResBlock, Tensor,
};
use crate::volume::{ProbabilityVolume, ScanVolume, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Batch,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub num_classes: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub multiscale_kernels: Vec<usize>,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            num_classes: NUM_CLASSES,
            levels: 4,
            base_channels: 32,
            multiscale_kernels: vec![1, 3, 5, 7],
            normalization: Normalization::Batch,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be 3, got {}", self.num_classes));
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1".into());
        }
        if self.input_channels == 0 {
            return bad("input_channels must be at least 1".into());
        }
        if self.multiscale_kernels.is_empty()
            || self.multiscale_kernels.iter().any(|&k| k == 0 || k % 2 == 0)
        {
            return bad(format!(
                "multiscale kernels must be odd and positive, got {:?}",
                self.multiscale_kernels
            ));
        }
        Ok(())
    }

    /// Channel count at encoder level `l` (0 = full resolution).
    pub fn channels_at(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Spatial dims are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inference-time lesions used to check that the skip connections are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Zero the bottleneck output before decoding.
    pub zero_bottleneck: bool,
    /// Zero the skip connection leaving encoder level `l`.
    pub zero_skip: Option<usize>,
}

#[derive(Clone, Debug)]
struct MultiScaleBlock {
    branches: Vec<ConvUnit>,
    proj: ConvUnit,
}

impl MultiScaleBlock {
    fn forward(&self, x: &Tensor) -> Tensor {
        let outs: Vec<Tensor> = self.branches.iter().map(|b| b.forward(x)).collect();
        self.proj.forward(&concat_all(&outs))
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let outs: Vec<Tensor> = self.branches.iter_mut().map(|b| b.forward_train(x)).collect();
        self.proj.forward_train(&concat_all(&outs))
    }

    fn backward(&mut self, dy: &Tensor) {
        let mut rest = self.proj.backward(dy);
        for b in &mut self.branches {
            let c = b.conv.out_channels;
            let (head, tail) = split_channels(&rest, c);
            b.backward(&head);
            rest = tail;
        }
    }
}

fn concat_all(ts: &[Tensor]) -> Tensor {
    let mut it = ts.iter();
    let first = it.next().expect("at least one tensor").clone();
    it.fold(first, |acc, t| concat_channels(&acc, t))
}

impl Module for MultiScaleBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&format!("{prefix}.branch{i}"), f);
        }
        self.proj.visit(&format!("{prefix}.proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.branch{i}"), f);
        }
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
    }
}

/// Upsampling stage: a 1x1 convolution at the coarse resolution followed by
/// nearest-neighbour 2x upsampling (equal to upsample-then-convolve, at a
/// quarter of the cost), concatenation with the skip, then a residual block.
#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv2d,
    block: ResBlock,
    skip_channels: usize,
}

struct Trace {
    probs: Tensor,
    pool_args: Vec<Vec<u8>>,
    out_hw: (usize, usize),
}

pub struct Model {
    pub config: ModelConfig,
    pub mode: Mode,
    stem: MultiScaleBlock,
    encoder: Vec<ResBlock>,
    bottleneck: ResBlock,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
    trace: Option<Trace>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            mode: self.mode,
            stem: self.stem.clone(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            trace: None,
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("mode", &self.mode)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

/// Maps `i` into `0..n` by mirroring about the edges (edge samples not
/// repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn pad_reflect(x: &Tensor, h: usize, w: usize) -> Tensor {
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            let sy = reflect(y, x.h);
            for xx in 0..w {
                dst[y * w + xx] = src[sy * x.w + reflect(xx, x.w)];
            }
        }
    }
    out
}

fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        for y in 0..h {
            let s = nc * x.h * x.w + y * x.w;
            let d = nc * h * w + y * w;
            out.data[d..d + w].copy_from_slice(&x.data[s..s + w]);
        }
    }
    out
}

/// Adjoint of [`crop`]: embeds `x` in a zero tensor of size `h x w`.
fn uncrop(x: &Tensor, h: usize, w: usize) -> Tensor {
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        for y in 0..x.h {
            let s = nc * x.h * x.w + y * x.w;
            let d = nc * h * w + y * w;
            out.data[d..d + x.w].copy_from_slice(&x.data[s..s + x.w]);
        }
    }
    out
}

const CHECKPOINT_MAGIC: &[u8] = b"RFNCKPT1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bn = config.normalization == Normalization::Batch;
        let base = config.base_channels;
        let branches = config
            .multiscale_kernels
            .iter()
            .map(|&k| ConvUnit::new(config.input_channels, base, k, bn, true, &mut rng))
            .collect::<Vec<_>>();
        let proj = ConvUnit::new(base * branches.len(), base, 1, bn, true, &mut rng);
        let mut encoder = Vec::with_capacity(config.levels);
        let mut cin = base;
        for l in 0..config.levels {
            let c = config.channels_at(l);
            encoder.push(ResBlock::new(cin, c, bn, &mut rng));
            cin = c;
        }
        let deep = config.channels_at(config.levels);
        let bottleneck = ResBlock::new(cin, deep, bn, &mut rng);
        let mut decoder = Vec::with_capacity(config.levels);
        let mut cin = deep;
        for l in (0..config.levels).rev() {
            let c = config.channels_at(l);
            decoder.push(DecoderStage {
                up: Conv2d::new(cin, c, 1, true, &mut rng),
                block: ResBlock::new(2 * c, c, bn, &mut rng),
                skip_channels: c,
            });
            cin = c;
        }
        let head = Conv2d::new(base, config.num_classes, 1, true, &mut rng);
        Ok(Self {
            config,
            mode: Mode::Eval,
            stem: MultiScaleBlock { branches, proj },
            encoder,
            bottleneck,
            decoder,
            head,
            trace: None,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        if mode == Mode::Eval {
            self.trace = None;
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} input channel(s), got {}",
                self.config.input_channels, x.c
            )));
        }
        if x.n == 0 || x.h == 0 || x.w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input dims must be positive, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.config.size_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    /// Probabilities `(n, 3, h, w)` using running statistics. Each image is
    /// processed independently of the rest of the batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_with(x, Ablation::default())
    }

    pub fn predict_with(&self, x: &Tensor, ablation: Ablation) -> Result<Tensor> {
        self.check_input(x)?;
        let (ph, pw) = self.padded_dims(x.h, x.w);
        let mut h = self.stem.forward(&pad_reflect(x, ph, pw));
        let mut skips = Vec::with_capacity(self.config.levels);
        for block in &self.encoder {
            h = block.forward(&h);
            h = {
                let pooled = maxpool2x2(&h).0;
                skips.push(h);
                pooled
            };
        }
        h = self.bottleneck.forward(&h);
        if ablation.zero_bottleneck {
            h.data.fill(0.0);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = self.config.levels - 1 - i;
            let up = upsample2x(&stage.up.forward(&h));
            let mut skip = skips.pop().expect("one skip per level");
            if ablation.zero_skip == Some(level) {
                skip.data.fill(0.0);
            }
            h = stage.block.forward(&concat_channels(&skip, &up));
        }
        let probs = softmax_channels(&self.head.forward(&h));
        Ok(crop(&probs, x.h, x.w))
    }

    /// Mode-dependent forward: batch statistics with a recorded trace for
    /// [`Model::backward`] in train mode, [`Model::predict`] in eval mode.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Eval => self.predict(x),
            Mode::Train => self.forward_train(x),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (ph, pw) = self.padded_dims(x.h, x.w);
        let mut h = self.stem.forward_train(&pad_reflect(x, ph, pw));
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut pool_args = Vec::with_capacity(self.config.levels);
        for block in &mut self.encoder {
            h = block.forward_train(&h);
            let (pooled, arg) = maxpool2x2(&h);
            skips.push(h);
            pool_args.push(arg);
            h = pooled;
        }
        h = self.bottleneck.forward_train(&h);
        for stage in &mut self.decoder {
            let up = upsample2x(&stage.up.forward_train(&h));
            let skip = skips.pop().expect("one skip per level");
            h = stage.block.forward_train(&concat_channels(&skip, &up));
        }
        let probs = softmax_channels(&self.head.forward_train(&h));
        let out = crop(&probs, x.h, x.w);
        self.trace = Some(Trace {
            probs,
            pool_args,
            out_hw: (x.h, x.w),
        });
        Ok(out)
    }

    /// Back-propagates `dL/dprobs` from the last train-mode forward,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, dprobs: &Tensor) -> Result<()> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::Invariant("backward called without a train-mode forward".into()))?;
        if (dprobs.h, dprobs.w) != trace.out_hw || dprobs.c != self.config.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?} does not match output",
                dprobs.shape()
            )));
        }
        let dp = uncrop(dprobs, trace.probs.h, trace.probs.w);
        let dlogits = softmax_channels_backward(&trace.probs, &dp);
        let mut g = self.head.backward(&dlogits);
        let mut dskips = Vec::with_capacity(self.config.levels);
        // Decoder stages run deepest first, so unwind from the shallowest;
        // dskips ends up indexed by encoder level.
        for stage in self.decoder.iter_mut().rev() {
            let dcat = stage.block.backward(&g);
            let (dskip, dup) = split_channels(&dcat, stage.skip_channels);
            dskips.push(dskip);
            g = stage.up.backward(&upsample2x_backward(&dup));
        }
        g = self.bottleneck.backward(&g);
        for (l, block) in self.encoder.iter_mut().enumerate().rev() {
            g = maxpool2x2_backward(&g, &trace.pool_args[l]);
            g.add_assign(&dskips[l]);
            g = block.backward(&g);
        }
        self.stem.backward(&g);
        Ok(())
    }

    /// Runs every B-scan of `input` (already preprocessed) through the
    /// network, `batch` scans at a time.
    pub fn predict_volume(&self, input: &ScanVolume, batch: usize) -> Result<ProbabilityVolume> {
        let s = input.shape;
        let plane = s.bscan_len();
        let mut probs = vec![0f32; s.len() * NUM_CLASSES];
        let batch = batch.max(1);
        let mut b0 = 0;
        while b0 < s.n_bscans {
            let b1 = (b0 + batch).min(s.n_bscans);
            let x = Tensor::from_vec(
                b1 - b0,
                1,
                s.depth,
                s.width,
                input.voxels[b0 * plane..b1 * plane].to_vec(),
            );
            let y = self.predict(&x)?;
            for i in 0..b1 - b0 {
                let dst = &mut probs[(b0 + i) * plane * NUM_CLASSES..(b0 + i + 1) * plane * NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    for (j, &v) in y.channel(i, c).iter().enumerate() {
                        dst[j * NUM_CLASSES + c] = v;
                    }
                }
            }
            b0 = b1;
        }
        let out = ProbabilityVolume {
            shape: s,
            spacing: input.spacing,
            volume_id: input.volume_id.clone(),
            eye_id: input.eye_id.clone(),
            extras: Default::default(),
            probs,
        };
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        self.visit("", &mut |name, p| {
            tensors.push(TensorEntry {
                name,
                shape: p.shape.clone(),
                offset: payload.len() / 4,
            });
            for v in &p.value {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            tensors,
        })
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + header.len() + payload.len());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        bytes.extend_from_slice(&payload);
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint using the configuration stored in it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, None)
    }

    /// Loads a checkpoint, failing with [`Error::ConfigMismatch`] unless it
    /// was saved with exactly `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, Some(expected))
    }

    fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or(Error::BadMagic)?;
        if rest.len() < 4 {
            return Err(Error::TruncatedPayload {
                expected: 4,
                found: rest.len(),
            });
        }
        let hlen = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < hlen {
            return Err(Error::TruncatedPayload {
                expected: hlen,
                found: rest.len(),
            });
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if let Some(exp) = expected {
            if *exp != header.config {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint config {:?} differs from expected {:?}",
                    header.config, exp
                )));
            }
        }
        let payload = &rest[hlen..];
        let mut model = Self::build(header.config)?;
        let mut entries = header.tensors.into_iter();
        let mut err = None;
        let mut used = 0usize;
        model.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some(e) = entries.next() else {
                err = Some(Error::ConfigMismatch(format!("checkpoint lacks tensor {name}")));
                return;
            };
            if e.name != name || e.shape != p.shape {
                err = Some(Error::ConfigMismatch(format!(
                    "tensor {} {:?} does not match {name} {:?}",
                    e.name, e.shape, p.shape
                )));
                return;
            }
            let (start, end) = (e.offset * 4, (e.offset + p.len()) * 4);
            if end > payload.len() {
                err = Some(Error::TruncatedPayload {
                    expected: end,
                    found: payload.len(),
                });
                return;
            }
            for (v, chunk) in p.value.iter_mut().zip(payload[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            used = used.max(end);
        });
        if let Some(e) = err {
            return Err(e);
        }
        if entries.next().is_some() {
            return Err(Error::ConfigMismatch("checkpoint has extra tensors".into()));
        }
        if used != payload.len() {
            return Err(Error::TrailingBytes {
                expected: used,
                found: payload.len(),
            });
        }
        Ok(model)
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.stem.visit(&crate::nn::join(prefix, "stem"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&crate::nn::join(prefix, &format!("enc{i}")), f);
        }
        self.bottleneck.visit(&crate::nn::join(prefix, "bottleneck"), f);
        for (i, s) in self.decoder.iter().enumerate() {
            let p = crate::nn::join(prefix, &format!("dec{i}"));
            s.up.visit(&format!("{p}.up"), f);
            s.block.visit(&format!("{p}.block"), f);
        }
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem.visit_mut(&crate::nn::join(prefix, "stem"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&crate::nn::join(prefix, &format!("enc{i}")), f);
        }
        self.bottleneck.visit_mut(&crate::nn::join(prefix, "bottleneck"), f);
        for (i, s) in self.decoder.iter_mut().enumerate() {
            let p = crate::nn::join(prefix, &format!("dec{i}"));
            s.up.visit_mut(&format!("{p}.up"), f);
            s.block.visit_mut(&format!("{p}.block"), f);
        }
        self.head.visit_mut(&crate::nn::join(prefix, "head"), f);
    }
}
