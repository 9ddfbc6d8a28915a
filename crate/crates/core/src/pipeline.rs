//! End-to-end model: encoder, cross-frame affinities with token masking,
//! affinity decoder, segmentation head, plus the training loop, evaluation
//! and checkpoint I/O.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{
    feature_retrieval, merge_target, reference_feature_prepare, MaaBlocks, SarBlocks,
};
use crate::encoder::{Encoder, EncoderConfig, FusedFeature, Fuse, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::metrics::{mvc, vc_n, ConfusionMatrix, VcMode, IGNORE_INDEX};
use crate::nn::{poly_lr, ConvLayer, Init, ParamSet, Sgd};
use crate::scalar::Scalar;
use crate::stm::{token_count, Cfa, TokenMask};
use crate::synth::VideoClip;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MRCFA1";

fn full_mask(total: usize) -> TokenMask {
    TokenMask {
        importance: vec![0.0; total],
        selected: vec![true; total],
        indices: (0..total).collect(),
        ratio: 1.0,
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Number of affinity scales L.
    pub scales: usize,
    /// Clip length T (references plus the target).
    pub clip_len: usize,
    /// Frame offsets of the T-1 references relative to the target, strictly
    /// increasing and negative, e.g. [-9, -6, -3].
    pub reference_offsets: Vec<i64>,
    /// Kept-token ratio p in (0, 1].
    pub p: f64,
    /// Top-n rows summed per column when scoring tokens.
    pub n_top: usize,
    pub class_count: usize,
    /// Encoder schedule, one entry per scale.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub fused_channels: usize,
    pub sar_depth: usize,
    /// Input frame size (H, W).
    pub input: (usize, usize),
    pub seed: u64,
    /// Multiply affinities by 1/sqrt(C_L) when set.
    pub scale_affinity: bool,
    /// Detach the reference branch so gradients flow only through the target.
    pub freeze_reference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 3,
            clip_len: 4,
            reference_offsets: vec![-9, -6, -3],
            p: 0.5,
            n_top: 4,
            class_count: 4,
            channels: vec![16, 32, 64],
            strides: vec![4, 8, 16],
            fused_channels: 64,
            sar_depth: 2,
            input: (32, 32),
            seed: 0,
            scale_affinity: false,
            freeze_reference: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > self.channels.len() || self.scales > self.strides.len()
        {
            return Err(Error::Arg(format!(
                "scales {} out of range for schedule of length {}",
                self.scales,
                self.channels.len()
            )));
        }
        if self.clip_len == 0 {
            return Err(Error::Arg("clip_len must be >= 1".into()));
        }
        if self.reference_offsets.len() + 1 != self.clip_len {
            return Err(Error::Arg(format!(
                "{} reference offsets for clip_len {}",
                self.reference_offsets.len(),
                self.clip_len
            )));
        }
        for w in self.reference_offsets.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Arg(format!(
                    "reference offsets must be strictly increasing, got {:?}",
                    self.reference_offsets
                )));
            }
        }
        if self.reference_offsets.iter().any(|&o| o >= 0) {
            return Err(Error::Arg(format!(
                "reference offsets must be negative, got {:?}",
                self.reference_offsets
            )));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Arg(format!("p must be in (0, 1], got {}", self.p)));
        }
        if self.n_top == 0 {
            return Err(Error::Arg("n_top must be >= 1".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Arg(format!(
                "need >= 2 classes, got {}",
                self.class_count
            )));
        }
        let deep = *self.strides.last().unwrap();
        if self.input.0 % deep != 0 || self.input.1 % deep != 0 {
            return Err(Error::Arg(format!(
                "input {}x{} not divisible by deepest stride {deep}",
                self.input.0, self.input.1
            )));
        }
        Ok(())
    }

    /// The encoder and fusion always run the full schedule; `scales` only
    /// controls how many of the coarsest feature maps join the affinity path.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            strides: self.strides.clone(),
            channels: self.channels.clone(),
        }
    }

    /// Index of the finest scale participating in the affinity path.
    pub fn first_scale(&self) -> usize {
        self.channels.len() - self.scales
    }

    /// Grid of full-schedule scale l for the configured input.
    pub fn grid(&self, l: usize) -> (usize, usize) {
        (self.input.0 / self.strides[l], self.input.1 / self.strides[l])
    }

    /// Number of kept key tokens on the coarsest grid.
    pub fn token_budget(&self) -> usize {
        let (h, w) = self.grid(self.strides.len() - 1);
        token_count(self.p, h * w)
    }
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    encoder: Encoder<T>,
    fuse: Fuse<T>,
    cfa: Cfa<T>,
    sar: SarBlocks<T>,
    maa: MaaBlocks<T>,
    head: ConvLayer<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut init = Init::new(cfg.seed);
        let enc_cfg = cfg.encoder_config();
        let encoder = Encoder::new(&mut params, &mut init, enc_cfg.clone())?;
        let fuse = Fuse::new(&mut params, &mut init, &enc_cfg.channels, cfg.fused_channels)?;
        let scale = if cfg.scale_affinity {
            Some(1.0 / (*enc_cfg.channels.last().unwrap() as f64).sqrt())
        } else {
            None
        };
        let first = cfg.first_scale();
        let cfa = Cfa::new(
            &mut params,
            &mut init,
            &enc_cfg.channels[first..],
            &enc_cfg.strides[first..],
            scale,
        )?;
        let s = cfg.token_budget();
        let sar = SarBlocks::new(&mut params, &mut init, cfg.scales, s, cfg.sar_depth)?;
        let maa = MaaBlocks::new(&mut params, &mut init, cfg.scales, s, cfg.sar_depth)?;
        let head = ConvLayer::new(
            &mut params,
            &mut init,
            "head",
            cfg.fused_channels,
            cfg.class_count,
            (1, 1),
            (1, 1),
            (0, 0),
            true,
        )?;
        Ok(Model {
            cfg,
            params,
            encoder,
            fuse,
            cfa,
            sar,
            maa,
            head,
        })
    }

    fn encode_frame(
        &self,
        frame: &Tensor<T>,
        idx: usize,
        detach: bool,
    ) -> Result<(MultiScaleFeatures<T>, FusedFeature<T>)> {
        let input = if detach { frame.detach() } else { frame.clone() };
        let mut feats = self.encoder.encode(&input, idx)?;
        if detach {
            feats.scales = feats.scales.iter().map(|t| t.detach()).collect();
            let fused = self.fuse.apply(&feats)?;
            return Ok((
                feats,
                FusedFeature {
                    tensor: fused.tensor.detach(),
                },
            ));
        }
        let fused = self.fuse.apply(&feats)?;
        Ok((feats, fused))
    }

    fn head_logits(&self, merged: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.head.apply(merged)?;
        let (h, w) = self.cfg.input;
        if logits.shape()[1] == h && logits.shape()[2] == w {
            Ok(logits)
        } else {
            logits.bilinear_upsample((h, w))
        }
    }

    /// Forward pass over one clip, target frame last. Returns logits
    /// `[class_count, H, W]` at input resolution.
    pub fn forward(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.forward_inner(frames, false)
    }

    /// Reference path with token masking removed: every coarsest-grid key
    /// token is kept. Only valid when p = 1 (the decoder width matches).
    pub fn forward_no_stm(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        self.forward_inner(frames, true)
    }

    fn forward_inner(&self, frames: &[Tensor<T>], unmasked: bool) -> Result<Tensor<T>> {
        if frames.len() != self.cfg.clip_len {
            return Err(Error::Dim(format!(
                "forward: {} frames for clip_len {}",
                frames.len(),
                self.cfg.clip_len
            )));
        }
        let t_idx = frames.len() - 1;
        let (target_feats, target_fused) = self.encode_frame(&frames[t_idx], t_idx, false)?;

        if frames.len() == 1 {
            // single-frame baseline: no cross-frame branch at all
            return self.head_logits(&target_fused.tensor);
        }

        // only the `scales` coarsest feature maps join the affinity path
        let first = self.cfg.first_scale();
        let slice = |f: &MultiScaleFeatures<T>| MultiScaleFeatures {
            scales: f.scales[first..].to_vec(),
            frame_index: f.frame_index,
        };
        let target_aff = slice(&target_feats);
        let coarsest = target_aff.coarsest_dims();
        let finest = target_aff.dims(0);
        let mut retrieved = Vec::with_capacity(frames.len() - 1);
        for (r_idx, frame) in frames[..t_idx].iter().enumerate() {
            let (ref_feats, ref_fused) =
                self.encode_frame(frame, r_idx, self.cfg.freeze_reference)?;
            let ref_aff = slice(&ref_feats);
            let (affinities, mask) = if unmasked {
                let affs = self.cfa.build_affinity_stack_unmasked(&target_aff, &ref_aff)?;
                (affs, full_mask(coarsest.0 * coarsest.1))
            } else {
                let stack = self.cfa.build_affinity_stack(
                    &target_aff,
                    &ref_aff,
                    self.cfg.n_top,
                    self.cfg.p,
                )?;
                (stack.affinities, stack.mask)
            };
            let mut refined = Vec::with_capacity(affinities.len());
            for (l, a) in affinities.iter().enumerate() {
                refined.push(self.sar.refine(l, a, target_aff.dims(l))?);
            }
            let b1 = self.maa.aggregate(&refined)?;
            let f_ref = reference_feature_prepare(&ref_fused, &mask, coarsest)?;
            retrieved.push(feature_retrieval(&b1, &f_ref)?);
        }
        let merged = merge_target(&retrieved, finest, &target_fused)?;
        self.head_logits(&merged)
    }

    /// Cross entropy of logits `[class_count, H, W]` against per-pixel labels.
    pub fn loss(&self, logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != self.cfg.class_count {
            return Err(Error::Dim(format!("loss: logits {s:?}")));
        }
        let hw = s[1] * s[2];
        if labels.len() != hw {
            return Err(Error::Dim(format!(
                "loss: {} labels for {hw} pixels",
                labels.len()
            )));
        }
        let per_pixel = logits.reshape(&[s[0], hw])?.transpose2()?;
        let labels32: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        per_pixel.softmax_cross_entropy(&labels32, IGNORE_INDEX as u32)
    }

    /// Argmax class per pixel at input resolution.
    pub fn predict(&self, frames: &[Tensor<T>]) -> Result<Vec<u8>> {
        let logits = self.forward(frames)?;
        let s = logits.shape();
        let hw = s[1] * s[2];
        let data = logits.data();
        let mut out = vec![0u8; hw];
        for px in 0..hw {
            let mut best = 0usize;
            for c in 1..s[0] {
                if data[c * hw + px] > data[best * hw + px] {
                    best = c;
                }
            }
            out[px] = best as u8;
        }
        Ok(out)
    }

    /// Frames for the clip ending at `target` in `clip`, references first.
    /// Out-of-range reference indices clamp to frame 0.
    pub fn gather_clip(&self, clip: &VideoClip<T>, target: usize) -> Result<Vec<Tensor<T>>> {
        if target >= clip.len() {
            return Err(Error::Arg(format!(
                "target frame {target} in clip of {}",
                clip.len()
            )));
        }
        let mut frames = Vec::with_capacity(self.cfg.clip_len);
        for &off in &self.cfg.reference_offsets {
            let idx = (target as i64 + off).max(0) as usize;
            frames.push(clip.frames[idx].clone());
        }
        frames.push(clip.frames[target].clone());
        Ok(frames)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Polynomial decay of the learning rate over `steps`.
    pub poly: bool,
    pub seed: u64,
    /// Print running loss every this many steps; 0 silences it.
    pub log_every: usize,
    /// Clip the global gradient L2 norm to this value; None disables.
    pub grad_clip: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1000,
            lr: 0.1,
            momentum: 0.9,
            poly: true,
            seed: 0,
            log_every: 0,
            grad_clip: Some(5.0),
        }
    }
}

fn clip_gradients<T: Scalar>(params: &[crate::nn::ParamRef<T>], max_norm: f64) {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params {
            p.scale_grad(T::from_f64(scale));
        }
    }
}

/// SGD training over uniformly sampled (video, target frame) pairs.
/// Returns the per-step loss curve; aborts on a non-finite loss.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[VideoClip<T>],
    opts: &TrainOptions,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Arg("train: empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sgd = Sgd::new(opts.momentum);
    let mut curve = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let clip = &dataset[rng.gen_range(0..dataset.len())];
        let target = rng.gen_range(0..clip.len());
        let frames = model.gather_clip(clip, target)?;
        model.params.zero_grads();
        let logits = model.forward(&frames)?;
        let loss = model.loss(&logits, &clip.labels[target])?;
        let value = loss.item()?.to_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {value}"
            )));
        }
        loss.backward()?;
        if let Some(max_norm) = opts.grad_clip {
            clip_gradients(model.params.all(), max_norm);
        }
        let lr = if opts.poly {
            poly_lr(opts.lr, step, opts.steps)
        } else {
            opts.lr
        };
        sgd.step(model.params.all(), lr)?;
        curve.push(value);
        if opts.log_every > 0 && (step + 1) % opts.log_every == 0 {
            let from = curve.len().saturating_sub(opts.log_every);
            let avg: f64 = curve[from..].iter().sum::<f64>() / (curve.len() - from) as f64;
            eprintln!("step {:>6}  loss {:.4}", step + 1, avg);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub miou: f64,
    pub wiou: f64,
    /// Mean VC over videos for each requested window size.
    pub mvc: Vec<(usize, f64)>,
    pub confusion: ConfusionMatrix,
    pub video_count: usize,
}

/// Runs the model over every frame of every clip as the target and scores
/// predictions against the labels.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &[VideoClip<T>],
    vc_windows: &[usize],
    vc_mode: VcMode,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Arg("evaluate: empty dataset".into()));
    }
    let mut confusion = ConfusionMatrix::new(model.cfg.class_count);
    let mut per_window: Vec<Vec<f64>> = vec![Vec::new(); vc_windows.len()];
    for clip in dataset {
        let mut preds = Vec::with_capacity(clip.len());
        for t in 0..clip.len() {
            let frames = model.gather_clip(clip, t)?;
            let pred = model.predict(&frames)?;
            confusion.update(&clip.labels[t], &pred, IGNORE_INDEX)?;
            preds.push(pred);
        }
        for (wi, &n) in vc_windows.iter().enumerate() {
            if let Some(v) = vc_n(&clip.labels, &preds, n, vc_mode, IGNORE_INDEX)? {
                per_window[wi].push(v);
            }
        }
    }
    let mvc_vals = vc_windows
        .iter()
        .zip(&per_window)
        .map(|(&n, vals)| Ok((n, mvc(vals)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        miou: confusion.miou()?,
        wiou: confusion.wiou()?,
        mvc: mvc_vals,
        video_count: dataset.len(),
        confusion,
    })
}

/// Writes all parameters as little-endian f32 records: magic, then per
/// parameter a u32 name length, the name bytes, u32 rank, u32 extents and
/// the f32 values, in registration order.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for p in model.params.all() {
        let name = p.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in &shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint into an existing model; every stored parameter must
/// match a registered one in name and shape.
pub fn load_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let fmt = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 6 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "bad checkpoint magic".into()));
    }
    let mut off = 6usize;
    let mut loaded = 0usize;
    let read_u32 = |bytes: &[u8], off: &mut usize| -> Result<u32> {
        if *off + 4 > bytes.len() {
            return Err(fmt(*off, "truncated checkpoint".into()));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    while off < bytes.len() {
        let name_len = read_u32(&bytes, &mut off)? as usize;
        if off + name_len > bytes.len() {
            return Err(fmt(off, "truncated parameter name".into()));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| fmt(off, "parameter name is not utf-8".into()))?
            .to_string();
        off += name_len;
        let rank = read_u32(&bytes, &mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&bytes, &mut off)? as usize);
        }
        let numel: usize = shape.iter().product();
        if off + 4 * numel > bytes.len() {
            return Err(fmt(off, format!("truncated data for parameter {name}")));
        }
        let data: Vec<T> = bytes[off..off + 4 * numel]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        off += 4 * numel;
        let param = model
            .params
            .get(&name)
            .ok_or_else(|| Error::NotFound(format!("checkpoint parameter {name}")))?;
        if param.shape() != shape {
            return Err(Error::Dim(format!(
                "checkpoint parameter {name}: stored {shape:?} vs model {:?}",
                param.shape()
            )));
        }
        param.set_data(data)?;
        loaded += 1;
    }
    if loaded != model.params.all().len() {
        return Err(Error::Format {
            offset: off as u64,
            msg: format!(
                "checkpoint holds {loaded} parameters, model has {}",
                model.params.all().len()
            ),
        });
    }
    Ok(())
}
