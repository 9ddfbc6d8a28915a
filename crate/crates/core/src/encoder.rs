//! Toy multi-scale feature extractor: a strided convolutional pyramid that
//! emits one feature map per stage, shallow (large) scales first, plus the
//! SegFormer-style fusion of all scales into a single per-frame feature.

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Init, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-frame list of feature maps with descending spatial size.
pub struct MultiScaleFeatures<T: Scalar> {
    /// Scale `l` has shape `[C_l, H_l, W_l]`, `H_l` non-increasing in `l`.
    pub scales: Vec<Tensor<T>>,
    pub frame_index: usize,
}

impl<T: Scalar> MultiScaleFeatures<T> {
    /// `(H_l, W_l)` of scale `l`.
    pub fn dims(&self, l: usize) -> (usize, usize) {
        let s = self.scales[l].shape();
        (s[1], s[2])
    }

    /// `(H_L, W_L)`: the coarsest grid.
    pub fn coarsest_dims(&self) -> (usize, usize) {
        self.dims(self.scales.len() - 1)
    }
}

/// Per-frame fused feature `[C_hat, H_1, W_1]`.
pub struct FusedFeature<T: Scalar> {
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Cumulative stride of each stage w.r.t. the input, e.g. [4, 8, 16].
    /// Per-stage ratios must be powers of two (1 allowed).
    pub strides: Vec<usize>,
    /// Output channels of each stage.
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            strides: vec![4, 8, 16],
            channels: vec![16, 32, 64],
        }
    }
}

impl EncoderConfig {
    pub fn truncated(&self, scales: usize) -> Result<EncoderConfig> {
        if scales == 0 || scales > self.strides.len() {
            return Err(Error::Arg(format!(
                "scale count {} out of range 1..={}",
                scales,
                self.strides.len()
            )));
        }
        Ok(EncoderConfig {
            strides: self.strides[..scales].to_vec(),
            channels: self.channels[..scales].to_vec(),
        })
    }

    pub fn deepest_stride(&self) -> usize {
        *self.strides.last().unwrap()
    }
}

/// Strided conv pyramid; `encode` is pure and keeps no state between frames.
pub struct Encoder<T: Scalar> {
    stages: Vec<Vec<ConvLayer<T>>>,
    cfg: EncoderConfig,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(set: &mut ParamSet<T>, init: &mut Init, cfg: EncoderConfig) -> Result<Self> {
        if cfg.strides.is_empty() || cfg.strides.len() != cfg.channels.len() {
            return Err(Error::Arg(format!(
                "encoder config: {} strides vs {} channels",
                cfg.strides.len(),
                cfg.channels.len()
            )));
        }
        let mut stages = Vec::with_capacity(cfg.strides.len());
        let mut c_prev = 3usize;
        let mut stride_prev = 1usize;
        for (l, (&stride, &c_out)) in cfg.strides.iter().zip(&cfg.channels).enumerate() {
            if stride < stride_prev || stride % stride_prev != 0 {
                return Err(Error::Arg(format!(
                    "stage strides must be non-decreasing multiples, got {:?}",
                    cfg.strides
                )));
            }
            let mut ratio = stride / stride_prev;
            if !ratio.is_power_of_two() {
                return Err(Error::Arg(format!("stage stride ratio {ratio} not a power of two")));
            }
            let mut layers = Vec::new();
            let mut c_in = c_prev;
            let mut idx = 0;
            loop {
                let s = if ratio > 1 { 2 } else { 1 };
                layers.push(ConvLayer::new(
                    set,
                    init,
                    &format!("encoder.stage{l}.conv{idx}"),
                    c_in,
                    c_out,
                    (3, 3),
                    (s, s),
                    (1, 1),
                    true,
                )?);
                c_in = c_out;
                idx += 1;
                if ratio <= 2 {
                    break;
                }
                ratio /= 2;
            }
            stages.push(layers);
            c_prev = c_out;
            stride_prev = stride;
        }
        Ok(Encoder { stages, cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode(&self, frame: &Tensor<T>, frame_index: usize) -> Result<MultiScaleFeatures<T>> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dim(format!("encode: expected [3, H, W], got {s:?}")));
        }
        let deep = self.cfg.deepest_stride();
        if s[1] % deep != 0 || s[2] % deep != 0 {
            return Err(Error::Dim(format!(
                "encode: input {}x{} not divisible by deepest stride {}",
                s[1], s[2], deep
            )));
        }
        let mut scales = Vec::with_capacity(self.stages.len());
        let mut x = frame.clone();
        for stage in &self.stages {
            for layer in stage {
                x = layer.apply(&x)?.relu();
            }
            scales.push(x.clone());
        }
        Ok(MultiScaleFeatures { scales, frame_index })
    }
}

/// Fuses L scales into one `[C_hat, H_1, W_1]` feature: per-scale 1x1
/// projection, upsample to the largest scale, sum, final 1x1 conv.
pub struct Fuse<T: Scalar> {
    proj: Vec<ConvLayer<T>>,
    out: ConvLayer<T>,
    pub fused_channels: usize,
}

impl<T: Scalar> Fuse<T> {
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        channels: &[usize],
        fused_channels: usize,
    ) -> Result<Self> {
        let mut proj = Vec::with_capacity(channels.len());
        for (l, &c) in channels.iter().enumerate() {
            proj.push(ConvLayer::new(
                set,
                init,
                &format!("fuse.proj{l}"),
                c,
                fused_channels,
                (1, 1),
                (1, 1),
                (0, 0),
                true,
            )?);
        }
        let out = ConvLayer::new(
            set,
            init,
            "fuse.out",
            fused_channels,
            fused_channels,
            (1, 1),
            (1, 1),
            (0, 0),
            true,
        )?;
        Ok(Fuse {
            proj,
            out,
            fused_channels,
        })
    }

    pub fn apply(&self, feats: &MultiScaleFeatures<T>) -> Result<FusedFeature<T>> {
        if feats.scales.len() != self.proj.len() {
            return Err(Error::Dim(format!(
                "fuse: {} scales for {} projections",
                feats.scales.len(),
                self.proj.len()
            )));
        }
        let (h1, w1) = feats.dims(0);
        let mut acc: Option<Tensor<T>> = None;
        for (layer, feat) in self.proj.iter().zip(&feats.scales) {
            let p = layer.apply(feat)?;
            let up = if p.shape()[1] == h1 && p.shape()[2] == w1 {
                p
            } else {
                p.bilinear_upsample((h1, w1))?
            };
            acc = Some(match acc {
                Some(a) => a.add(&up)?,
                None => up,
            });
        }
        let tensor = self.out.apply(&acc.unwrap())?;
        Ok(FusedFeature { tensor })
    }
}
