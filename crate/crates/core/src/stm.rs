//! Cross-frame affinities and Selective Token Masking.
//!
//! Queries come from the target frame, keys from a reference frame, one
//! weight pair per scale. Keys of the finer scales are downsampled to the
//! coarsest grid with a learned strided conv. A token importance map built
//! from the coarsest-scale affinity selects the S most important key tokens;
//! all scales keep exactly those S columns so the affinity decoder can merge
//! them. Queries are never downsampled or masked.

use crate::encoder::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Init, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Token importance map plus the binary selection derived from it.
#[derive(Debug, Clone)]
pub struct TokenMask {
    /// Importance score per coarsest-grid key token.
    pub importance: Vec<f64>,
    /// Binary selection over the same grid.
    pub selected: Vec<bool>,
    /// Ascending positions of the selected tokens; `len() == s()`.
    pub indices: Vec<usize>,
    pub ratio: f64,
}

impl TokenMask {
    pub fn s(&self) -> usize {
        self.indices.len()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Number of kept tokens for ratio `p` over `total` positions.
pub fn token_count(p: f64, total: usize) -> usize {
    (((p * total as f64).floor() as usize).min(total)).max(1)
}

/// Binary Mask Generation: importance of key token `j` is the sum of the
/// top-`n` entries of column `j` of the coarsest-scale affinity; the top
/// `floor(p * H_L W_L)` scores (ties to the lower index) are selected.
pub fn binary_mask_generation<T: Scalar>(
    affinity: &Tensor<T>,
    n: usize,
    p: f64,
) -> Result<TokenMask> {
    let shape = affinity.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dim(format!(
            "binary_mask_generation: affinity must be square, got {shape:?}"
        )));
    }
    let total = shape[0];
    if n == 0 || n > total {
        return Err(Error::Arg(format!(
            "binary_mask_generation: n={n} out of range 1..={total}"
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Arg(format!("binary_mask_generation: p={p} not in (0, 1]")));
    }
    let data = affinity.data();
    let mut importance: Vec<f64> = Vec::with_capacity(total);
    let mut col = vec![0.0f64; total];
    for j in 0..total {
        for i in 0..total {
            col[i] = data[i * total + j].to_f64();
        }
        col.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        importance.push(col[..n].iter().sum());
    }
    let s = token_count(p, total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        importance[b]
            .partial_cmp(&importance[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[..s].to_vec();
    indices.sort_unstable();
    let mut selected = vec![false; total];
    for &i in &indices {
        selected[i] = true;
    }
    Ok(TokenMask {
        importance,
        selected,
        indices,
        ratio: p,
    })
}

/// Gather the rows of `x` at the mask's selected positions, ascending.
pub fn select_tokens<T: Scalar>(x: &Tensor<T>, mask: &TokenMask) -> Result<Tensor<T>> {
    if x.shape().len() != 2 || x.shape()[0] != mask.len() {
        return Err(Error::Dim(format!(
            "select_tokens: {:?} rows vs mask length {}",
            x.shape(),
            mask.len()
        )));
    }
    x.gather_rows(&mask.indices)
}

/// The L masked affinities for one reference frame, all of width S.
pub struct AffinityStack<T: Scalar> {
    /// `affinities[l]` has shape `[H_l W_l, S]`.
    pub affinities: Vec<Tensor<T>>,
    pub mask: TokenMask,
    pub n_top: usize,
}

/// Query/key projections and key-downsampling convs, one entry per scale.
pub struct Cfa<T: Scalar> {
    pub w_query: Vec<Linear<T>>,
    pub w_key: Vec<Linear<T>>,
    /// Key downsampling conv for scales l < L (the coarsest needs none).
    pub key_down: Vec<ConvLayer<T>>,
    /// Optional constant multiplier on every affinity (e.g. 1/sqrt(C_l)).
    pub affinity_scale: Option<f64>,
    channels: Vec<usize>,
}

impl<T: Scalar> Cfa<T> {
    /// `strides` are the cumulative encoder strides (so the grid ratio of
    /// scale l to the coarsest is `strides[L-1] / strides[l]`).
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        channels: &[usize],
        strides: &[usize],
        affinity_scale: Option<f64>,
    ) -> Result<Self> {
        let scales = channels.len();
        let deepest = strides[scales - 1];
        let mut w_query = Vec::with_capacity(scales);
        let mut w_key = Vec::with_capacity(scales);
        let mut key_down = Vec::new();
        for (l, &c) in channels.iter().enumerate() {
            w_query.push(Linear::new(set, init, &format!("cfa.query{l}"), c, c)?);
            w_key.push(Linear::new(set, init, &format!("cfa.key{l}"), c, c)?);
            if deepest % strides[l] != 0 {
                return Err(Error::Dim(format!(
                    "scale {l}: stride {} does not divide deepest stride {deepest}",
                    strides[l]
                )));
            }
            let r = deepest / strides[l];
            if l + 1 < scales {
                key_down.push(ConvLayer::new(
                    set,
                    init,
                    &format!("cfa.keydown{l}"),
                    c,
                    c,
                    (r, r),
                    (r, r),
                    (0, 0),
                    true,
                )?);
            }
        }
        Ok(Cfa {
            w_query,
            w_key,
            key_down,
            affinity_scale,
            channels: channels.to_vec(),
        })
    }

    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    /// Flatten `[C, H, W]` to token-major `[H W, C]`.
    pub fn flatten_tokens(feat: &Tensor<T>) -> Result<Tensor<T>> {
        let s = feat.shape();
        feat.permute(&[1, 2, 0])?.reshape(&[s[1] * s[2], s[0]])
    }

    pub fn project_queries(&self, feats: &MultiScaleFeatures<T>) -> Result<Vec<Tensor<T>>> {
        feats
            .scales
            .iter()
            .zip(&self.w_query)
            .map(|(f, w)| w.apply(&Self::flatten_tokens(f)?))
            .collect()
    }

    pub fn project_keys(&self, feats: &MultiScaleFeatures<T>) -> Result<Vec<Tensor<T>>> {
        feats
            .scales
            .iter()
            .zip(&self.w_key)
            .map(|(f, w)| w.apply(&Self::flatten_tokens(f)?))
            .collect()
    }

    /// Downsample the token-major key of scale `l` to the coarsest grid via
    /// the learned strided conv: reshape to the grid, convolve, flatten back.
    pub fn downsample_keys(
        &self,
        key: &Tensor<T>,
        l: usize,
        dims: (usize, usize),
        target: (usize, usize),
    ) -> Result<Tensor<T>> {
        let (h, w) = dims;
        let (th, tw) = target;
        if h % th != 0 || w % tw != 0 {
            return Err(Error::Dim(format!(
                "downsample_keys: scale {l} grid {h}x{w} not divisible by coarsest {th}x{tw}"
            )));
        }
        if l + 1 == self.scales() {
            return Ok(key.clone());
        }
        let c = self.channels[l];
        let grid = key.reshape(&[h, w, c])?.permute(&[2, 0, 1])?;
        let down = self.key_down[l].apply(&grid)?;
        let s = down.shape();
        if (s[1], s[2]) != (th, tw) {
            return Err(Error::Dim(format!(
                "downsample_keys: scale {l} produced {}x{}, expected {th}x{tw}",
                s[1], s[2]
            )));
        }
        down.permute(&[1, 2, 0])?.reshape(&[th * tw, c])
    }

    /// `A = Q K^T`, optionally scaled by the configured constant.
    pub fn compute_affinity(&self, q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
        if q.shape()[1] != k.shape()[1] {
            return Err(Error::Dim(format!(
                "compute_affinity: channel mismatch {:?} vs {:?}",
                q.shape(),
                k.shape()
            )));
        }
        let a = q.matmul(&k.transpose2()?)?;
        Ok(match self.affinity_scale {
            Some(s) => a.scale(T::from_f64(s)),
            None => a,
        })
    }

    /// Full STM path: project, downsample keys, derive the token mask from
    /// the coarsest-scale affinity, and emit L masked affinities of width S.
    pub fn build_affinity_stack(
        &self,
        target: &MultiScaleFeatures<T>,
        reference: &MultiScaleFeatures<T>,
        n: usize,
        p: f64,
    ) -> Result<AffinityStack<T>> {
        let scales = self.scales();
        if target.scales.len() != scales || reference.scales.len() != scales {
            return Err(Error::Dim("affinity stack: scale count mismatch".into()));
        }
        let queries = self.project_queries(target)?;
        let keys = self.project_keys(reference)?;
        let coarsest = reference.coarsest_dims();

        let full_deepest = self.compute_affinity(&queries[scales - 1], &keys[scales - 1])?;
        let mask = binary_mask_generation(&full_deepest, n, p)?;

        let mut affinities = Vec::with_capacity(scales);
        for l in 0..scales - 1 {
            let down = self.downsample_keys(&keys[l], l, reference.dims(l), coarsest)?;
            let selected = select_tokens(&down, &mask)?;
            affinities.push(self.compute_affinity(&queries[l], &selected)?);
        }
        affinities.push(full_deepest.gather_cols(&mask.indices)?);
        Ok(AffinityStack {
            affinities,
            mask,
            n_top: n,
        })
    }

    /// Reference path with the masking machinery removed: keys are still
    /// downsampled to the coarsest grid but every token is kept.
    pub fn build_affinity_stack_unmasked(
        &self,
        target: &MultiScaleFeatures<T>,
        reference: &MultiScaleFeatures<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let scales = self.scales();
        let queries = self.project_queries(target)?;
        let keys = self.project_keys(reference)?;
        let coarsest = reference.coarsest_dims();
        let mut affinities = Vec::with_capacity(scales);
        for l in 0..scales {
            let down = self.downsample_keys(&keys[l], l, reference.dims(l), coarsest)?;
            affinities.push(self.compute_affinity(&queries[l], &down)?);
        }
        Ok(affinities)
    }
}
