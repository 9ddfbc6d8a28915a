//! Affinity decoder: per-scale refinement of the masked affinities with 2D
//! convolutions (the S selected key tokens act as channels over the target's
//! grid), coarse-to-fine aggregation across scales, and the final feature
//! retrieval / merge steps.

use crate::encoder::FusedFeature;
use crate::error::{Error, Result};
use crate::nn::{ConvStack, Init, ParamSet};
use crate::scalar::Scalar;
use crate::stm::TokenMask;
use crate::tensor::Tensor;

/// Per-scale refinement stacks. Input and output of each stack are
/// `[S, H_l, W_l]`.
pub struct SarBlocks<T: Scalar> {
    pub stacks: Vec<ConvStack<T>>,
}

impl<T: Scalar> SarBlocks<T> {
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        scales: usize,
        width: usize,
        depth: usize,
    ) -> Result<Self> {
        let mut stacks = Vec::with_capacity(scales);
        for l in 0..scales {
            stacks.push(ConvStack::new(set, init, &format!("sar.{l}"), width, depth)?);
        }
        Ok(SarBlocks { stacks })
    }

    /// Reshape the `[H_l W_l, S]` affinity onto the target grid, move the S
    /// token axis to channels, and refine with the scale's conv stack.
    pub fn refine(&self, l: usize, affinity: &Tensor<T>, dims: (usize, usize)) -> Result<Tensor<T>> {
        let (h, w) = dims;
        let shape = affinity.shape();
        if shape.len() != 2 || shape[0] != h * w {
            return Err(Error::Dim(format!(
                "sar_refine: affinity {shape:?} vs grid {h}x{w}"
            )));
        }
        let s = shape[1];
        let grid = affinity.reshape(&[h, w, s])?.permute(&[2, 0, 1])?;
        self.stacks[l].apply(&grid)
    }
}

/// Fusion stacks for levels l < L; stack `l` produces `B^l` at scale l.
pub struct MaaBlocks<T: Scalar> {
    pub stacks: Vec<ConvStack<T>>,
}

impl<T: Scalar> MaaBlocks<T> {
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        scales: usize,
        width: usize,
        depth: usize,
    ) -> Result<Self> {
        let mut stacks = Vec::with_capacity(scales.saturating_sub(1));
        for l in 0..scales.saturating_sub(1) {
            stacks.push(ConvStack::new(set, init, &format!("maa.{l}"), width, depth)?);
        }
        Ok(MaaBlocks { stacks })
    }

    /// Coarse-to-fine recursion: `B^L = refined^L`, then for l = L-1 .. 1,
    /// `B^l = G_l(upsample(B^{l+1}) + refined^l)` with the upsample skipped
    /// when the grids already match. Returns `B^1` of shape `[S, H_1, W_1]`.
    pub fn aggregate(&self, refined: &[Tensor<T>]) -> Result<Tensor<T>> {
        if refined.is_empty() {
            return Err(Error::Arg("maa_aggregate: no refined affinities".into()));
        }
        let width = refined[0].shape()[0];
        for (l, r) in refined.iter().enumerate() {
            if r.shape()[0] != width {
                return Err(Error::Dim(format!(
                    "maa_aggregate: width {} at scale {l}, expected {width}",
                    r.shape()[0]
                )));
            }
        }
        let scales = refined.len();
        let mut b = refined[scales - 1].clone();
        for l in (0..scales - 1).rev() {
            let (h, w) = (refined[l].shape()[1], refined[l].shape()[2]);
            let up = if b.shape()[1] == h && b.shape()[2] == w {
                b
            } else {
                b.bilinear_upsample((h, w))?
            };
            b = self.stacks[l].apply(&up.add(&refined[l])?)?;
        }
        Ok(b)
    }
}

/// Retrieve reference features into the target grid:
/// `O = B^1 (as [H_1 W_1, S]) . F_tilde[S, C_hat]`.
pub fn feature_retrieval<T: Scalar>(b1: &Tensor<T>, f_ref: &Tensor<T>) -> Result<Tensor<T>> {
    let bs = b1.shape();
    if bs.len() != 3 {
        return Err(Error::Dim(format!("feature_retrieval: B1 {bs:?}")));
    }
    let (s, h, w) = (bs[0], bs[1], bs[2]);
    if f_ref.shape().len() != 2 || f_ref.shape()[0] != s {
        return Err(Error::Dim(format!(
            "feature_retrieval: S={s} vs features {:?}",
            f_ref.shape()
        )));
    }
    let flat = b1.permute(&[1, 2, 0])?.reshape(&[h * w, s])?;
    flat.matmul(f_ref)
}

/// Resize the reference's fused feature to the coarsest grid, flatten to
/// token-major and keep the masked tokens: `[S, C_hat]`.
pub fn reference_feature_prepare<T: Scalar>(
    fused: &FusedFeature<T>,
    mask: &TokenMask,
    coarsest: (usize, usize),
) -> Result<Tensor<T>> {
    let (th, tw) = coarsest;
    if th * tw != mask.len() {
        return Err(Error::Dim(format!(
            "reference_feature_prepare: grid {th}x{tw} vs mask length {}",
            mask.len()
        )));
    }
    let t = &fused.tensor;
    let c = t.shape()[0];
    let small = if t.shape()[1] == th && t.shape()[2] == tw {
        t.clone()
    } else {
        t.bilinear_resize((th, tw))?
    };
    let flat = small.permute(&[1, 2, 0])?.reshape(&[th * tw, c])?;
    flat.gather_rows(&mask.indices)
}

/// Average the per-reference retrievals, lay them back on `grid` (the finest
/// affinity scale), upsample to the target's fused grid when the grids differ
/// and add the target feature.
pub fn merge_target<T: Scalar>(
    retrieved: &[Tensor<T>],
    grid: (usize, usize),
    fused_target: &FusedFeature<T>,
) -> Result<Tensor<T>> {
    if retrieved.is_empty() {
        return Err(Error::Arg("merge_target: no retrieval outputs".into()));
    }
    let mut acc = retrieved[0].clone();
    for o in &retrieved[1..] {
        acc = acc.add(o)?;
    }
    acc = acc.scale(T::from_f64(1.0 / retrieved.len() as f64));
    let ts = fused_target.tensor.shape();
    let (c, h, w) = (ts[0], ts[1], ts[2]);
    let (gh, gw) = grid;
    if acc.shape()[1] != c {
        return Err(Error::Dim(format!(
            "merge_target: {} channels vs fused {}",
            acc.shape()[1],
            c
        )));
    }
    if acc.shape()[0] != gh * gw {
        return Err(Error::Dim(format!(
            "merge_target: {} tokens do not fit the grid {gh}x{gw}",
            acc.shape()[0]
        )));
    }
    let mut on_grid = acc.transpose2()?.reshape(&[c, gh, gw])?;
    if (gh, gw) != (h, w) {
        on_grid = on_grid.bilinear_upsample((h, w))?;
    }
    on_grid.add(&fused_target.tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn blocks(scales: usize, width: usize, depth: usize) -> (SarBlocks<f64>, MaaBlocks<f64>) {
        let mut set = ParamSet::default();
        let mut init = Init::new(31);
        let sar = SarBlocks::new(&mut set, &mut init, scales, width, depth).unwrap();
        let maa = MaaBlocks::new(&mut set, &mut init, scales, width, depth).unwrap();
        (sar, maa)
    }

    #[test]
    fn sar_zero_stack_zero_output() {
        let (sar, _) = blocks(1, 2, 2);
        for layer in &sar.stacks[0].layers {
            layer.set_zero().unwrap();
        }
        let aff = Tensor::from_vec((0..12 * 2).map(|i| i as f64).collect(), &[12, 2]).unwrap();
        let out = sar.refine(0, &aff, (3, 4)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sar_identity_stack_is_permuted_input() {
        let mut set = ParamSet::default();
        let mut init = Init::new(1);
        let sar = SarBlocks::new(&mut set, &mut init, 1, 3, 1).unwrap();
        sar.stacks[0].set_identity().unwrap();
        let aff = Tensor::from_vec((0..6 * 3).map(|i| i as f64 - 5.0).collect(), &[6, 3]).unwrap();
        let out = sar.refine(0, &aff, (2, 3)).unwrap();
        let expect = aff
            .reshape(&[2, 3, 3])
            .unwrap()
            .permute(&[2, 0, 1])
            .unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn maa_single_scale_is_base_case() {
        let (_, maa) = blocks(1, 2, 2);
        let refined = vec![Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[2, 2, 2]).unwrap()];
        let b1 = maa.aggregate(&refined).unwrap();
        assert_eq!(b1.data(), refined[0].data());
    }

    #[test]
    fn maa_identity_equal_sizes_telescopes_to_sum() {
        let mut set = ParamSet::default();
        let mut init = Init::new(2);
        let maa = MaaBlocks::new(&mut set, &mut init, 3, 2, 1).unwrap();
        for st in &maa.stacks {
            st.set_identity().unwrap();
        }
        let mk = |off: f64| {
            Tensor::from_vec((0..8).map(|i| i as f64 + off).collect(), &[2, 2, 2]).unwrap()
        };
        let refined = vec![mk(0.0), mk(100.0), mk(1000.0)];
        let b1 = maa.aggregate(&refined).unwrap();
        let sum = refined[0]
            .add(&refined[1])
            .unwrap()
            .add(&refined[2])
            .unwrap();
        assert_eq!(b1.data(), sum.data());
    }

    #[test]
    fn maa_width_mismatch_rejected() {
        let (_, maa) = blocks(2, 2, 1);
        let refined = vec![
            Tensor::<f64>::zeros(&[2, 4, 4]),
            Tensor::<f64>::zeros(&[3, 2, 2]),
        ];
        assert!(maa.aggregate(&refined).is_err());
    }

    #[test]
    fn maa_direct_recursion_oracle() {
        let mut set = ParamSet::default();
        let mut init = Init::new(17);
        let maa = MaaBlocks::new(&mut set, &mut init, 3, 2, 2).unwrap();
        let mut data_init = Init::new(55);
        let mk = |n: usize, sh: &[usize], di: &mut Init| {
            Tensor::from_vec(di.uniform::<f64>(n, 1), sh).unwrap()
        };
        let refined = vec![
            mk(2 * 4 * 4, &[2, 4, 4], &mut data_init),
            mk(2 * 2 * 2, &[2, 2, 2], &mut data_init),
            mk(2 * 2 * 2, &[2, 2, 2], &mut data_init),
        ];
        let b1 = maa.aggregate(&refined).unwrap();

        // independently coded recursion
        let b3 = refined[2].clone();
        let b2 = maa.stacks[1].apply(&b3.add(&refined[1]).unwrap()).unwrap();
        let b1_ref = maa.stacks[0]
            .apply(&b2.bilinear_upsample((4, 4)).unwrap().add(&refined[0]).unwrap())
            .unwrap();
        assert_eq!(b1.data(), b1_ref.data());
    }

    #[test]
    fn retrieval_one_hot_selects_rows() {
        // B1 rows one-hot at column j reproduce row j of the features
        let s = 3;
        let (h, w) = (2, 2);
        let mut b = vec![0.0f64; s * h * w];
        // token (y,x) selects reference row (y*w+x) % s
        for y in 0..h {
            for x in 0..w {
                let j = (y * w + x) % s;
                b[j * h * w + y * w + x] = 1.0;
            }
        }
        let b1 = Tensor::from_vec(b, &[s, h, w]).unwrap();
        let f = Tensor::from_vec((0..s as i64 * 4).map(|i| i as f64).collect(), &[s, 4]).unwrap();
        let o = feature_retrieval(&b1, &f).unwrap();
        for y in 0..h {
            for x in 0..w {
                let j = (y * w + x) % s;
                let row = &o.data()[(y * w + x) * 4..(y * w + x + 1) * 4];
                assert_eq!(row, &f.data()[j * 4..(j + 1) * 4]);
            }
        }
    }

    #[test]
    fn retrieval_zero_affinity_zero_output() {
        let b1 = Tensor::<f64>::zeros(&[2, 3, 3]);
        let f = Tensor::from_vec(vec![1.0; 2 * 5], &[2, 5]).unwrap();
        let o = feature_retrieval(&b1, &f).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prepare_constant_feature_constant_rows() {
        let fused = FusedFeature {
            tensor: Tensor::<f64>::full(&[3, 4, 4], 2.5),
        };
        let mask = TokenMask {
            importance: vec![0.0; 4],
            selected: vec![true, false, true, false],
            indices: vec![0, 2],
            ratio: 0.5,
        };
        let f = reference_feature_prepare(&fused, &mask, (2, 2)).unwrap();
        assert_eq!(f.shape(), &[2, 3]);
        for &v in f.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn prepare_already_coarse_full_mask_is_flatten() {
        let data: Vec<f64> = (0..3 * 2 * 2).map(|i| i as f64).collect();
        let fused = FusedFeature {
            tensor: Tensor::from_vec(data, &[3, 2, 2]).unwrap(),
        };
        let mask = TokenMask {
            importance: vec![0.0; 4],
            selected: vec![true; 4],
            indices: vec![0, 1, 2, 3],
            ratio: 1.0,
        };
        let f = reference_feature_prepare(&fused, &mask, (2, 2)).unwrap();
        let flat = fused
            .tensor
            .permute(&[1, 2, 0])
            .unwrap()
            .reshape(&[4, 3])
            .unwrap();
        assert_eq!(f.data(), flat.data());
    }

    #[test]
    fn merge_single_reference_is_add() {
        let o = Tensor::from_vec((0..4 * 3).map(|i| i as f64).collect(), &[4, 3]).unwrap();
        let fused = FusedFeature {
            tensor: Tensor::from_vec((0..3 * 2 * 2).map(|i| i as f64 * 0.5).collect(), &[3, 2, 2])
                .unwrap(),
        };
        let out = merge_target(&[o.clone()], (2, 2), &fused).unwrap();
        let expect = o
            .transpose2()
            .unwrap()
            .reshape(&[3, 2, 2])
            .unwrap()
            .add(&fused.tensor)
            .unwrap();
        assert_eq!(out.data(), expect.data());
    }

    #[test]
    fn merge_zero_retrievals_is_fused_baseline() {
        let fused = FusedFeature {
            tensor: Tensor::from_vec((0..12).map(|i| i as f64).collect(), &[3, 2, 2]).unwrap(),
        };
        let zeros = vec![Tensor::<f64>::zeros(&[4, 3]); 3];
        let out = merge_target(&zeros, (2, 2), &fused).unwrap();
        assert_eq!(out.data(), fused.tensor.data());
    }

    #[test]
    fn merge_empty_rejected() {
        let fused = FusedFeature {
            tensor: Tensor::<f64>::zeros(&[3, 2, 2]),
        };
        assert!(merge_target::<f64>(&[], (2, 2), &fused).is_err());
    }
}
