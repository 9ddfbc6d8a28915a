//! End-to-end acceptance gate. Each test covers one release criterion and
//! prints a single PASS line; run with `cargo test --test acceptance`.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mrcfa::cost::{analyze, measure_runtime};
use mrcfa::decoder::{MaaBlocks, SarBlocks};
use mrcfa::kernels::{conv2d, matmul, ConvDims};
use mrcfa::metrics::{vc_n, ConfusionMatrix, VcMode, IGNORE_INDEX};
use mrcfa::nn::{grad_check, Init, ParamSet};
use mrcfa::pipeline::{
    evaluate, load_checkpoint, save_checkpoint, train, Model, ModelConfig, TrainOptions,
};
use mrcfa::stm::token_count;
use mrcfa::synth::{generate, write_tensor, SceneSpec, VideoClip};
use mrcfa::{Scalar, Tensor};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

fn rand_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    (0..len).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect()
}

// ---------- criterion 1: kernel oracle equivalence ----------

fn oracle_matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn oracle_conv2d<T: Scalar>(x: &[T], kern: &[T], d: &ConvDims) -> Vec<T> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![T::ZERO; d.c_out * oh * ow];
    for co in 0..d.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::ZERO;
                for ci in 0..d.c_in {
                    for ky in 0..d.k_h {
                        for kx in 0..d.k_w {
                            let iy = (oy * d.s_h + ky) as isize - d.p_h as isize;
                            let ix = (ox * d.s_w + kx) as isize - d.p_w as isize;
                            if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                continue;
                            }
                            acc += x[ci * d.h * d.w + iy as usize * d.w + ix as usize]
                                * kern[co * d.c_in * d.k_h * d.k_w
                                    + ci * d.k_h * d.k_w
                                    + ky * d.k_w
                                    + kx];
                        }
                    }
                }
                out[co * oh * ow + oy * ow + ox] = acc;
            }
        }
    }
    out
}

fn oracle_bilinear<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; c * th * tw];
    for ch in 0..c {
        for oy in 0..th {
            for ox in 0..tw {
                let fy = ((oy as f64 + 0.5) * h as f64 / th as f64 - 0.5)
                    .clamp(0.0, (h - 1) as f64);
                let fx = ((ox as f64 + 0.5) * w as f64 / tw as f64 - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                let g = |yy: usize, xx: usize| x[ch * h * w + yy * w + xx].to_f64();
                let v = g(y0, x0) * (1.0 - dy) * (1.0 - dx)
                    + g(y0, x1) * (1.0 - dy) * dx
                    + g(y1, x0) * dy * (1.0 - dx)
                    + g(y1, x1) * dy * dx;
                out[ch * th * tw + oy * tw + ox] = T::from_f64(v);
            }
        }
    }
    out
}

fn oracle_topk<T: Scalar>(x: &[T], rows: usize, cols: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * cols];
    for j in 0..cols {
        let mut col: Vec<(usize, f64)> = (0..rows).map(|i| (i, x[i * cols + j].to_f64())).collect();
        // descending value, ascending index on ties
        col.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (rank, &(i, _)) in col.iter().take(n).enumerate() {
            out[rank * cols + j] = x[i * cols + j];
        }
    }
    out
}

fn check_close<T: Scalar>(got: &[T], want: &[T], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let e = rel_err(g.to_f64(), w.to_f64());
        assert!(e <= tol, "{what}: element {i} rel err {e:.3e} > {tol:.1e}");
    }
}

fn kernel_oracles<T: Scalar>(tol: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..110 {
        let what = format!("case {case}");
        // matmul
        let (m, k, n) = (
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
        );
        let a: Vec<T> = rand_vec(&mut rng, m * k);
        let b: Vec<T> = rand_vec(&mut rng, k * n);
        let mut got = vec![T::ZERO; m * n];
        matmul(&a, &b, m, k, n, &mut got);
        check_close(&got, &oracle_matmul(&a, &b, m, k, n), tol, &format!("matmul {what}"));

        // conv2d
        let d = ConvDims {
            c_in: rng.gen_range(1..=4),
            h: rng.gen_range(3..=12),
            w: rng.gen_range(3..=12),
            c_out: rng.gen_range(1..=4),
            k_h: rng.gen_range(1..=3),
            k_w: rng.gen_range(1..=3),
            s_h: rng.gen_range(1..=2),
            s_w: rng.gen_range(1..=2),
            p_h: rng.gen_range(0..=1),
            p_w: rng.gen_range(0..=1),
        };
        let x: Vec<T> = rand_vec(&mut rng, d.c_in * d.h * d.w);
        let kern: Vec<T> = rand_vec(&mut rng, d.c_out * d.c_in * d.k_h * d.k_w);
        let mut got = vec![T::ZERO; d.c_out * d.out_h() * d.out_w()];
        conv2d(&x, &kern, &d, &mut got);
        check_close(&got, &oracle_conv2d(&x, &kern, &d), tol, &format!("conv {what}"));

        // bilinear upsample
        let (c, h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=8), rng.gen_range(2..=8));
        let (th, tw) = (rng.gen_range(h..=16), rng.gen_range(w..=16));
        let x: Vec<T> = rand_vec(&mut rng, c * h * w);
        let t = Tensor::from_vec(x.clone(), &[c, h, w]).unwrap();
        let up = t.bilinear_upsample((th, tw)).unwrap();
        check_close(
            up.data(),
            &oracle_bilinear(&x, c, h, w, th, tw),
            tol,
            &format!("bilinear {what}"),
        );

        // top-k per column
        let (rows, cols) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let nk = rng.gen_range(1..=rows);
        let x: Vec<T> = rand_vec(&mut rng, rows * cols);
        let t = Tensor::from_vec(x.clone(), &[rows, cols]).unwrap();
        let got = t.topk_per_column(nk).unwrap();
        check_close(
            got.data(),
            &oracle_topk(&x, rows, cols, nk),
            tol,
            &format!("topk {what}"),
        );

        // gather rows / cols
        let (rows, cols) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let x: Vec<T> = rand_vec(&mut rng, rows * cols);
        let t = Tensor::from_vec(x.clone(), &[rows, cols]).unwrap();
        let ridx: Vec<usize> = (0..rng.gen_range(1..=rows)).map(|_| rng.gen_range(0..rows)).collect();
        let got = t.gather_rows(&ridx).unwrap();
        let want: Vec<T> = ridx
            .iter()
            .flat_map(|&i| x[i * cols..(i + 1) * cols].to_vec())
            .collect();
        check_close(got.data(), &want, tol, &format!("gather_rows {what}"));
        let cidx: Vec<usize> = (0..rng.gen_range(1..=cols)).map(|_| rng.gen_range(0..cols)).collect();
        let got = t.gather_cols(&cidx).unwrap();
        let want: Vec<T> = (0..rows)
            .flat_map(|i| cidx.iter().map(move |&j| (i, j)))
            .map(|(i, j)| x[i * cols + j])
            .collect();
        check_close(got.data(), &want, tol, &format!("gather_cols {what}"));
    }
}

#[test]
fn acceptance_1_kernel_oracle_equivalence() {
    let start = Instant::now();
    kernel_oracles::<f32>(1e-5, 41);
    kernel_oracles::<f64>(1e-10, 42);
    assert!(start.elapsed().as_secs() < 60, "criterion 1 exceeded 1 min");
    println!("acceptance 1 (kernel oracle equivalence, 110 random instances each): PASS");
}

// ---------- criterion 2: full-pipeline gradient check ----------

#[test]
fn acceptance_2_full_pipeline_gradients() {
    let start = Instant::now();
    let cfg = ModelConfig {
        scales: 2,
        clip_len: 2,
        reference_offsets: vec![-1],
        p: 1.0, // keeps token selection fixed under perturbation
        n_top: 2,
        class_count: 3,
        channels: vec![4, 8],
        strides: vec![4, 8],
        fused_channels: 8,
        sar_depth: 1,
        input: (16, 16),
        seed: 5,
        scale_affinity: false,
        freeze_reference: false,
    };
    let model = Model::<f64>::new(cfg).unwrap();
    let spec = SceneSpec::random(23, 16, 16, 3, 3).unwrap();
    let clip: VideoClip<f64> = generate(&spec, "g").unwrap();
    let frames = model.gather_clip(&clip, 1).unwrap();
    let labels = clip.labels[1].clone();
    let report = grad_check(
        || {
            let logits = model.forward(&frames)?;
            model.loss(&logits, &labels)
        },
        model.params.all(),
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(
        report.all_pass(),
        "worst relative gradient error {:.3e}",
        report.worst()
    );
    assert!(start.elapsed().as_secs() < 300, "criterion 2 exceeded 5 min");
    println!(
        "acceptance 2 (full-pipeline gradient check, worst rel err {:.2e}): PASS",
        report.worst()
    );
}

// ---------- criterion 3: token masking exactness ----------

#[test]
fn acceptance_3_token_masking_exactness() {
    // p = 1: the masked path is bit-identical (f64) to the reference path
    // with the masking machinery removed
    let cfg = ModelConfig {
        scales: 2,
        clip_len: 2,
        reference_offsets: vec![-1],
        p: 1.0,
        n_top: 2,
        class_count: 3,
        channels: vec![4, 8],
        strides: vec![4, 8],
        fused_channels: 8,
        sar_depth: 2,
        input: (16, 16),
        seed: 3,
        scale_affinity: false,
        freeze_reference: false,
    };
    let model = Model::<f64>::new(cfg).unwrap();
    let spec = SceneSpec::random(31, 16, 16, 3, 3).unwrap();
    let clip: VideoClip<f64> = generate(&spec, "m").unwrap();
    let frames = model.gather_clip(&clip, 2).unwrap();
    let masked = model.forward(&frames).unwrap();
    let unmasked = model.forward_no_stm(&frames).unwrap();
    assert_eq!(
        masked.data(),
        unmasked.data(),
        "p=1 output differs from the unmasked reference path"
    );

    // S = floor(p * H_L * W_L) across the p sweep
    for &total in &[4usize, 16, 64, 100, 144] {
        for i in 1..=10 {
            let p = i as f64 / 10.0;
            let expect = ((p * total as f64).floor() as usize).max(1);
            assert_eq!(token_count(p, total), expect, "S formula at p={p}, N={total}");
        }
    }

    // gather-then-multiply equals multiply-then-gather bit for bit
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (m, k, n) = (
            rng.gen_range(2..=10),
            rng.gen_range(2..=10),
            rng.gen_range(2..=10),
        );
        let a = Tensor::<f64>::from_vec(rand_vec(&mut rng, m * k), &[m, k]).unwrap();
        let b = Tensor::<f64>::from_vec(rand_vec(&mut rng, k * n), &[k, n]).unwrap();
        let ridx: Vec<usize> = (0..rng.gen_range(1..=m)).map(|_| rng.gen_range(0..m)).collect();
        let full_then_gather = a.matmul(&b).unwrap().gather_rows(&ridx).unwrap();
        let gather_then_mul = a.gather_rows(&ridx).unwrap().matmul(&b).unwrap();
        assert_eq!(full_then_gather.data(), gather_then_mul.data());

        let cidx: Vec<usize> = (0..rng.gen_range(1..=n)).map(|_| rng.gen_range(0..n)).collect();
        let ab_gc = a.matmul(&b).unwrap().gather_cols(&cidx).unwrap();
        let a_bgc = a.matmul(&b.gather_cols(&cidx).unwrap()).unwrap();
        assert_eq!(ab_gc.data(), a_bgc.data());
    }
    println!("acceptance 3 (token masking exactness at p=1, S formula, gather commutes): PASS");
}

// ---------- criterion 4: refine/aggregate structure ----------

#[test]
fn acceptance_4_decoder_structure() {
    // identity configuration: depth-1 refine and aggregate stacks set to the
    // Dirac kernel reduce the decoder to the sum of permuted affinities
    let scales = 3;
    let s = 2;
    let (h, w) = (3, 4);
    let mut set = ParamSet::<f64>::default();
    let mut init = Init::new(13);
    let sar = SarBlocks::new(&mut set, &mut init, scales, s, 1).unwrap();
    let maa = MaaBlocks::new(&mut set, &mut init, scales, s, 1).unwrap();
    for st in sar.stacks.iter().chain(&maa.stacks) {
        st.set_identity().unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let affinities: Vec<Tensor<f64>> = (0..scales)
        .map(|_| Tensor::from_vec(rand_vec(&mut rng, h * w * s), &[h * w, s]).unwrap())
        .collect();
    let refined: Vec<Tensor<f64>> = affinities
        .iter()
        .enumerate()
        .map(|(l, a)| sar.refine(l, a, (h, w)).unwrap())
        .collect();
    let b1 = maa.aggregate(&refined).unwrap();
    let mut expect: Option<Tensor<f64>> = None;
    for a in &affinities {
        let p = a.reshape(&[h, w, s]).unwrap().permute(&[2, 0, 1]).unwrap();
        expect = Some(match expect {
            Some(e) => e.add(&p).unwrap(),
            None => p,
        });
    }
    assert_eq!(
        b1.data(),
        expect.unwrap().data(),
        "identity decoder is not the sum of permuted affinities"
    );

    // single scale: aggregation is the refined affinity unchanged
    let one = vec![refined[0].clone()];
    let maa1 = MaaBlocks::<f64>::new(&mut ParamSet::default(), &mut Init::new(1), 1, s, 1).unwrap();
    let b = maa1.aggregate(&one).unwrap();
    assert_eq!(b.data(), refined[0].data(), "single-scale aggregation changed B1");
    println!("acceptance 4 (decoder identity reduction, single-scale base case): PASS");
}

// ---------- criterion 5: metric oracles ----------

fn vc_oracle(gt: &[Vec<u8>], pred: &[Vec<u8>], n: usize) -> Option<f64> {
    let mut vals = Vec::new();
    for start in 0..=gt.len() - n {
        let (mut d, mut num) = (0u64, 0u64);
        for px in 0..gt[0].len() {
            let win: Vec<u8> = (start..start + n).map(|f| gt[f][px]).collect();
            if win[0] == IGNORE_INDEX || win.iter().any(|&v| v != win[0]) {
                continue;
            }
            d += 1;
            let wp: Vec<u8> = (start..start + n).map(|f| pred[f][px]).collect();
            if wp.iter().all(|&v| v == wp[0]) && wp[0] == win[0] {
                num += 1;
            }
        }
        if d > 0 {
            vals.push(num as f64 / d as f64);
        }
    }
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[test]
fn acceptance_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let frames = rng.gen_range(2..=6);
        let pixels = rng.gen_range(4..=32);
        let classes = rng.gen_range(2..=5) as u8;
        let n = rng.gen_range(2..=frames.min(4));
        let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<u8>> {
            (0..frames)
                .map(|_| {
                    (0..pixels)
                        .map(|_| {
                            if rng.gen_bool(0.05) {
                                IGNORE_INDEX
                            } else {
                                rng.gen_range(0..classes)
                            }
                        })
                        .collect()
                })
                .collect()
        };
        let gt = mk(&mut rng);
        let pred: Vec<Vec<u8>> = mk(&mut rng)
            .into_iter()
            .map(|f| f.into_iter().map(|v| if v == IGNORE_INDEX { 0 } else { v }).collect())
            .collect();
        let got = vc_n(&gt, &pred, n, VcMode::ConsistentAndCorrect, IGNORE_INDEX).unwrap();
        let want = vc_oracle(&gt, &pred, n);
        match (got, want) {
            (Some(a), Some(b)) => assert!(
                (a - b).abs() < 1e-12,
                "case {case}: vc {a} vs oracle {b}"
            ),
            (a, b) => assert_eq!(a.is_none(), b.is_none(), "case {case}: window skipping differs"),
        }

        // mIoU against a counting oracle on the first frame pair
        let mut cm = ConfusionMatrix::new(classes as usize);
        cm.update(&gt[0], &pred[0], IGNORE_INDEX).unwrap();
        let mut ious = Vec::new();
        for c in 0..classes {
            let present = gt[0].iter().any(|&g| g == c);
            if !present {
                continue;
            }
            let inter = gt[0]
                .iter()
                .zip(&pred[0])
                .filter(|&(&g, &p)| g == c && p == c)
                .count();
            let union = gt[0]
                .iter()
                .zip(&pred[0])
                .filter(|&(&g, &p)| (g == c && g != IGNORE_INDEX) || (p == c && g != IGNORE_INDEX))
                .count();
            ious.push(inter as f64 / union as f64);
        }
        if !ious.is_empty() {
            let want = ious.iter().sum::<f64>() / ious.len() as f64;
            assert!(
                (cm.miou().unwrap() - want).abs() < 1e-12,
                "case {case}: miou mismatch"
            );
        }

        // perfect prediction scores 1.0 exactly everywhere
        let mut cm = ConfusionMatrix::new(classes as usize);
        for f in &gt {
            cm.update(f, f, IGNORE_INDEX).unwrap();
        }
        if cm.total() > 0 {
            assert_eq!(cm.miou().unwrap(), 1.0);
            assert_eq!(cm.wiou().unwrap(), 1.0);
        }
        if let Some(v) = vc_n(&gt, &gt, n, VcMode::ConsistentAndCorrect, IGNORE_INDEX).unwrap() {
            assert_eq!(v, 1.0);
        }
    }
    println!("acceptance 5 (metric oracles, 200 random instances): PASS");
}

// ---------- criterion 6: cost trends ----------

#[test]
fn acceptance_6_cost_trends() {
    let cfg_for = |p: f64, scales: usize| ModelConfig {
        p,
        scales,
        input: (96, 96),
        ..ModelConfig::default()
    };

    // analytic FLOPs strictly decreasing as p drops
    let sweep = [1.0, 0.5, 0.1];
    let flops: Vec<u64> = sweep
        .iter()
        .map(|&p| analyze(&cfg_for(p, 3)).unwrap().total_flops)
        .collect();
    assert!(
        flops[0] > flops[1] && flops[1] > flops[2],
        "FLOPs not strictly decreasing over p sweep: {flops:?}"
    );

    // measured forward medians non-increasing over the same sweep
    let times: Vec<f64> = sweep
        .iter()
        .map(|&p| measure_runtime::<f32>(&cfg_for(p, 3), 3).unwrap().median_secs)
        .collect();
    assert!(
        times[0] >= times[1] && times[1] >= times[2],
        "median forward time increased as p dropped: {times:?}"
    );

    // FLOPs and params non-decreasing in the scale count
    let mut prev = (0u64, 0u64);
    for l in 1..=3 {
        let r = analyze(&cfg_for(0.5, l)).unwrap();
        assert!(
            r.total_flops >= prev.0 && r.total_params >= prev.1,
            "cost shrank when adding scale {l}"
        );
        prev = (r.total_flops, r.total_params);
    }
    println!(
        "acceptance 6 (cost trends: p sweep {:?} FLOPs, {:.1}/{:.1}/{:.1} ms medians): PASS",
        flops,
        times[0] * 1e3,
        times[1] * 1e3,
        times[2] * 1e3
    );
}

// ---------- criterion 7: learning signal ----------

fn signal_dataset(seed: u64, videos: usize) -> Vec<VideoClip<f32>> {
    (0..videos)
        .map(|v| {
            let mut spec = SceneSpec::random(seed + v as u64 * 1000, 32, 32, 12, 4).unwrap();
            spec.noise_amp = 0.4;
            // slow the shapes down so references 9 frames back still overlap
            for s in &mut spec.shapes {
                s.vel.0 *= 0.3;
                s.vel.1 *= 0.3;
            }
            generate(&spec, &format!("v{v}")).unwrap()
        })
        .collect()
}

fn signal_cfg(clip_len: usize, offsets: Vec<i64>, seed: u64) -> ModelConfig {
    ModelConfig {
        scales: 2,
        clip_len,
        reference_offsets: offsets,
        p: 0.5,
        n_top: 4,
        class_count: 4,
        channels: vec![8, 16],
        strides: vec![4, 8],
        fused_channels: 16,
        sar_depth: 1,
        input: (32, 32),
        seed,
        scale_affinity: true,
        freeze_reference: false,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn acceptance_7_learning_signal() {
    let start = Instant::now();
    let train_set = signal_dataset(100, 8);
    let test_set = signal_dataset(900_000, 4);
    let mut multi_miou = Vec::new();
    let mut multi_mvc = Vec::new();
    let mut single_miou = Vec::new();
    let mut single_mvc = Vec::new();
    for seed in 0..5u64 {
        for multi in [true, false] {
            let cfg = if multi {
                signal_cfg(4, vec![-9, -6, -3], seed)
            } else {
                signal_cfg(1, vec![], seed)
            };
            let mut model = Model::<f32>::new(cfg).unwrap();
            let opts = TrainOptions {
                steps: 2000,
                lr: 0.02,
                momentum: 0.9,
                poly: true,
                seed,
                log_every: 0,
                grad_clip: Some(5.0),
            };
            let curve = train(&mut model, &train_set, &opts).unwrap();
            let report = evaluate(&model, &test_set, &[4], VcMode::ConsistentAndCorrect).unwrap();
            println!(
                "  seed {seed} {}: final loss {:.4}, test mIoU {:.4}, mVC4 {:.4}",
                if multi { "multi " } else { "single" },
                median(curve[curve.len() - 20..].to_vec()),
                report.miou,
                report.mvc[0].1
            );
            if multi {
                multi_miou.push(report.miou);
                multi_mvc.push(report.mvc[0].1);
            } else {
                single_miou.push(report.miou);
                single_mvc.push(report.mvc[0].1);
            }
        }
    }
    let (m_iou, s_iou) = (median(multi_miou.clone()), median(single_miou.clone()));
    let (m_vc, s_vc) = (median(multi_mvc.clone()), median(single_mvc.clone()));
    assert!(
        m_iou >= s_iou,
        "median test mIoU: multi-frame {m_iou:.4} < single-frame {s_iou:.4}"
    );
    assert!(
        m_vc > s_vc,
        "median test mVC_4: multi-frame {m_vc:.4} <= single-frame {s_vc:.4}"
    );
    let mins = start.elapsed().as_secs_f64() / 60.0;
    assert!(mins < 30.0, "criterion 7 took {mins:.1} min");
    println!(
        "acceptance 7 (learning signal: mIoU {m_iou:.3} vs {s_iou:.3}, mVC4 {m_vc:.3} vs {s_vc:.3}, {mins:.1} min): PASS"
    );
}

// ---------- criterion 8: overfit sanity ----------

#[test]
fn acceptance_8_overfit_single_clip() {
    let mut spec = SceneSpec::random(4242, 32, 32, 8, 4).unwrap();
    spec.noise_amp = 0.05;
    let clip: VideoClip<f32> = generate(&spec, "solo").unwrap();
    // boundary precision at 32x32 needs a stride-2 head grid
    let cfg = ModelConfig {
        scales: 3,
        clip_len: 2,
        reference_offsets: vec![-2],
        p: 0.5,
        n_top: 4,
        class_count: 4,
        channels: vec![8, 16, 32],
        strides: vec![2, 4, 8],
        fused_channels: 16,
        sar_depth: 1,
        input: (32, 32),
        seed: 7,
        scale_affinity: true,
        freeze_reference: false,
    };
    let mut model = Model::<f32>::new(cfg).unwrap();
    let dataset = vec![clip];
    let opts = TrainOptions {
        steps: 1000,
        lr: 0.05,
        momentum: 0.9,
        poly: true,
        seed: 1,
        log_every: 0,
        grad_clip: Some(5.0),
    };
    let curve = train(&mut model, &dataset, &opts).unwrap();
    let final_loss = median(curve[curve.len() - 20..].to_vec());
    assert!(
        final_loss < 0.05,
        "single-clip loss only reached {final_loss:.4}"
    );
    let report = evaluate(&model, &dataset, &[2], VcMode::ConsistentAndCorrect).unwrap();
    assert!(report.miou > 0.9, "overfit mIoU {:.4} <= 0.9", report.miou);
    println!(
        "acceptance 8 (overfit: loss {final_loss:.4}, mIoU {:.3}): PASS",
        report.miou
    );
}

// ---------- criterion 9: byte-exact round trips ----------

#[test]
fn acceptance_9_round_trip_io() {
    let dir = tempfile::tempdir().unwrap();

    // dataset: save, load, re-save, compare every file byte for byte
    let spec = SceneSpec::random(5, 32, 32, 4, 3).unwrap();
    let clip: VideoClip<f32> = generate(&spec, "rt").unwrap();
    let d1 = dir.path().join("d1");
    let d2 = dir.path().join("d2");
    std::fs::create_dir_all(&d1).unwrap();
    std::fs::create_dir_all(&d2).unwrap();
    mrcfa::synth::save_clip(&d1, &clip).unwrap();
    let loaded: VideoClip<f32> = mrcfa::synth::load_clip(&d1, "rt", 4).unwrap();
    mrcfa::synth::save_clip(&d2, &loaded).unwrap();
    for t in 0..4 {
        for ext in ["tns", "msk"] {
            let a = std::fs::read(d1.join("rt").join(format!("frame_{t:04}.{ext}"))).unwrap();
            let b = std::fs::read(d2.join("rt").join(format!("frame_{t:04}.{ext}"))).unwrap();
            assert_eq!(a, b, "frame {t} .{ext} not byte-exact after round trip");
        }
    }

    // checkpoint: save, load into a differently seeded model, re-save
    let cfg = signal_cfg(2, vec![-1], 3);
    let model = Model::<f32>::new(cfg.clone()).unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&model, &p1).unwrap();
    let mut cfg2 = cfg;
    cfg2.seed = 12345;
    let other = Model::<f32>::new(cfg2).unwrap();
    load_checkpoint(&other, &p1).unwrap();
    save_checkpoint(&other, &p2).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "checkpoint not byte-exact after round trip"
    );

    // on-disk layout is little-endian regardless of host order
    let t = Tensor::<f32>::from_vec(vec![1.0], &[1]).unwrap();
    let p = dir.path().join("one.tns");
    write_tensor(&p, &t).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..8], b"MRCTENS1");
    assert_eq!(&bytes[8..12], &1u32.to_le_bytes(), "rank not little-endian");
    assert_eq!(&bytes[12..16], &1u32.to_le_bytes(), "extent not little-endian");
    assert_eq!(&bytes[16..20], &[0x00, 0x00, 0x80, 0x3f], "f32 1.0 not little-endian");
    println!("acceptance 9 (byte-exact little-endian round trips): PASS");
}
