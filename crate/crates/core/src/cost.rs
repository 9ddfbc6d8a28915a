//! Analytic FLOP / activation / parameter accounting for a model
//! configuration, plus a small wall-clock forward-pass benchmark. One
//! multiply-accumulate counts as 2 FLOPs throughout.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::pipeline::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct StageCost {
    pub name: String,
    pub flops: u64,
    /// Elements written by this stage.
    pub act_elems: u64,
    pub params: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub stages: Vec<StageCost>,
    pub total_flops: u64,
    /// Largest single-stage activation, in elements.
    pub peak_act_elems: u64,
    pub total_params: u64,
}

impl CostReport {
    fn push(&mut self, name: impl Into<String>, flops: u64, act: u64, params: u64) {
        self.total_flops += flops;
        self.peak_act_elems = self.peak_act_elems.max(act);
        self.total_params += params;
        self.stages.push(StageCost {
            name: name.into(),
            flops,
            act_elems: act,
            params,
        });
    }

    pub fn stage(&self, name: &str) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("stage,flops,act_elems,params\n");
        for s in &self.stages {
            out.push_str(&format!("{},{},{},{}\n", s.name, s.flops, s.act_elems, s.params));
        }
        out.push_str(&format!(
            "total,{},{},{}\n",
            self.total_flops, self.peak_act_elems, self.total_params
        ));
        out
    }
}

fn conv_cost(out_h: u64, out_w: u64, c_in: u64, c_out: u64, k: u64, bias: bool) -> (u64, u64, u64) {
    let out_elems = c_out * out_h * out_w;
    let flops = 2 * out_elems * c_in * k * k + if bias { out_elems } else { 0 };
    let params = c_out * c_in * k * k + if bias { c_out } else { 0 };
    (flops, out_elems, params)
}

/// Full forward-pass cost of one clip under `cfg`. Stage names are stable
/// and used by the CLI report.
pub fn analyze(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let mut r = CostReport {
        stages: Vec::new(),
        total_flops: 0,
        peak_act_elems: 0,
        total_params: 0,
    };
    let scales = cfg.scales;
    let first = cfg.first_scale();
    let stages = cfg.channels.len();
    let refs = (cfg.clip_len - 1) as u64;
    let frames = cfg.clip_len as u64;
    let chat = cfg.fused_channels as u64;

    // encoder: mirrors the construction in Encoder::new (stride ratios split
    // into x2 convs, 3x3, bias, relu); always runs the full schedule
    let (mut h, mut w) = (cfg.input.0 as u64, cfg.input.1 as u64);
    let mut c_prev = 3u64;
    let mut stride_prev = 1usize;
    let (mut enc_flops, mut enc_act, mut enc_params) = (0u64, 0u64, 0u64);
    for l in 0..stages {
        let mut ratio = cfg.strides[l] / stride_prev;
        let c_out = cfg.channels[l] as u64;
        let mut c_in = c_prev;
        loop {
            let s = if ratio > 1 { 2 } else { 1 };
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            let (f, a, p) = conv_cost(h, w, c_in, c_out, 3, true);
            enc_flops += f;
            enc_act = enc_act.max(a);
            enc_params += p;
            c_in = c_out;
            if ratio <= 2 {
                break;
            }
            ratio /= 2;
        }
        c_prev = c_out;
        stride_prev = cfg.strides[l];
    }
    r.push("encoder", enc_flops * frames, enc_act, enc_params);

    let grid = |l: usize| {
        let (gh, gw) = cfg.grid(l);
        (gh as u64, gw as u64)
    };
    let (h1, w1) = grid(0);
    let (hl_, wl_) = grid(stages - 1);
    let n_l = hl_ * wl_;
    let s_tok = cfg.token_budget() as u64;

    // fuse: per-scale 1x1 projection, upsample, 1x1 output conv
    let (mut fu_flops, mut fu_act, mut fu_params) = (0u64, 0u64, 0u64);
    for l in 0..stages {
        let (gh, gw) = grid(l);
        let (f, a, p) = conv_cost(gh, gw, cfg.channels[l] as u64, chat, 1, true);
        fu_flops += f;
        fu_act = fu_act.max(a).max(chat * h1 * w1);
        fu_params += p;
    }
    let (f, a, p) = conv_cost(h1, w1, chat, chat, 1, true);
    fu_flops += f;
    fu_act = fu_act.max(a);
    fu_params += p;
    r.push("fuse", fu_flops * frames, fu_act, fu_params);

    if cfg.clip_len > 1 {
        // query/key projections (bias-free linear per token) and key
        // downsampling to the coarsest grid, over the participating scales
        let (mut pr_flops, mut pr_act, mut pr_params) = (0u64, 0u64, 0u64);
        let (mut kd_flops, mut kd_act, mut kd_params) = (0u64, 0u64, 0u64);
        for j in 0..scales {
            let l = first + j;
            let (gh, gw) = grid(l);
            let c = cfg.channels[l] as u64;
            let tokens = gh * gw;
            pr_flops += 2 * tokens * c * c; // queries on the target
            pr_flops += 2 * tokens * c * c * refs; // keys per reference
            pr_act = pr_act.max(tokens * c);
            pr_params += 2 * c * c;
            if j + 1 < scales {
                let rr = (cfg.strides[stages - 1] / cfg.strides[l]) as u64;
                let (f, a, p) = conv_cost(hl_, wl_, c, c, rr, true);
                kd_flops += f * refs;
                kd_act = kd_act.max(a);
                kd_params += p;
            }
        }
        r.push("projections", pr_flops, pr_act, pr_params);
        r.push("key_downsample", kd_flops, kd_act, kd_params);

        // full coarsest affinity (token scoring input) then the S-wide
        // affinities per scale
        let c_l = cfg.channels[stages - 1] as u64;
        r.push(
            "affinity_full",
            2 * n_l * n_l * c_l * refs,
            n_l * n_l,
            0,
        );
        let (mut af_flops, mut af_act) = (0u64, 0u64);
        for j in 0..scales - 1 {
            let (gh, gw) = grid(first + j);
            let c = cfg.channels[first + j] as u64;
            af_flops += 2 * gh * gw * s_tok * c * refs;
            af_act = af_act.max(gh * gw * s_tok);
        }
        af_act = af_act.max(n_l * s_tok);
        r.push("affinity_masked", af_flops, af_act, 0);

        // per-scale refinement convs over the S-channel affinity grids
        let depth = cfg.sar_depth as u64;
        let (mut sar_flops, mut sar_act, mut sar_params) = (0u64, 0u64, 0u64);
        for j in 0..scales {
            let (gh, gw) = grid(first + j);
            let (f, a, p) = conv_cost(gh, gw, s_tok, s_tok, 3, true);
            sar_flops += f * depth * refs;
            sar_act = sar_act.max(a);
            sar_params += p * depth;
        }
        r.push("refine", sar_flops, sar_act, sar_params);

        // coarse-to-fine aggregation convs (levels below the coarsest)
        let (mut maa_flops, mut maa_act, mut maa_params) = (0u64, 0u64, 0u64);
        for j in 0..scales.saturating_sub(1) {
            let (gh, gw) = grid(first + j);
            let (f, a, p) = conv_cost(gh, gw, s_tok, s_tok, 3, true);
            maa_flops += f * depth * refs;
            maa_act = maa_act.max(a);
            maa_params += p * depth;
        }
        r.push("aggregate", maa_flops, maa_act, maa_params);

        // retrieval happens on the finest participating grid
        let (gf_h, gf_w) = grid(first);
        r.push(
            "retrieval",
            2 * gf_h * gf_w * s_tok * chat * refs,
            gf_h * gf_w * chat,
            0,
        );
    }

    let (f, a, p) = conv_cost(h1, w1, chat, cfg.class_count as u64, 1, true);
    r.push("head", f, a.max((cfg.class_count * cfg.input.0 * cfg.input.1) as u64), p);
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct RuntimeReport {
    pub median_secs: f64,
    pub iqr_secs: f64,
    pub repeats: usize,
}

/// Median forward-pass wall time over `repeats` runs on synthetic input.
pub fn measure_runtime<T: Scalar>(cfg: &ModelConfig, repeats: usize) -> Result<RuntimeReport> {
    if repeats < 3 {
        return Err(Error::Arg(format!("need >= 3 repeats, got {repeats}")));
    }
    let model = Model::<T>::new(cfg.clone())?;
    let (h, w) = cfg.input;
    let frames: Vec<Tensor<T>> = (0..cfg.clip_len)
        .map(|t| {
            let data: Vec<T> = (0..3 * h * w)
                .map(|i| T::from_f64(((i + t * 131) % 97) as f64 / 97.0))
                .collect();
            Tensor::from_vec(data, &[3, h, w])
        })
        .collect::<Result<_>>()?;
    model.forward(&frames)?; // warmup
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        model.forward(&frames)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = times[times.len() / 2];
    let q1 = times[times.len() / 4];
    let q3 = times[3 * times.len() / 4];
    Ok(RuntimeReport {
        median_secs: median,
        iqr_secs: q3 - q1,
        repeats,
    })
}
