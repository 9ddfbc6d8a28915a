//! Segmentation quality (mIoU, weighted IoU) and temporal consistency (VC_n)
//! metrics. All metrics skip pixels labeled `ignore_index`.

use crate::error::{Error, Result};

pub const IGNORE_INDEX: u8 = 255;

/// Class confusion counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn update(&mut self, gt: &[u8], pred: &[u8], ignore: u8) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Dim(format!(
                "confusion update: {} gt pixels vs {} predicted",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == ignore {
                continue;
            }
            if (g as usize) >= self.classes || (p as usize) >= self.classes {
                return Err(Error::Arg(format!(
                    "confusion update: label {}/{} exceeds {} classes",
                    g, p, self.classes
                )));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Accumulators merge associatively; per-video matrices can be built in
    /// parallel and folded together.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let n = self.classes;
        let tp = self.counts[c * n + c];
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.counts[g * n + c]).sum();
        let fneg: u64 = (0..n).filter(|&p| p != c).map(|p| self.counts[c * n + p]).sum();
        (tp, fp, fneg)
    }

    fn gt_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.counts[c * self.classes + p]).sum()
    }

    /// Mean IoU over the classes present in ground truth.
    pub fn miou(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.classes {
            if self.gt_count(c) == 0 {
                continue;
            }
            let (tp, fp, fneg) = self.tp_fp_fn(c);
            sum += tp as f64 / (tp + fp + fneg) as f64;
            present += 1;
        }
        if present == 0 {
            return Err(Error::Arg("miou: no class present in ground truth".into()));
        }
        Ok(sum / present as f64)
    }

    /// IoU weighted by ground-truth class pixel frequency.
    pub fn wiou(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Arg("wiou: empty confusion matrix".into()));
        }
        // single division keeps a perfect prediction at exactly 1.0
        let mut sum = 0.0;
        for c in 0..self.classes {
            let gt = self.gt_count(c);
            if gt == 0 {
                continue;
            }
            let (tp, fp, fneg) = self.tp_fp_fn(c);
            sum += gt as f64 * (tp as f64 / (tp + fp + fneg) as f64);
        }
        Ok(sum / total as f64)
    }
}

/// How VC_n treats prediction labels on gt-consistent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcMode {
    /// Prediction must be constant across the window AND equal to the
    /// ground-truth label there (the default reading).
    ConsistentAndCorrect,
    /// Prediction only needs to be constant across the window.
    ConsistentOnly,
}

/// Video consistency over sliding windows of `n` frames: the fraction of
/// gt-consistent pixels on which the prediction is also consistent. Windows
/// with no gt-consistent pixels are skipped; returns None if every window
/// was skipped.
pub fn vc_n(
    gt_frames: &[Vec<u8>],
    pred_frames: &[Vec<u8>],
    n: usize,
    mode: VcMode,
    ignore: u8,
) -> Result<Option<f64>> {
    let frames = gt_frames.len();
    if frames != pred_frames.len() {
        return Err(Error::Dim(format!(
            "vc_n: {frames} gt frames vs {} predicted",
            pred_frames.len()
        )));
    }
    if n < 1 || frames < n {
        return Err(Error::Arg(format!("vc_n: window {n} for {frames} frames")));
    }
    let pixels = gt_frames[0].len();
    for f in gt_frames.iter().chain(pred_frames) {
        if f.len() != pixels {
            return Err(Error::Dim("vc_n: frames have different pixel counts".into()));
        }
    }
    let mut acc = 0.0;
    let mut windows = 0usize;
    for start in 0..=frames - n {
        let mut denom = 0u64;
        let mut numer = 0u64;
        'pixel: for px in 0..pixels {
            let g0 = gt_frames[start][px];
            if g0 == ignore {
                continue;
            }
            for f in start + 1..start + n {
                if gt_frames[f][px] != g0 {
                    continue 'pixel;
                }
            }
            denom += 1;
            let p0 = pred_frames[start][px];
            let mut consistent = true;
            for f in start + 1..start + n {
                if pred_frames[f][px] != p0 {
                    consistent = false;
                    break;
                }
            }
            let ok = match mode {
                VcMode::ConsistentAndCorrect => consistent && p0 == g0,
                VcMode::ConsistentOnly => consistent,
            };
            if ok {
                numer += 1;
            }
        }
        if denom > 0 {
            acc += numer as f64 / denom as f64;
            windows += 1;
        }
    }
    Ok(if windows == 0 {
        None
    } else {
        Some(acc / windows as f64)
    })
}

/// Mean of per-video VC_n values.
pub fn mvc(per_video: &[f64]) -> Result<f64> {
    if per_video.is_empty() {
        return Err(Error::Arg("mvc: no videos".into()));
    }
    Ok(per_video.iter().sum::<f64>() / per_video.len() as f64)
}

/// One metric row of the CSV report.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n_window: usize,
    pub video_count: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,value,n_window,video_count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.metric, r.value, r.n_window, r.video_count
        ));
    }
    out
}
