//! Command line front end: dataset generation, training, evaluation,
//! ablation sweeps and the analytic cost report.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrcfa::cost::{analyze, measure_runtime};
use mrcfa::metrics::{metrics_csv, vc_n, ConfusionMatrix, MetricRow, VcMode, IGNORE_INDEX};
use mrcfa::pipeline::{
    evaluate, load_checkpoint, save_checkpoint, train, Model, ModelConfig, TrainOptions,
};
use mrcfa::runconfig::{apply_model_config, save_model_config, KvFile};
use mrcfa::synth::{generate_dataset, load_dataset};
use mrcfa::{Error, Result};

#[derive(Parser)]
#[command(name = "mrcfa", about = "Cross-frame affinity video segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shapes dataset
    Gen(GenArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a trained model
    Eval(EvalArgs),
    /// Sweep one configuration axis and compare metrics and cost
    Ablate(AblateArgs),
    /// Print the analytic cost report for a configuration
    Cost(CostArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Square frame size; must be divisible by 16.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: u8,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ModelFlags {
    /// Kept-token ratio in (0, 1].
    #[arg(long)]
    p: Option<f64>,
    /// Rows summed per column when scoring key tokens.
    #[arg(long)]
    n: Option<usize>,
    /// Number of coarsest scales in the affinity path.
    #[arg(long)]
    scales: Option<usize>,
    /// Comma-separated negative reference offsets, e.g. -9,-6,-3.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    offsets: Option<Vec<i64>>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop gradients through the reference frames.
    #[arg(long)]
    freeze_ref: bool,
    /// key=value config file applied under the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelFlags {
    /// flags > config file > defaults
    fn resolve(&self, input: Option<(usize, usize)>) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        if let Some(path) = &self.config {
            cfg = apply_model_config(&KvFile::load(path)?, &cfg)?;
        }
        if let Some((h, w)) = input {
            cfg.input = (h, w);
        }
        if let Some(p) = self.p {
            cfg.p = p;
        }
        if let Some(n) = self.n {
            cfg.n_top = n;
        }
        if let Some(s) = self.scales {
            cfg.scales = s;
        }
        if let Some(offsets) = &self.offsets {
            cfg.clip_len = offsets.len() + 1;
            cfg.reference_offsets = offsets.clone();
        }
        if let Some(c) = self.classes {
            cfg.class_count = c;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.freeze_ref {
            cfg.freeze_reference = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.ckpt, config.txt and loss_curve.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Disable polynomial learning rate decay.
    #[arg(long)]
    no_poly: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train` (model.ckpt + config.txt).
    #[arg(long)]
    model: PathBuf,
    /// Consistency window sizes.
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    vc_window: Vec<usize>,
    /// Score prediction constancy without requiring the correct class.
    #[arg(long)]
    lax: bool,
    /// Score the ground truth against itself instead of running the model.
    #[arg(long)]
    gt_as_pred: bool,
    /// Write the metric CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Axis to sweep: p, scales or clip-len.
    #[arg(long)]
    axis: String,
    /// At least two values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    vc_window: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, default_value_t = 3)]
    scales: usize,
    /// Input size as HxW, e.g. 64x64.
    #[arg(long, default_value = "32x32")]
    dims: String,
    #[arg(long, default_value_t = 4)]
    clip_len: usize,
    /// Also run and time the forward pass this many times (>= 3).
    #[arg(long)]
    measure: Option<usize>,
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Arg(format!("dims {s:?}: expected HxW")))?;
    Ok((
        h.parse()
            .map_err(|_| Error::Arg(format!("dims {s:?}: bad height")))?,
        w.parse()
            .map_err(|_| Error::Arg(format!("dims {s:?}: bad width")))?,
    ))
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    if args.size % 16 != 0 {
        return Err(Error::Arg(format!(
            "size {} not divisible by 16",
            args.size
        )));
    }
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::Arg(format!(
                "{} is not empty; pass --force to write anyway",
                args.out.display()
            )));
        }
    }
    generate_dataset::<f32>(
        &args.out,
        args.seed,
        args.videos,
        args.frames,
        args.size,
        args.size,
        args.classes,
    )?;
    eprintln!(
        "wrote {} videos x {} frames at {}x{} to {}",
        args.videos,
        args.frames,
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn dataset_dims(data: &PathBuf) -> Result<(Vec<mrcfa::synth::VideoClip<f32>>, (usize, usize))> {
    let clips = load_dataset::<f32>(data)?;
    let dims = clips[0].dims();
    Ok((clips, dims))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (clips, dims) = dataset_dims(&args.data)?;
    let cfg = args.model.resolve(Some(dims))?;
    fs::create_dir_all(&args.out)?;
    let mut model = Model::<f32>::new(cfg.clone())?;
    let opts = TrainOptions {
        steps: args.steps,
        lr: args.lr,
        momentum: args.momentum,
        poly: !args.no_poly,
        seed: cfg.seed,
        log_every: args.log_every,
        grad_clip: Some(5.0),
    };
    let curve = train(&mut model, &clips, &opts)?;
    save_checkpoint(&model, &args.out.join("model.ckpt"))?;
    save_model_config(&args.out.join("config.txt"), &cfg)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(args.out.join("loss_curve.csv"), csv)?;
    eprintln!(
        "trained {} steps, final loss {:.4}, model in {}",
        args.steps,
        curve.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (clips, dims) = dataset_dims(&args.data)?;
    let mode = if args.lax {
        VcMode::ConsistentOnly
    } else {
        VcMode::ConsistentAndCorrect
    };
    let mut rows = Vec::new();
    if args.gt_as_pred {
        let classes = 1 + clips
            .iter()
            .flat_map(|c| c.labels.iter())
            .flat_map(|l| l.iter())
            .copied()
            .filter(|&c| c != IGNORE_INDEX)
            .max()
            .unwrap_or(0) as usize;
        let mut cm = ConfusionMatrix::new(classes);
        let mut per_window = vec![Vec::new(); args.vc_window.len()];
        for clip in &clips {
            for labels in &clip.labels {
                cm.update(labels, labels, IGNORE_INDEX)?;
            }
            for (wi, &n) in args.vc_window.iter().enumerate() {
                if let Some(v) = vc_n(&clip.labels, &clip.labels, n, mode, IGNORE_INDEX)? {
                    per_window[wi].push(v);
                }
            }
        }
        rows.push(MetricRow {
            metric: "miou".into(),
            value: cm.miou()?,
            n_window: 0,
            video_count: clips.len(),
        });
        rows.push(MetricRow {
            metric: "wiou".into(),
            value: cm.wiou()?,
            n_window: 0,
            video_count: clips.len(),
        });
        for (vals, &n) in per_window.iter().zip(&args.vc_window) {
            rows.push(MetricRow {
                metric: format!("mvc{n}"),
                value: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                n_window: n,
                video_count: vals.len(),
            });
        }
    } else {
        let cfg = mrcfa::runconfig::load_model_config(&args.model.join("config.txt"))?;
        if cfg.input != dims {
            return Err(Error::Dim(format!(
                "model expects {}x{} frames, dataset is {}x{}",
                cfg.input.0, cfg.input.1, dims.0, dims.1
            )));
        }
        let max_label = clips
            .iter()
            .flat_map(|c| c.labels.iter())
            .flat_map(|l| l.iter())
            .copied()
            .filter(|&c| c != IGNORE_INDEX)
            .max()
            .unwrap_or(0) as usize;
        if max_label >= cfg.class_count {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "dataset has class {max_label}, model was trained with {} classes",
                    cfg.class_count
                ),
            });
        }
        let model = Model::<f32>::new(cfg)?;
        load_checkpoint(&model, &args.model.join("model.ckpt"))?;
        let report = evaluate(&model, &clips, &args.vc_window, mode)?;
        rows.push(MetricRow {
            metric: "miou".into(),
            value: report.miou,
            n_window: 0,
            video_count: report.video_count,
        });
        rows.push(MetricRow {
            metric: "wiou".into(),
            value: report.wiou,
            n_window: 0,
            video_count: report.video_count,
        });
        for (n, v) in &report.mvc {
            rows.push(MetricRow {
                metric: format!("mvc{n}"),
                value: *v,
                n_window: *n,
                video_count: report.video_count,
            });
        }
    }
    write_or_print(&args.out, &metrics_csv(&rows))
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    if args.values.len() < 2 {
        return Err(Error::Arg("ablate needs at least two --values".into()));
    }
    let (clips, dims) = dataset_dims(&args.data)?;
    let base = args.model.resolve(Some(dims))?;
    let mut csv = format!("{},miou,mvc{},params,flops\n", args.axis, args.vc_window);
    for &v in &args.values {
        let mut cfg = base.clone();
        match args.axis.as_str() {
            "p" => cfg.p = v,
            "scales" => cfg.scales = v as usize,
            "clip-len" => {
                let t = v as usize;
                if t == 0 {
                    return Err(Error::Arg("clip-len value must be >= 1".into()));
                }
                cfg.clip_len = t;
                cfg.reference_offsets = (1..t as i64).rev().map(|i| -3 * i).collect();
            }
            other => {
                return Err(Error::Arg(format!(
                    "unknown axis {other:?}; use p, scales or clip-len"
                )))
            }
        }
        cfg.validate()?;
        let cost = analyze(&cfg)?;
        let mut model = Model::<f32>::new(cfg)?;
        let opts = TrainOptions {
            steps: args.steps,
            lr: args.lr,
            seed: base.seed,
            log_every: 0,
            ..TrainOptions::default()
        };
        train(&mut model, &clips, &opts)?;
        let report = evaluate(
            &model,
            &clips,
            &[args.vc_window],
            VcMode::ConsistentAndCorrect,
        )?;
        csv.push_str(&format!(
            "{v},{},{},{},{}\n",
            report.miou, report.mvc[0].1, cost.total_params, cost.total_flops
        ));
        eprintln!("{} = {v}: miou {:.4}", args.axis, report.miou);
    }
    write_or_print(&args.out, &csv)
}

fn cmd_cost(args: CostArgs) -> Result<()> {
    let dims = parse_dims(&args.dims)?;
    let mut cfg = ModelConfig::default();
    cfg.p = args.p;
    cfg.scales = args.scales;
    cfg.input = dims;
    cfg.clip_len = args.clip_len;
    cfg.reference_offsets = (1..args.clip_len as i64).rev().map(|i| -3 * i).collect();
    cfg.validate()?;
    let report = analyze(&cfg)?;
    println!("# one multiply-accumulate = 2 FLOPs");
    print!("{}", report.csv());
    if let Some(repeats) = args.measure {
        let rt = measure_runtime::<f32>(&cfg, repeats)?;
        println!(
            "# forward median {:.4}s (IQR {:.4}s over {} runs)",
            rt.median_secs, rt.iqr_secs, rt.repeats
        );
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Cost(a) => cmd_cost(a),
    }
}

fn main() -> ExitCode {
    mrcfa::init_thread_pool();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
