use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use alignseg::checkpoint::Checkpoint;
use alignseg::config::RunConfig;
use alignseg::data::{parse_extent, read_ppm, write_dataset, Dataset, SceneSpec};
use alignseg::eval::{evaluate, MS_SCALES};
use alignseg::gradcheck::{run_suite, Scope, DEFAULT_TOLERANCE};
use alignseg::ops::conv::{conv2d_forward, conv_transpose2d_forward, ConvGeom};
use alignseg::train::{network_from_checkpoint, Observer, RunDir, Trainer};
use alignseg::{align, par, viz, Tensor4};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "alignseg", version, about = "Semantic segmentation with learned feature alignment")]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a network and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write color-coded offset fields predicted for one image.
    ///
    /// Each field becomes one PPM. Hue encodes direction, atan2(vertical,
    /// horizontal) swept once around the HSV color wheel (red points right,
    /// turning toward down). Brightness encodes magnitude relative to the
    /// field's maximum, which is printed next to each file.
    VizOffsets(VizArgs),
    /// Time a kernel over a list of sizes and print CSV.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train: usize,
    #[arg(long, default_value_t = 128)]
    val: usize,
    #[arg(long, env = "ALIGNSEG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Scene extent as HxW (multiples of 32).
    #[arg(long, default_value = "96x96")]
    size: String,
    /// Probability that a shape is a thin bar.
    #[arg(long)]
    thin_prob: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue the run in --out from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed iterations (the run can be resumed).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, env = "ALIGNSEG_SEED")]
    seed: Option<u64>,
    /// rgs, deconv, alignfa or alignfa_low_only.
    #[arg(long)]
    aggregation: Option<String>,
    /// none, pool or aligncm.
    #[arg(long)]
    context: Option<String>,
    #[arg(long)]
    bin_size: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    crop: Option<String>,
    #[arg(long)]
    ohem: Option<bool>,
    #[arg(long)]
    deep_supervision: Option<bool>,
    #[arg(long)]
    class_balanced: Option<bool>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Average over scales 0.75, 1, 1.25, 1.5 and 1.75.
    #[arg(long)]
    ms: bool,
    /// Also average over the mirrored input.
    #[arg(long)]
    flip: bool,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Binary PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchOp {
    Align,
    Rgs,
    Deconv,
    Conv,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    op: BenchOp,
    /// Comma-separated HxWxC sizes, e.g. 64x64x32,128x128x32.
    #[arg(long, default_value = "32x32x32,64x64x32,128x128x32")]
    sizes: String,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Align with an all-zero offset field instead of random offsets.
    #[arg(long)]
    zero_offsets: bool,
    #[arg(long, env = "ALIGNSEG_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = ScopeArg::Ops)]
    scope: ScopeArg,
    /// Scale the analytic gradient of the named check (fixture for testing
    /// the failure path).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Blocks,
    Network,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        par::set_parallel(false);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::VizOffsets(a) => viz_offsets(a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => bench(a).map(|_| ExitCode::SUCCESS),
        Command::GradCheck(a) => Ok(grad_check(a)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (height, width) = parse_extent(&a.size).with_context(|| format!("--size {:?} is not HxW", a.size))?;
    let mut spec = SceneSpec {
        height,
        width,
        num_classes: a.classes,
        ..SceneSpec::default()
    };
    if let Some(p) = a.thin_prob {
        spec.thin_prob = p;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let m = write_dataset(&a.out, &spec, a.seed, a.train, a.val, a.force)?;
    println!(
        "wrote {} samples ({} train, {} val) to {}",
        m.entries.len(),
        a.train,
        a.val,
        a.out.display()
    );
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set(k, &v);
    if let Some(v) = a.seed {
        set("seed", v.to_string())?;
    }
    if let Some(v) = &a.aggregation {
        set("aggregation", v.clone())?;
    }
    if let Some(v) = &a.context {
        set("context", v.clone())?;
    }
    if let Some(v) = a.bin_size {
        set("bin_size", v.to_string())?;
    }
    if let Some(v) = a.max_iter {
        set("max_iter", v.to_string())?;
    }
    if let Some(v) = a.batch_size {
        set("batch_size", v.to_string())?;
    }
    if let Some(v) = a.lr0 {
        set("lr0", v.to_string())?;
    }
    if let Some(v) = &a.crop {
        set("crop", v.clone())?;
    }
    if let Some(v) = a.ohem {
        set("ohem", v.to_string())?;
    }
    if let Some(v) = a.deep_supervision {
        set("deep_supervision", v.to_string())?;
    }
    if let Some(v) = a.class_balanced {
        set("class_balanced", v.to_string())?;
    }
    if let Some(v) = a.eval_every {
        set("eval_every", v.to_string())?;
    }
    if let Some(v) = a.checkpoint_every {
        set("checkpoint_every", v.to_string())?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let (mut trainer, mut run) = if a.resume {
        let last = a.out.join(RunDir::LAST);
        let ckpt = Checkpoint::load(&last)?;
        let trainer = Trainer::from_checkpoint(&ckpt, &data.train)?;
        let run = RunDir::reopen(&a.out, trainer.iter)?;
        println!("resuming at iteration {}", trainer.iter);
        (trainer, run)
    } else {
        let cfg = resolve_config(&a)?;
        if cfg.network.num_classes != data.num_classes {
            bail!(
                "config has {} classes but the dataset has {}",
                cfg.network.num_classes,
                data.num_classes
            );
        }
        let run = RunDir::create(&a.out, &cfg)?;
        (Trainer::new(cfg, &data.train)?, run)
    };
    if trainer.cfg.network.num_classes != data.num_classes {
        bail!("checkpoint and dataset disagree on the class count");
    }
    let start = Instant::now();
    trainer.run(&data.train, &data.val, a.stop_after, &mut run)?;
    println!(
        "trained to iteration {} of {} in {:.1}s",
        trainer.iter,
        trainer.cfg.train.max_iter,
        start.elapsed().as_secs_f64()
    );
    if trainer.finished() {
        if data.val.is_empty() {
            println!("no validation split; skipping final metrics");
        } else {
            let m = evaluate(&trainer.net, &data.val, &[1.0], false)?;
            run.write_metrics(&m)?;
            print!("{m}");
        }
    } else {
        Observer::checkpoint(&mut run, &trainer)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (_, net) = network_from_checkpoint(&ckpt)?;
    let data = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    if data.num_classes != net.cfg.num_classes {
        bail!(
            "checkpoint predicts {} classes but the dataset has {}",
            net.cfg.num_classes,
            data.num_classes
        );
    }
    let samples = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Val => &data.val,
    };
    let scales: &[f64] = if a.ms { &MS_SCALES } else { &[1.0] };
    let m = evaluate(&net, samples, scales, a.flip)?;
    print!("{m}");
    Ok(())
}

fn viz_offsets(a: VizArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (_, mut net) = network_from_checkpoint(&ckpt)?;
    let image = read_ppm(&a.image)?;
    let written = viz::write_offset_images(&mut net, &image, &a.out)?;
    if written.is_empty() {
        bail!("the network predicts no offsets (aggregation {} and context {})", net.cfg.aggregation, net.cfg.context);
    }
    if written.iter().all(|w| w.max_magnitude == 0.0) {
        eprintln!("warning: every offset field is zero (untrained or zero-initialised heads); images are black");
    }
    for w in &written {
        println!("{} max_magnitude={:.6} {}", w.name, w.max_magnitude, w.path.display());
    }
    Ok(())
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize, usize)>> {
    s.split(',')
        .map(|part| {
            let dims: Vec<usize> = part
                .trim()
                .split(['x', 'X'])
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("size {part:?} is not HxWxC"))?;
            match dims[..] {
                [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
                _ => bail!("size {part:?} is not HxWxC"),
            }
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f32, hi: f32) -> Tensor4<f32> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

fn bench(a: BenchArgs) -> Result<()> {
    let sizes = parse_sizes(&a.sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    println!("op,C,H,W,ms_per_call,GB_per_s");
    for (h, w, c) in sizes {
        let (mut call, bytes): (Box<dyn FnMut()>, usize) = match a.op {
            BenchOp::Align => {
                let f = random_tensor(&mut rng, [1, c, h, w], -1.0, 1.0);
                let d = if a.zero_offsets {
                    Tensor4::zeros([1, 2, h, w])
                } else {
                    random_tensor(&mut rng, [1, 2, h, w], -3.0, 3.0)
                };
                let bytes = 4 * (2 * c * h * w + 2 * h * w);
                (Box::new(move || drop(align::align_sample(&f, &d).expect("align"))), bytes)
            }
            BenchOp::Rgs => {
                if h % 2 != 0 || w % 2 != 0 {
                    bail!("rgs sizes must be even");
                }
                let f = random_tensor(&mut rng, [1, c, h / 2, w / 2], -1.0, 1.0);
                let bytes = 4 * (c * h * w + c * h * w / 4);
                (Box::new(move || drop(align::upsample_rgs(&f, 2).expect("resize"))), bytes)
            }
            BenchOp::Deconv => {
                if h % 2 != 0 || w % 2 != 0 {
                    bail!("deconv sizes must be even");
                }
                let x = random_tensor(&mut rng, [1, c, h / 2, w / 2], -1.0, 1.0);
                let k = random_tensor(&mut rng, [c, c, 4, 4], -0.1, 0.1);
                let bytes = 4 * (c * h * w + c * h * w / 4 + 16 * c * c);
                let g = ConvGeom::new(4, 2, 1);
                (
                    Box::new(move || drop(conv_transpose2d_forward(&x, &k, None, g).expect("deconv"))),
                    bytes,
                )
            }
            BenchOp::Conv => {
                let x = random_tensor(&mut rng, [1, c, h, w], -1.0, 1.0);
                let k = random_tensor(&mut rng, [c, c, 3, 3], -0.1, 0.1);
                let bytes = 4 * (2 * c * h * w + 9 * c * c);
                let g = ConvGeom::new(3, 1, 1);
                (Box::new(move || drop(conv2d_forward(&x, &k, None, g).expect("conv"))), bytes)
            }
        };
        for _ in 0..a.warmup {
            call();
        }
        let start = Instant::now();
        for _ in 0..a.reps.max(1) {
            call();
        }
        let secs = start.elapsed().as_secs_f64() / a.reps.max(1) as f64;
        let name = match a.op {
            BenchOp::Align => "align",
            BenchOp::Rgs => "rgs",
            BenchOp::Deconv => "deconv",
            BenchOp::Conv => "conv",
        };
        println!("{name},{c},{h},{w},{:.6},{:.4}", secs * 1e3, bytes as f64 / secs / 1e9);
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> ExitCode {
    let scope = match a.scope {
        ScopeArg::Ops => Scope::Ops,
        ScopeArg::Blocks => Scope::Blocks,
        ScopeArg::Network => Scope::Network,
    };
    let start = Instant::now();
    let reports = run_suite(scope, a.corrupt.as_deref());
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(DEFAULT_TOLERANCE);
        println!("{} {r}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{} checks, {} failed, {:.2}s (tolerance {:.0e})",
        reports.len(),
        failed.len(),
        start.elapsed().as_secs_f64(),
        DEFAULT_TOLERANCE
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
