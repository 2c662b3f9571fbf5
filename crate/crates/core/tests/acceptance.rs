//! End-to-end acceptance run.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero if any
//! fails. `ACCEPTANCE_ONLY=1,4,7` restricts the run to the listed criteria.
//!
//! The training criteria share one set of models: each configuration is
//! trained once per seed and reused by every criterion that needs it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use alignseg::align::{align_oracle, align_sample};
use alignseg::autograd::Graph;
use alignseg::checkpoint::Checkpoint;
use alignseg::config::RunConfig;
use alignseg::data::{generate_split, Dataset, Sample, SceneSpec, Split};
use alignseg::eval::evaluate;
use alignseg::gradcheck::{run_suite, Scope, DEFAULT_TOLERANCE};
use alignseg::metrics::Metrics;
use alignseg::network::{ContextMode, Network, NetworkConfig};
use alignseg::nn::Aggregation;
use alignseg::train::{MemoryLog, Trainer};
use alignseg::viz::{boundary_contrast, magnitude_on_image, offset_fields};
use alignseg::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeds every training criterion takes the median over.
const SEEDS: [u64; 3] = [0, 1, 2];
/// Global seed of the 512/128 synthetic split.
const DATA_SEED: u64 = 1234;
const TRAIN_SCENES: usize = 512;
const VAL_SCENES: usize = 128;

/// Reduced network used for every ablation run.
const ABLATION_NET: &str = "
stem_channels = 16
block_channels = 16,24,32,48
pathway_width = 16
rcb_inner = 8
offset_head_width = 16
head_width = 32
";

/// Ablation schedule on 96x96 scenes.
const ABLATION_TRAIN: &str = "
lr0 = 0.1
batch_size = 8
max_iter = 1000
crop = 96x96
";

/// Context-module runs need a 1/32 feature map of at least 6x6, so they use
/// 192x192 scenes. Two crops per batch keep the pixels per step equal to the
/// ablation schedule.
const CONTEXT_SIZE: usize = 192;
const CONTEXT_TRAIN: &str = "
lr0 = 0.1
batch_size = 2
max_iter = 1000
crop = 192x192
";
const CONTEXT_BINS: [usize; 3] = [2, 3, 6];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(" "))
}

// ---------------------------------------------------------------- models

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Protocol {
    Ablation,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    protocol: Protocol,
    context: &'static str,
    aggregation: &'static str,
    bins: usize,
    seed: u64,
}

struct Trained {
    net: Network<f32>,
    metrics: Metrics,
}

struct Lab {
    ablation: Option<Dataset>,
    context: Option<Dataset>,
    runs: BTreeMap<RunKey, Trained>,
    log: Vec<String>,
}

impl Lab {
    fn new() -> Self {
        Self {
            ablation: None,
            context: None,
            runs: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    fn data(&mut self, protocol: Protocol) -> &Dataset {
        let (slot, size) = match protocol {
            Protocol::Ablation => (&mut self.ablation, 96),
            Protocol::Context => (&mut self.context, CONTEXT_SIZE),
        };
        slot.get_or_insert_with(|| {
            let spec = SceneSpec {
                height: size,
                width: size,
                ..SceneSpec::default()
            };
            Dataset::synthetic(&spec, DATA_SEED, TRAIN_SCENES, VAL_SCENES).expect("synthetic split")
        })
    }

    fn config(key: &RunKey) -> RunConfig {
        let schedule = match key.protocol {
            Protocol::Ablation => ABLATION_TRAIN,
            Protocol::Context => CONTEXT_TRAIN,
        };
        let text = format!(
            "{ABLATION_NET}{schedule}aggregation = {}\ncontext = {}\nbin_size = {}\nseed = {}\n",
            key.aggregation, key.context, key.bins, key.seed
        );
        RunConfig::parse(&text).expect("valid acceptance config")
    }

    fn train(&mut self, key: RunKey) -> &Trained {
        if !self.runs.contains_key(&key) {
            let start = Instant::now();
            let cfg = Self::config(&key);
            let data = self.data(key.protocol).clone();
            let mut trainer = Trainer::new(cfg, &data.train).expect("trainer");
            trainer.run(&data.train, &[], None, &mut MemoryLog::default()).expect("training run");
            let metrics = evaluate(&trainer.net, &data.val, &[1.0], false).expect("evaluation");
            let line = format!(
                "    trained {:?} {}:{} K={} seed {}: miou {:.4} acc {:.4} boundary_f {:.4} ({:.0}s)",
                key.protocol,
                key.context,
                key.aggregation,
                key.bins,
                key.seed,
                metrics.miou,
                metrics.pixel_acc,
                metrics.boundary_f,
                start.elapsed().as_secs_f64()
            );
            say(&line);
            self.log.push(line);
            self.runs.insert(
                key,
                Trained {
                    net: trainer.net,
                    metrics,
                },
            );
        }
        &self.runs[&key]
    }

    fn ablation(&mut self, context: &'static str, aggregation: &'static str, seed: u64) -> &Trained {
        self.train(RunKey {
            protocol: Protocol::Ablation,
            context,
            aggregation,
            bins: 3,
            seed,
        })
    }

    /// Per-seed validation metric of one ablation configuration.
    fn ablation_series(&mut self, context: &'static str, aggregation: &'static str, f: impl Fn(&Metrics) -> f64) -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| f(&self.ablation(context, aggregation, s).metrics))
            .collect()
    }
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// ------------------------------------------------------------ criteria

fn align_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let instances = 150;
    for _ in 0..instances {
        let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16));
        let f = Tensor4::<f64>::from_fn([n, c, h, w], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let d = Tensor4::<f64>::from_fn([n, 2, h, w], |_, _, _, _| rng.gen_range(-3.0..3.0));
        let fast = align_sample(&f.cast::<f32>(), &d.cast::<f32>()).expect("align").cast::<f64>();
        worst = worst.max(fast.max_abs_diff(&align_oracle(&f, &d)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-5 && secs < 10.0,
        format!("{instances} instances, max |fast - oracle| = {worst:.2e} (limit 1e-5), {secs:.2}s (limit 10s)"),
    )
}

fn identity_and_shift() -> Outcome {
    let fixtures: [[usize; 4]; 5] = [[1, 1, 1, 1], [1, 3, 4, 4], [2, 2, 5, 7], [1, 4, 8, 3], [2, 1, 6, 6]];
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut identity_ok = true;
    let mut shifts = 0usize;
    let mut shift_failures = Vec::new();
    for dims in fixtures {
        let f = Tensor4::<f32>::from_fn(dims, |_, _, _, _| rng.gen_range(-10.0..10.0));
        let [n, _, h, w] = dims;
        let zero = align_sample(&f, &Tensor4::zeros([n, 2, h, w])).expect("align");
        identity_ok &= zero.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let (hi, wi) = (h as i64, w as i64);
        for dy in -(hi + 1)..=(hi + 1) {
            for dx in -(wi + 1)..=(wi + 1) {
                let d = Tensor4::from_fn([n, 2, h, w], |_, c, _, _| if c == 0 { dy as f32 } else { dx as f32 });
                let out = align_sample(&f, &d).expect("align");
                let want = Tensor4::from_fn(dims, |i, c, y, x| {
                    let (sy, sx) = (y as i64 + dy, x as i64 + dx);
                    if (0..hi).contains(&sy) && (0..wi).contains(&sx) {
                        f.at(i, c, sy as usize, sx as usize)
                    } else {
                        0.0
                    }
                });
                shifts += 1;
                if !out.data().iter().zip(want.data()).all(|(a, b)| a == b) {
                    shift_failures.push(format!("{dims:?} by ({dy},{dx})"));
                }
            }
        }
    }
    outcome(
        identity_ok && shift_failures.is_empty(),
        format!(
            "{} fixtures: zero offsets bitwise identity {}, {shifts} integer shifts, {} mismatches{}",
            fixtures.len(),
            if identity_ok { "holds" } else { "BROKEN" },
            shift_failures.len(),
            shift_failures.first().map(|s| format!(" (first {s})")).unwrap_or_default()
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut reports = Vec::new();
    for scope in [Scope::Ops, Scope::Blocks, Scope::Network] {
        reports.extend(run_suite(scope, None));
    }
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed(DEFAULT_TOLERANCE))
        .map(|r| r.to_string())
        .collect();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let names: BTreeSet<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    let required = [
        "conv2d",
        "conv2d_transpose",
        "batchnorm_train",
        "batchnorm_eval",
        "avg_pool_to_bins",
        "bilinear_resize",
        "align_sample",
        "softmax_cross_entropy",
        "class_balanced_ce",
        "ohem_ce",
    ];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !names.contains(n)).collect();
    let mut detail = format!(
        "{} checks, worst {} at {:.2e} (limit {:.0e}), {secs:.1}s (limit 60s)",
        reports.len(),
        worst.name,
        worst.max_rel_error,
        DEFAULT_TOLERANCE
    );
    for f in &failed {
        let _ = write!(detail, "\n      failed: {f}");
    }
    if !missing.is_empty() {
        let _ = write!(detail, "\n      missing checks: {missing:?}");
    }
    outcome(failed.is_empty() && missing.is_empty() && secs < 60.0, detail)
}

/// Gives every parameter and buffer a random non-trivial value.
fn randomize(net: &mut Network<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        let var = net.store.entry(id).name.ends_with("running_var") || net.store.entry(id).name.ends_with("gamma");
        for v in net.store.get_mut(id).data_mut() {
            *v = if var { rng.gen_range(0.5..1.5) } else { rng.gen_range(-0.3..0.3) };
        }
    }
}

fn net_config(aggregation: Aggregation, context: ContextMode) -> NetworkConfig {
    NetworkConfig {
        stem_channels: 16,
        block_channels: [16, 24, 32, 48],
        pathway_width: 16,
        rcb_inner: 8,
        offset_head_width: 16,
        head_width: 16,
        aggregation,
        context,
        ..NetworkConfig::default()
    }
}

fn logits_of(net: &mut Network<f32>, image: &Tensor4<f32>, train: bool) -> Tensor4<f32> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, image, train).expect("forward");
    g.value(out.logits).clone()
}

fn bitwise_equal(a: &Tensor4<f32>, b: &Tensor4<f32>) -> bool {
    a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn zero_offset_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let image = Tensor4::<f32>::from_fn([2, 3, 64, 96], |_, _, _, _| rng.gen_range(0.0..1.0));
    let mut lines = Vec::new();
    let mut all = true;
    let mut compare = |label: String, reference: Network<f32>, candidate: Network<f32>| {
        for train in [false, true] {
            let a = logits_of(&mut reference.clone(), &image, train);
            let b = logits_of(&mut candidate.clone(), &image, train);
            let same = bitwise_equal(&a, &b);
            let nontrivial = a.data().iter().any(|v| *v != 0.0);
            all &= same && nontrivial;
            lines.push(format!(
                "{label} ({}): {}",
                if train { "train mode" } else { "eval mode" },
                if same { "identical" } else { "DIFFERENT" }
            ));
        }
    };
    for (i, ctx) in [ContextMode::None, ContextMode::Pool].into_iter().enumerate() {
        let mut rgs = Network::<f32>::build(&net_config(Aggregation::Rgs, ctx), 7).expect("build");
        randomize(&mut rgs, 200 + i as u64);
        for agg in [Aggregation::AlignFa, Aggregation::AlignFaLowOnly] {
            let mut fa = Network::<f32>::build(&net_config(agg, ctx), 7).expect("build");
            randomize(&mut fa, 300);
            let copied = fa.store.copy_matching(&rgs.store);
            assert_eq!(copied, rgs.store.len(), "every rgs parameter exists in the {agg} build");
            fa.zero_offset_heads();
            compare(format!("{agg} vs rgs, context {ctx}"), rgs.clone(), fa);
        }
    }
    // Context alignment with a zero head against the plain pooling module.
    for agg in [Aggregation::Rgs, Aggregation::AlignFa] {
        let mut pool = Network::<f32>::build(&net_config(agg, ContextMode::Pool), 8).expect("build");
        randomize(&mut pool, 400);
        let mut cm = Network::<f32>::build(&net_config(agg, ContextMode::AlignCm), 8).expect("build");
        randomize(&mut cm, 401);
        cm.zero_offset_heads();
        // Restores every shared weight, aggregation heads included; only the
        // context head has no counterpart and stays zero.
        cm.store.copy_matching(&pool.store);
        compare(format!("aligncm vs pool, aggregation {agg}"), pool, cm);
    }
    // Low-only equals both-directions when the second field is forced to zero.
    let mut fa = Network::<f32>::build(&net_config(Aggregation::AlignFa, ContextMode::AlignCm), 9).expect("build");
    randomize(&mut fa, 500);
    for (_, conv) in fa.offset_head_outputs() {
        if conv.c_out == 4 {
            let w = fa.store.get_mut(conv.weight);
            let per_out = w.len() / 4;
            w.data_mut()[2 * per_out..].fill(0.0);
            let b = fa.store.get_mut(conv.bias.expect("head bias"));
            b.data_mut()[2..].fill(0.0);
        }
    }
    let mut low = Network::<f32>::build(&net_config(Aggregation::AlignFaLowOnly, ContextMode::AlignCm), 9).expect("build");
    low.store.copy_matching(&fa.store);
    compare("alignfa with zero high-resolution field vs alignfa_low_only".into(), fa, low);
    let detail = lines.join("\n      ");
    outcome(all, format!("{} comparisons, logits bitwise equal in all: {all}\n      {detail}", lines.len()))
}

fn shape_contract() -> Outcome {
    let mut problems = Vec::new();
    let mut checked = 0;
    for (h, w) in [(64, 64), (96, 96), (128, 96)] {
        for agg in Aggregation::ALL {
            for ctx in [ContextMode::None, ContextMode::Pool, ContextMode::AlignCm] {
                let mut cfg = NetworkConfig {
                    aggregation: agg,
                    context: ctx,
                    ..NetworkConfig::default()
                };
                cfg.bin_size = 1;
                let mut net = Network::<f32>::build(&cfg, 0).expect("build");
                let image = Tensor4::<f32>::full([1, 3, h, w], 0.5);
                let mut g = Graph::new();
                let out = net.forward(&mut g, &image, false).expect("forward");
                let hw = |v| {
                    let d: [usize; 4] = g.value(v).dims();
                    (d[2], d[3])
                };
                let f_want = [8, 16, 32, 32];
                for (k, &v) in out.pyramid.f.iter().enumerate() {
                    if hw(v) != (h / f_want[k], w / f_want[k]) {
                        problems.push(format!("{h}x{w} {agg}/{ctx}: F{} is {:?}", k + 1, hw(v)));
                    }
                }
                if hw(out.pyramid.x) != (h / 4, w / 4) {
                    problems.push(format!("{h}x{w} {agg}/{ctx}: X is {:?}", hw(out.pyramid.x)));
                }
                for (k, &v) in out.pyramid.a.iter().enumerate() {
                    if hw(v) != (h / 4, w / 4) {
                        problems.push(format!("{h}x{w} {agg}/{ctx}: A{k} is {:?}", hw(v)));
                    }
                }
                if hw(out.logits) != (h, w) {
                    problems.push(format!("{h}x{w} {agg}/{ctx}: logits {:?}", hw(out.logits)));
                }
                checked += 1;
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "{checked} builds over 64x64, 96x96, 128x96: F1..F4 at 1/8, 1/16, 1/32, 1/32, X and A0..A4 at 1/4{}",
            problems.iter().map(|p| format!("\n      {p}")).collect::<String>()
        ),
    )
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SceneSpec::default();
    let scenes = generate_split(&spec, 42, Split::Train, 8).expect("scenes");
    let cfg = RunConfig::parse("batch_size = 4\nmax_iter = 2000\ncrop = 96x96\nscale_min = 1\nscale_max = 1\n").expect("config");
    let mut trainer = Trainer::new(cfg, &scenes).expect("trainer");
    let mut reached = None;
    let mut acc = 0.0;
    while !trainer.finished() {
        trainer.step(&scenes).expect("step");
        if trainer.iter % 50 == 0 {
            acc = evaluate(&trainer.net, &scenes, &[1.0], false).expect("eval").pixel_acc;
            if acc > 0.95 {
                reached = Some(trainer.iter);
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = reached.is_some() && secs < 300.0;
    outcome(
        passed,
        match reached {
            Some(it) => format!("pixel accuracy {acc:.4} > 0.95 after {it} iterations (limit 2000), {secs:.0}s (limit 300s)"),
            None => format!("pixel accuracy {acc:.4} after 2000 iterations, {secs:.0}s"),
        },
    )
}

fn table_one(lab: &mut Lab) -> Outcome {
    let base = lab.ablation_series("none", "rgs", |m| m.miou);
    let cm = lab.ablation_series("aligncm", "rgs", |m| m.miou);
    let full = lab.ablation_series("aligncm", "alignfa", |m| m.miou);
    let (mb, mc, mf) = (median(&base), median(&cm), median(&full));
    outcome(
        mb < mc && mc < mf && mf - mc >= 0.005,
        format!(
            "median mIoU baseline {mb:.4} {} / +AlignCM {mc:.4} {} / +AlignCM+AlignFA {mf:.4} {}; need b < cm < fa and fa - cm >= 0.005 (got {:+.4})",
            fmt_list(&base),
            fmt_list(&cm),
            fmt_list(&full),
            mf - mc
        ),
    )
}

fn table_three(lab: &mut Lab) -> Outcome {
    let rgs = lab.ablation_series("aligncm", "rgs", |m| m.miou);
    let dec = lab.ablation_series("aligncm", "deconv", |m| m.miou);
    let fa = lab.ablation_series("aligncm", "alignfa", |m| m.miou);
    let bf_rgs = lab.ablation_series("aligncm", "rgs", |m| m.boundary_f);
    let bf_fa = lab.ablation_series("aligncm", "alignfa", |m| m.boundary_f);
    let (r, d, f) = (median(&rgs), median(&dec), median(&fa));
    let (br, bfa) = (median(&bf_rgs), median(&bf_fa));
    outcome(
        f > d && d >= r && bfa > br,
        format!(
            "median mIoU AlignFA {f:.4} {} / Deconv {d:.4} {} / RGS {r:.4} {}; median boundary F AlignFA {bfa:.4} {} vs RGS {br:.4} {}",
            fmt_list(&fa),
            fmt_list(&dec),
            fmt_list(&rgs),
            fmt_list(&bf_fa),
            fmt_list(&bf_rgs)
        ),
    )
}

fn table_four(lab: &mut Lab) -> Outcome {
    let both = lab.ablation_series("aligncm", "alignfa", |m| m.miou);
    let low = lab.ablation_series("aligncm", "alignfa_low_only", |m| m.miou);
    let rgs = lab.ablation_series("aligncm", "rgs", |m| m.miou);
    let (b, l, r) = (median(&both), median(&low), median(&rgs));
    outcome(
        b >= l && l >= r,
        format!(
            "median mIoU both directions {b:.4} {} / low only {l:.4} {} / RGS {r:.4} {}",
            fmt_list(&both),
            fmt_list(&low),
            fmt_list(&rgs)
        ),
    )
}

fn table_five(lab: &mut Lab) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for k in CONTEXT_BINS {
        let series = |lab: &mut Lab, context: &'static str| -> Vec<f64> {
            SEEDS
                .iter()
                .map(|&seed| {
                    lab.train(RunKey {
                        protocol: Protocol::Context,
                        context,
                        aggregation: "rgs",
                        bins: k,
                        seed,
                    })
                    .metrics
                    .miou
                })
                .collect()
        };
        let without = series(lab, "pool");
        let with = series(lab, "aligncm");
        let (a, b) = (median(&with), median(&without));
        ok &= a >= b;
        parts.push(format!(
            "K={k}: w/ {a:.4} {} vs w/o {b:.4} {} ({:+.4})",
            fmt_list(&with),
            fmt_list(&without),
            a - b
        ));
    }
    outcome(ok, format!("median mIoU on {CONTEXT_SIZE}x{CONTEXT_SIZE} scenes, {}", parts.join("; ")))
}

fn table_six(lab: &mut Lab) -> Outcome {
    let data = lab.data(Protocol::Ablation).val.clone();
    let mut single_acc = Vec::new();
    let mut ms_acc = Vec::new();
    let mut single_miou = Vec::new();
    let mut ms_miou = Vec::new();
    for &seed in &SEEDS {
        let trained = lab.ablation("aligncm", "alignfa", seed);
        let ms = evaluate(&trained.net, &data, &alignseg::eval::MS_SCALES, true).expect("ms eval");
        single_acc.push(trained.metrics.pixel_acc);
        single_miou.push(trained.metrics.miou);
        ms_acc.push(ms.pixel_acc);
        ms_miou.push(ms.miou);
    }
    let drop = median(&single_acc) - median(&ms_acc);
    let improved = ms_miou.iter().zip(&single_miou).filter(|(m, s)| m > s).count();
    outcome(
        drop <= 0.002 && 2 * improved > SEEDS.len(),
        format!(
            "median pixel acc single {:.4} -> MS+flip {:.4} (drop {drop:+.4}, limit 0.002); mIoU {} -> {}, improved in {improved}/{} models",
            median(&single_acc),
            median(&ms_acc),
            fmt_list(&single_miou),
            fmt_list(&ms_miou),
            SEEDS.len()
        ),
    )
}

const TINY_RUN: &str = "
stem_channels = 8
block_channels = 8,8,8,12
pathway_width = 8
rcb_inner = 4
offset_head_width = 8
head_width = 8
batch_size = 2
max_iter = 12
crop = 64x64
lr0 = 0.05
class_balanced = true
deep_supervision = true
eval_every = 4
";

fn determinism() -> Outcome {
    let spec = SceneSpec {
        height: 64,
        width: 64,
        ..SceneSpec::default()
    };
    let data = Dataset::synthetic(&spec, 77, 8, 2).expect("data");
    let cfg = RunConfig::parse(TINY_RUN).expect("config");
    let full = |cfg: &RunConfig| {
        let mut t = Trainer::new(cfg.clone(), &data.train).expect("trainer");
        let mut log = MemoryLog::default();
        t.run(&data.train, &data.val, None, &mut log).expect("run");
        let rows: Vec<String> = log.rows.iter().map(|r| r.to_csv()).collect();
        (rows, t.checkpoint().to_bytes().expect("encode"))
    };
    let (rows_a, ckpt_a) = full(&cfg);
    let (rows_b, ckpt_b) = full(&cfg);
    let repeat = rows_a == rows_b && ckpt_a == ckpt_b;

    let decoded = Checkpoint::from_bytes(&ckpt_a).expect("decode");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("c.bin");
    decoded.save(&path).expect("save");
    let reloaded = Checkpoint::load(&path).expect("load");
    let roundtrip = reloaded.to_bytes().expect("encode") == ckpt_a && reloaded == decoded;

    let mut resumes = Vec::new();
    for stop in [1, 4, 7, 11] {
        let mut t = Trainer::new(cfg.clone(), &data.train).expect("trainer");
        let mut log = MemoryLog::default();
        t.run(&data.train, &data.val, Some(stop), &mut log).expect("first half");
        let path = dir.path().join(format!("stop{stop}.bin"));
        t.checkpoint().save(&path).expect("save");
        let mut t = Trainer::from_checkpoint(&Checkpoint::load(&path).expect("load"), &data.train).expect("restore");
        t.run(&data.train, &data.val, None, &mut log).expect("second half");
        let rows: Vec<String> = log.rows.iter().map(|r| r.to_csv()).collect();
        resumes.push((stop, rows == rows_a && t.checkpoint().to_bytes().expect("encode") == ckpt_a));
    }
    let resume_ok = resumes.iter().all(|(_, ok)| *ok);
    outcome(
        repeat && roundtrip && resume_ok,
        format!(
            "repeat run identical: {repeat}; checkpoint roundtrip bitwise: {roundtrip}; resume at {:?} identical: {resume_ok}",
            resumes.iter().map(|(s, ok)| format!("{s}:{ok}")).collect::<Vec<_>>()
        ),
    )
}

fn offset_interpretability(lab: &mut Lab) -> Outcome {
    let data: Vec<Sample> = lab.data(Protocol::Ablation).val.clone();
    let mut net = lab.ablation("aligncm", "alignfa", SEEDS[0]).net.clone();
    let mut per_field: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let (mut near_all, mut far_all, mut n_all) = (0.0, 0.0, 0usize);
    for s in &data {
        let (h, w) = (s.height(), s.width());
        let fields = offset_fields(&mut net, &s.image).expect("offsets");
        let mut combined = vec![0.0; h * w];
        let mut steps = 0;
        for (name, field) in &fields {
            if !name.starts_with("step") {
                continue;
            }
            let mag = magnitude_on_image(field, 0, (h, w), h, w);
            if let Some((near, far)) = boundary_contrast(&mag, &s.labels.data, h, w, 2) {
                let e = per_field.entry(name.clone()).or_default();
                e.0 += near;
                e.1 += far;
                e.2 += 1;
            }
            for (c, m) in combined.iter_mut().zip(&mag) {
                *c += m;
            }
            steps += 1;
        }
        combined.iter_mut().for_each(|c| *c /= steps as f64);
        if let Some((near, far)) = boundary_contrast(&combined, &s.labels.data, h, w, 2) {
            near_all += near;
            far_all += far;
            n_all += 1;
        }
    }
    let (near, far) = (near_all / n_all as f64, far_all / n_all as f64);
    let fields: Vec<String> = per_field
        .iter()
        .map(|(k, (a, b, n))| format!("{k} {:.3}/{:.3}", a / *n as f64, b / *n as f64))
        .collect();
    outcome(
        near > far,
        format!(
            "mean offset magnitude within 2px of boundaries {near:.4} vs elsewhere {far:.4} over {n_all} val images (px of the 1/4 grid); per field near/far: {}",
            fields.join(", ")
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut lab = Lab::new();
    type Criterion = (usize, &'static str, Box<dyn Fn(&mut Lab) -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        (1, "align oracle equivalence", Box::new(|_| align_oracle_equivalence())),
        (2, "identity and integer shift", Box::new(|_| identity_and_shift())),
        (3, "gradient suite", Box::new(|_| gradient_suite())),
        (4, "zero-offset reduction", Box::new(|_| zero_offset_reduction())),
        (5, "shape contract", Box::new(|_| shape_contract())),
        (6, "overfit sanity", Box::new(|_| overfit())),
        (7, "baseline < +AlignCM < +AlignCM+AlignFA", Box::new(table_one)),
        (8, "AlignFA > Deconv >= RGS, boundary F", Box::new(table_three)),
        (9, "both directions >= low only >= RGS", Box::new(table_four)),
        (10, "AlignCM with vs without alignment per K", Box::new(table_five)),
        (11, "MS+flip evaluation", Box::new(table_six)),
        (12, "determinism and persistence", Box::new(|_| determinism())),
        (13, "offset magnitude at boundaries", Box::new(offset_interpretability)),
    ];
    let start = Instant::now();
    let mut summary = Vec::new();
    for (id, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run(&mut lab))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let line = format!(
            "{} criterion {id:>2} {name} [{:.1}s]: {}",
            if result.passed { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            result.detail
        );
        say(&line);
        summary.push((result.passed, format!("{} criterion {id:>2} {name}", if result.passed { "PASS" } else { "FAIL" })));
    }
    let failed = summary.iter().filter(|(p, _)| !p).count();
    say("");
    say("acceptance summary");
    for (_, line) in &summary {
        say(&format!("  {line}"));
    }
    say(&format!(
        "{} of {} criteria passed in {:.0}s",
        summary.len() - failed,
        summary.len(),
        start.elapsed().as_secs_f64()
    ));
    if failed > 0 {
        std::process::exit(1);
    }
}
