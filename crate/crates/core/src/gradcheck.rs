//! Central finite-difference verification of analytic gradients.
//!
//! Everything runs in `f64`. A check builds a scalar objective on a fresh
//! tape, takes the analytic gradient for every input and every trainable
//! parameter, then compares sampled coordinates against
//! `(f(x + eps) - f(x - eps)) / (2 eps)`. The reported error for a coordinate
//! is `|analytic - numeric| / (|analytic| + 1e-8)`.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::labels::{LabelMap, IGNORE};
use crate::network::{ContextMode, Network, NetworkConfig};
use crate::nn::layers::{conv1x1, conv3x3, Conv, ConvBn, ConvTranspose, Ctx};
use crate::nn::{self, Aggregation, AlignCm, AlignFa, Rcb, SegHead};
use crate::ops::conv::ConvGeom;
use crate::params::ParamStore;
use crate::tensor::Tensor4;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Where the worst coordinate of a check was found.
#[derive(Clone, Debug)]
pub struct Worst {
    pub location: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Worst>,
    /// Set when the objective itself failed to evaluate.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<28} max_rel_err={:.3e} coords={}", self.name, self.max_rel_error, self.coords_checked)?;
        if let Some(w) = &self.worst {
            write!(f, " worst={} (analytic {:.6e}, numeric {:.6e})", w.location, w.analytic, w.numeric)?;
        }
        if let Some(e) = &self.failure {
            write!(f, " FAILED: {e}")?;
        }
        Ok(())
    }
}

/// Settings for a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// At most this many coordinates are sampled per tensor.
    pub max_coords: usize,
    pub seed: u64,
    /// Scales every analytic gradient by 1.1 (for testing the detector).
    pub corrupt: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_coords: 24,
            seed: 0,
            corrupt: false,
        }
    }
}

/// Objective over leaf inputs and the parameters in the context's store.
pub trait Objective: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>> Objective for F {}

fn evaluate(f: &impl Objective, store: &ParamStore<f64>, inputs: &[Tensor4<f64>], train: bool) -> Result<f64> {
    let mut graph = Graph::new();
    let mut store = store.clone();
    let mut ctx = Ctx::new(&mut graph, &mut store, train);
    let vars = inputs.iter().map(|t| ctx.graph.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut ctx, &vars)?;
    Ok(graph.value(out).data()[0])
}

impl GradCheck {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    /// Checks gradients with respect to `inputs` and every trainable entry
    /// of `store`.
    pub fn run(
        &self,
        name: &str,
        store: &ParamStore<f64>,
        inputs: &[Tensor4<f64>],
        train: bool,
        f: impl Objective,
    ) -> GradCheckReport {
        match self.try_run(name, store, inputs, train, &f) {
            Ok(r) => r,
            Err(e) => GradCheckReport {
                name: name.to_string(),
                max_rel_error: f64::INFINITY,
                coords_checked: 0,
                worst: None,
                failure: Some(e.to_string()),
            },
        }
    }

    fn try_run(
        &self,
        name: &str,
        store: &ParamStore<f64>,
        inputs: &[Tensor4<f64>],
        train: bool,
        f: &impl Objective,
    ) -> Result<GradCheckReport> {
        let mut graph = Graph::new();
        let mut work = store.clone();
        let (input_grads, param_grads) = {
            let (vars, out) = {
                let mut ctx = Ctx::new(&mut graph, &mut work, train);
                let vars = inputs.iter().map(|t| ctx.graph.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
                let out = f(&mut ctx, &vars)?;
                (vars, out)
            };
            let grads = graph.backward(out)?;
            let ig: Vec<Tensor4<f64>> = vars
                .iter()
                .zip(inputs)
                .map(|(v, t)| grads.wrt(*v, t.dims()))
                .collect();
            (ig, graph.param_grads(&grads))
        };
        let scale = if self.corrupt { 1.1 } else { 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            coords_checked: 0,
            worst: None,
            failure: None,
        };
        let record = |report: &mut GradCheckReport, location: String, analytic: f64, numeric: f64| {
            let err = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    location,
                    analytic,
                    numeric,
                });
            }
        };
        for (i, (input, grad)) in inputs.iter().zip(&input_grads).enumerate() {
            for idx in pick(input.len(), self.max_coords, &mut rng) {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[idx] += self.eps;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[idx] -= self.eps;
                let numeric = (evaluate(f, store, &plus, train)? - evaluate(f, store, &minus, train)?) / (2.0 * self.eps);
                record(&mut report, format!("input{i}[{idx}]"), grad.data()[idx] * scale, numeric);
            }
        }
        for id in store.trainable_ids() {
            let value = store.get(id);
            let grad = param_grads
                .iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, g)| g.clone())
                .unwrap_or_else(|| Tensor4::zeros(value.dims()));
            for idx in pick(value.len(), self.max_coords, &mut rng) {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[idx] += self.eps;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[idx] -= self.eps;
                let numeric = (evaluate(f, &plus, inputs, train)? - evaluate(f, &minus, inputs, train)?) / (2.0 * self.eps);
                record(&mut report, format!("{}[{idx}]", store.entry(id).name), grad.data()[idx] * scale, numeric);
            }
        }
        Ok(report)
    }
}

fn pick(len: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks an op-level objective with no parameters.
pub fn finite_diff_check(
    inputs: &[Tensor4<f64>],
    eps: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> GradCheckReport {
    GradCheck::with_eps(eps).run("op", &ParamStore::new(), inputs, true, |ctx: &mut Ctx<'_, f64>, v: &[Var]| f(ctx.graph, v))
}

/// Which part of the stack a suite covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Network,
}

impl std::str::FromStr for Scope {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "network" => Ok(Scope::Network),
            _ => Err(crate::Error::invalid(format!("unknown scope {s:?} (ops, blocks, network)"))),
        }
    }
}

/// Random tensor with entries in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Random tensor whose entries have magnitude in `[lo, hi)` and random sign,
/// keeping clear of ReLU's kink.
pub fn away_from_zero(rng: &mut impl Rng, dims: [usize; 4], lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Offsets with fractional parts in `[0.15, 0.85]`, away from the kernel's
/// kinks at integer distances.
pub fn fractional_offsets(rng: &mut impl Rng, dims: [usize; 4], range: i32) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-range..range) as f64 + rng.gen_range(0.15..0.85))
}

fn random_labels(rng: &mut impl Rng, n: usize, h: usize, w: usize, classes: usize) -> LabelMap {
    let data = (0..n * h * w)
        .map(|_| {
            if rng.gen_bool(0.1) {
                IGNORE
            } else {
                rng.gen_range(0..classes) as u8
            }
        })
        .collect();
    LabelMap::new(n, h, w, data).expect("extent matches")
}

/// Reduces any output to a scalar with fixed random weights, so that every
/// output element carries a distinct, order-one sensitivity.
fn project(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = uniform(&mut rng, ctx.value(y).dims(), -1.0, 1.0);
    ctx.graph.dot(y, w)
}

/// Sets every offset-head output layer to small random values so sampling
/// positions are fractional.
fn randomize(store: &mut ParamStore<f64>, conv: &Conv, rng: &mut impl Rng, scale: f64) {
    for v in store.get_mut(conv.weight).data_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    if let Some(b) = conv.bias {
        for v in store.get_mut(b).data_mut() {
            *v = rng.gen_range(-0.45..0.45) + 0.5;
        }
    }
}

/// Runs every check in `scope`. `corrupt` names a check whose analytic
/// gradients are deliberately scaled, to exercise failure reporting.
pub fn run_suite(scope: Scope, corrupt: Option<&str>) -> Vec<GradCheckReport> {
    let checks = match scope {
        Scope::Ops => op_checks(),
        Scope::Blocks => block_checks(),
        Scope::Network => network_checks(),
    };
    checks
        .into_iter()
        .map(|c| {
            let mut settings = c.settings.clone();
            settings.corrupt = corrupt == Some(c.name);
            (c.run)(&settings)
        })
        .collect()
}

/// A named check in a suite.
pub struct Check {
    pub name: &'static str,
    pub settings: GradCheck,
    pub run: Box<dyn Fn(&GradCheck) -> GradCheckReport>,
}

fn check(name: &'static str, settings: GradCheck, run: impl Fn(&GradCheck) -> GradCheckReport + 'static) -> Check {
    Check {
        name,
        settings,
        run: Box::new(run),
    }
}

/// Names of the checks in a scope, in run order.
pub fn suite_names(scope: Scope) -> Vec<&'static str> {
    match scope {
        Scope::Ops => op_checks(),
        Scope::Blocks => block_checks(),
        Scope::Network => network_checks(),
    }
    .into_iter()
    .map(|c| c.name)
    .collect()
}

fn op_checks() -> Vec<Check> {
    let s = GradCheck::default();
    let mut out = Vec::new();

    out.push(check("conv2d", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, [2, 3, 6, 5], -1.0, 1.0);
        let w = uniform(&mut rng, [4, 3, 3, 3], -0.5, 0.5);
        let b = uniform(&mut rng, [1, 1, 1, 4], -0.5, 0.5);
        gc.run("conv2d", &ParamStore::new(), &[x, w, b], true, |ctx, v| {
            let y = ctx.graph.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(3, 1, 1))?;
            project(ctx, y, 1)
        })
    }));
    out.push(check("conv2d_stride2", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&mut rng, [1, 2, 7, 8], -1.0, 1.0);
        let w = uniform(&mut rng, [3, 2, 3, 3], -0.5, 0.5);
        gc.run("conv2d_stride2", &ParamStore::new(), &[x, w], true, |ctx, v| {
            let y = ctx.graph.conv2d(v[0], v[1], None, ConvGeom::new(3, 2, 1))?;
            project(ctx, y, 2)
        })
    }));
    out.push(check("conv2d_transpose", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, [2, 3, 4, 3], -1.0, 1.0);
        let w = uniform(&mut rng, [3, 2, 4, 4], -0.5, 0.5);
        let b = uniform(&mut rng, [1, 1, 1, 2], -0.5, 0.5);
        gc.run("conv2d_transpose", &ParamStore::new(), &[x, w, b], true, |ctx, v| {
            let y = ctx.graph.conv2d_transpose(v[0], v[1], Some(v[2]), ConvGeom::new(4, 2, 1))?;
            project(ctx, y, 3)
        })
    }));
    out.push(check("batchnorm_train", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&mut rng, [2, 3, 3, 4], -2.0, 2.0);
        let g = uniform(&mut rng, [1, 1, 1, 3], 0.5, 1.5);
        let b = uniform(&mut rng, [1, 1, 1, 3], -0.5, 0.5);
        gc.run("batchnorm_train", &ParamStore::new(), &[x, g, b], true, |ctx, v| {
            let (y, _) = ctx.graph.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(ctx, y, 4)
        })
    }));
    out.push(check("batchnorm_eval", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform(&mut rng, [2, 3, 3, 4], -2.0, 2.0);
        let g = uniform(&mut rng, [1, 1, 1, 3], 0.5, 1.5);
        let b = uniform(&mut rng, [1, 1, 1, 3], -0.5, 0.5);
        gc.run("batchnorm_eval", &ParamStore::new(), &[x, g, b], false, |ctx, v| {
            let y = ctx.graph.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
            project(ctx, y, 5)
        })
    }));
    out.push(check("relu", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = away_from_zero(&mut rng, [1, 2, 4, 4], 0.05, 1.0);
        gc.run("relu", &ParamStore::new(), &[x], true, |ctx, v| {
            let y = ctx.graph.relu(v[0])?;
            project(ctx, y, 6)
        })
    }));
    out.push(check("add_scale_concat_channels", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = uniform(&mut rng, [2, 2, 3, 3], -1.0, 1.0);
        let b = uniform(&mut rng, [2, 2, 3, 3], -1.0, 1.0);
        let c = uniform(&mut rng, [2, 1, 3, 3], -1.0, 1.0);
        gc.run("add_scale_concat_channels", &ParamStore::new(), &[a, b, c], true, |ctx, v| {
            let s = ctx.graph.add(v[0], v[1])?;
            let s = ctx.graph.scale(s, 0.7)?;
            let cat = ctx.graph.concat_channels(&[s, v[2], v[0]])?;
            let part = ctx.graph.channels(cat, 1, 4)?;
            project(ctx, part, 7)
        })
    }));
    out.push(check("avg_pool_to_bins", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = uniform(&mut rng, [2, 2, 7, 6], -1.0, 1.0);
        gc.run("avg_pool_to_bins", &ParamStore::new(), &[x], true, |ctx, v| {
            let y = ctx.graph.avg_pool_to_bins(v[0], 3)?;
            project(ctx, y, 8)
        })
    }));
    out.push(check("bilinear_resize", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(&mut rng, [1, 2, 3, 5], -1.0, 1.0);
        gc.run("bilinear_resize", &ParamStore::new(), &[x], true, |ctx, v| {
            let up = ctx.graph.bilinear_resize(v[0], 7, 9)?;
            let down = ctx.graph.bilinear_resize(up, 4, 3)?;
            let a = project(ctx, up, 9)?;
            let b = project(ctx, down, 10)?;
            ctx.graph.add(a, b)
        })
    }));
    out.push(check("align_sample", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = uniform(&mut rng, [2, 3, 5, 6], -1.0, 1.0);
        let d = fractional_offsets(&mut rng, [2, 2, 5, 6], 2);
        gc.run("align_sample", &ParamStore::new(), &[f, d], true, |ctx, v| {
            let y = ctx.graph.align_sample(v[0], v[1])?;
            project(ctx, y, 11)
        })
    }));
    out.push(check("crop", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = uniform(&mut rng, [1, 2, 5, 6], -1.0, 1.0);
        gc.run("crop", &ParamStore::new(), &[x], true, |ctx, v| {
            let y = ctx.graph.crop(v[0], 3, 4)?;
            project(ctx, y, 12)
        })
    }));
    out.push(check("softmax_cross_entropy", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = uniform(&mut rng, [2, 4, 3, 3], -2.0, 2.0);
        let labels = random_labels(&mut rng, 2, 3, 3, 4);
        let weights = [0.5, 1.0, 2.0, 1.5];
        gc.run("softmax_cross_entropy", &ParamStore::new(), &[x], true, move |ctx, v| {
            Ok(nn::softmax_cross_entropy(ctx.graph, v[0], &labels, Some(&weights))?.loss)
        })
    }));
    out.push(check("class_balanced_ce", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = uniform(&mut rng, [1, 3, 4, 4], -2.0, 2.0);
        let labels = random_labels(&mut rng, 1, 4, 4, 3);
        gc.run("class_balanced_ce", &ParamStore::new(), &[x], true, move |ctx, v| {
            Ok(nn::class_balanced_ce(ctx.graph, v[0], &labels, &[0.7, 0.2, 0.1])?.loss)
        })
    }));
    out.push(check("ohem_ce", s, |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = uniform(&mut rng, [1, 3, 4, 4], -2.0, 2.0);
        let labels = random_labels(&mut rng, 1, 4, 4, 3);
        gc.run("ohem_ce", &ParamStore::new(), &[x], true, move |ctx, v| {
            Ok(nn::ohem_ce(ctx.graph, v[0], &labels, 0.7, 1.0 / 16.0)?.loss)
        })
    }));
    out
}

fn block_checks() -> Vec<Check> {
    // Smaller steps keep perturbations of shared parameters from pushing
    // ReLU inputs or sampling positions across a kink.
    let s = GradCheck {
        eps: 1e-5,
        max_coords: 6,
        ..GradCheck::default()
    };
    let mut out = Vec::new();
    out.push(check("rcb", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let rcb = Rcb::new(&mut store, &mut rng, "rcb", 8, 6, 4).expect("build");
        let x = uniform(&mut rng, [1, 8, 8, 8], -1.0, 1.0);
        gc.run("rcb", &store, &[x], true, move |ctx, v| {
            let y = rcb.forward(ctx, v[0])?;
            project(ctx, y, 21)
        })
    }));
    for mode in Aggregation::ALL {
        let name: &'static str = match mode {
            Aggregation::Rgs => "alignfa[rgs]",
            Aggregation::Deconv => "alignfa[deconv]",
            Aggregation::AlignFa => "alignfa[alignfa]",
            Aggregation::AlignFaLowOnly => "alignfa[alignfa_low_only]",
        };
        out.push(check(name, s.clone(), move |gc| {
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let mut store = ParamStore::new();
            let block = AlignFa::new(&mut store, &mut rng, "agg", mode, 4, 2, 6).expect("build");
            if let Some(h) = &block.head {
                randomize(&mut store, &h.conv_b, &mut rng, 0.05);
            }
            let a = uniform(&mut rng, [1, 4, 8, 8], -1.0, 1.0);
            let f = uniform(&mut rng, [1, 4, 4, 4], -1.0, 1.0);
            gc.run(name, &store, &[a, f], true, move |ctx, v| {
                let (y, _) = block.forward(ctx, v[0], v[1])?;
                project(ctx, y, 22)
            })
        }));
    }
    out.push(check("aligncm", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let block = AlignCm::new(&mut store, &mut rng, "cm", 6, 2, 3, 5, true).expect("build");
        randomize(&mut store, &block.head.as_ref().expect("head").conv_b, &mut rng, 0.05);
        let x = uniform(&mut rng, [2, 6, 6, 6], -1.0, 1.0);
        gc.run("aligncm", &store, &[x], true, move |ctx, v| {
            let (y, _) = block.forward(ctx, v[0], true)?;
            project(ctx, y, 23)
        })
    }));
    out.push(check("seg_head+ce", s.clone(), |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::new();
        let head = SegHead::new(&mut store, &mut rng, "head", 4, 6, 3).expect("build");
        for v in store.get_mut(head.classifier.weight).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = uniform(&mut rng, [1, 4, 4, 4], -1.0, 1.0);
        let labels = random_labels(&mut rng, 1, 16, 16, 3);
        gc.run("seg_head+ce", &store, &[x], true, move |ctx, v| {
            let y = head.forward(ctx, v[0], 16, 16)?;
            Ok(nn::softmax_cross_entropy(ctx.graph, y, &labels, None)?.loss)
        })
    }));
    out.push(check("conv_layers", s, |gc| {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut store = ParamStore::new();
        let a = ConvBn::new(&mut store, &mut rng, "a", 3, 4, conv3x3(2), true).expect("build");
        let b = Conv::new(&mut store, &mut rng, "b", 4, 4, conv1x1(), true).expect("build");
        let t = ConvTranspose::new(&mut store, &mut rng, "t", 4, 2, ConvGeom::new(4, 2, 1)).expect("build");
        let x = uniform(&mut rng, [2, 3, 8, 8], -1.0, 1.0);
        gc.run("conv_layers", &store, &[x], true, move |ctx, v| {
            let y = a.forward(ctx, v[0])?;
            let y = b.forward(ctx, y)?;
            let y = t.forward(ctx, y)?;
            project(ctx, y, 25)
        })
    }));
    out
}

/// Tiny network configuration used by the network-scope check.
pub fn tiny_network_config(aggregation: Aggregation, context: ContextMode) -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        stem_channels: 4,
        block_channels: [4, 6, 8, 10],
        pathway_width: 4,
        rcb_inner: 2,
        offset_head_width: 4,
        head_width: 6,
        aggregation,
        context,
        bin_size: 1,
        deep_supervision: true,
    }
}

fn network_checks() -> Vec<Check> {
    let s = GradCheck {
        eps: 1e-5,
        max_coords: 2,
        ..GradCheck::default()
    };
    vec![check("network", s, |gc| {
        let cfg = tiny_network_config(Aggregation::AlignFa, ContextMode::AlignCm);
        let mut net = match Network::<f64>::build(&cfg, 7) {
            Ok(n) => n,
            Err(e) => {
                return GradCheckReport {
                    name: "network".into(),
                    max_rel_error: f64::INFINITY,
                    coords_checked: 0,
                    worst: None,
                    failure: Some(e.to_string()),
                }
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (_, conv) in net.offset_head_outputs() {
            randomize(&mut net.store, &conv, &mut rng, 0.05);
        }
        for (name, id) in net.enumerate_params() {
            // Single-pixel batchnorm outputs equal beta, so beta must sit
            // away from the ReLU kink at zero.
            if name.ends_with("classifier.weight") {
                for v in net.store.get_mut(id).data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            } else if name.ends_with("bn.beta") {
                for v in net.store.get_mut(id).data_mut() {
                    *v = rng.gen_range(0.05..0.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                }
            } else if name.ends_with("bn.gamma") {
                for v in net.store.get_mut(id).data_mut() {
                    *v = rng.gen_range(0.8..1.2);
                }
            }
        }
        let image = uniform(&mut rng, [1, 3, 32, 32], 0.0, 1.0);
        let labels = random_labels(&mut rng, 1, 32, 32, 3);
        let store = net.store.clone();
        gc.run("network", &store, &[], true, move |ctx, _| {
            let mut local = net.clone();
            local.store = ctx.store.clone();
            let out = local.forward(ctx.graph, &image, true)?;
            let main = nn::softmax_cross_entropy(ctx.graph, out.logits, &labels, None)?.loss;
            let aux = nn::softmax_cross_entropy(ctx.graph, out.aux_logits.expect("aux head"), &labels, None)?.loss;
            let aux = ctx.graph.scale(aux, 0.4)?;
            ctx.graph.add(main, aux)
        })
    })]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = uniform(&mut rng, [1, 2, 3, 3], -1.0, 1.0);
        let r = finite_diff_check(&[x], DEFAULT_EPS, |g, v| {
            let y = g.scale(v[0], 3.0)?;
            g.sum(y)
        });
        assert!(r.max_rel_error < 1e-6, "{r}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let reports = run_suite(Scope::Ops, Some("relu"));
        let bad: Vec<_> = reports.iter().filter(|r| !r.passed(DEFAULT_TOLERANCE)).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].name, "relu");
    }
}
