//! Parameterised layers: convolution, transposed convolution, batchnorm.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::ops::conv::ConvGeom;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor4};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape, the parameters, and the mode.
pub struct Ctx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub train: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, train: bool) -> Self {
        Self { graph, store, train }
    }

    /// Puts a parameter on the tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.graph.param(id, self.store.get(id).clone())
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        self.graph.value(v)
    }
}

/// Joins a dotted parameter path.
pub fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Result<Self> {
        let k = geom.kernel;
        let weight = store.add_he(path(name, "weight"), [c_out, c_in, k, k], rng)?;
        let bias = if bias {
            Some(store.add(path(name, "bias"), Tensor4::zeros([1, 1, 1, c_out]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom,
            c_in,
            c_out,
        })
    }

    /// Same as [`Conv::new`] with weight and bias set to exactly zero.
    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        let k = geom.kernel;
        let weight = store.add(path(name, "weight"), Tensor4::zeros([c_out, c_in, k, k]), true)?;
        let bias = Some(store.add(path(name, "bias"), Tensor4::zeros([1, 1, 1, c_out]), true)?);
        Ok(Self {
            weight,
            bias,
            geom,
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = self.bias.map(|b| ctx.param(b)).transpose()?;
        ctx.graph.conv2d(x, w, b, self.geom)
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

/// Transposed convolution, weight `C_in x C_out x k x k`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
    ) -> Result<Self> {
        let k = geom.kernel;
        let weight = store.add_he(path(name, "weight"), [c_in, c_out, k, k], rng)?;
        let bias = store.add(path(name, "bias"), Tensor4::zeros([1, 1, 1, c_out]), true)?;
        Ok(Self { weight, bias, geom })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        ctx.graph.conv2d_transpose(x, w, Some(b), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let dims = [1, 1, 1, c];
        Ok(Self {
            gamma: store.add(path(name, "gamma"), Tensor4::full(dims, T::one()), true)?,
            beta: store.add(path(name, "beta"), Tensor4::zeros(dims), true)?,
            running_mean: store.add(path(name, "running_mean"), Tensor4::zeros(dims), false)?,
            running_var: store.add(path(name, "running_var"), Tensor4::full(dims, T::one()), false)?,
        })
    }

    /// In training mode normalises with batch statistics and folds them into
    /// the running estimates; in eval mode uses the running estimates.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma)?;
        let beta = ctx.param(self.beta)?;
        if ctx.train {
            let (y, stats) = ctx.graph.batchnorm_train(x, gamma, beta, BN_EPS)?;
            let m = lit::<T>(BN_MOMENTUM);
            let keep = T::one() - m;
            for (r, b) in ctx.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in ctx.store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * *b;
            }
            Ok(y)
        } else {
            let rm = ctx.store.get(self.running_mean).data().to_vec();
            let rv = ctx.store.get(self.running_var).data().to_vec();
            ctx.graph.batchnorm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

/// Bias-free convolution, batchnorm, optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        geom: ConvGeom,
        relu: bool,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, rng, &path(name, "conv"), c_in, c_out, geom, false)?,
            bn: BatchNorm::new(store, &path(name, "bn"), c_out)?,
            relu,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if self.relu {
            ctx.graph.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out
    }
}

pub fn conv3x3(stride: usize) -> ConvGeom {
    ConvGeom::new(3, stride, 1)
}

pub fn conv1x1() -> ConvGeom {
    ConvGeom::new(1, 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_has_expected_spread() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv::new(&mut store, &mut rng, "c", 64, 64, conv3x3(1), true).unwrap();
        let w = store.get(conv.weight);
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let want = 2.0 / (64.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
        assert!(store.get(conv.bias.unwrap()).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eval_batchnorm_is_deterministic_and_train_updates_running_stats() {
        let mut store = ParamStore::<f32>::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor4::<f32>::from_fn([2, 2, 3, 3], |n, c, h, w| (n * 18 + c * 9 + h * 3 + w) as f32 * 0.1);
        let run = |store: &mut ParamStore<f32>, train: bool| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, store, train);
            let xv = ctx.graph.input(x.clone()).unwrap();
            let y = bn.forward(&mut ctx, xv).unwrap();
            g.value(y).clone()
        };
        let a = run(&mut store, false);
        let b = run(&mut store, false);
        assert_eq!(a.data(), b.data());
        run(&mut store, true);
        assert!(store.get(bn.running_mean).data()[0] > 0.0);
        assert!(store.get(bn.running_var).data().iter().all(|v| *v > 0.0));
    }
}
