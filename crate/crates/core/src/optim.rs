//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor4};

/// `v <- momentum v + grad + weight_decay param; param <- param - lr v`.
pub fn sgd_update<T: Real>(
    param: &mut Tensor4<T>,
    grad: &Tensor4<T>,
    velocity: &mut Tensor4<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.dims() != grad.dims() || param.dims() != velocity.dims() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.dims(),
                grad.dims(),
                velocity.dims()
            ),
        ));
    }
    let (lr, mo, wd) = (lit::<T>(lr), lit::<T>(momentum), lit::<T>(weight_decay));
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mo * *v + *g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum state for every trainable entry of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(ParamId, Tensor4<T>)>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .trainable_ids()
            .map(|id| (id, Tensor4::zeros(store.get(id).dims())))
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocities(&self) -> &[(ParamId, Tensor4<T>)] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor4<T>) -> Result<()> {
        let slot = self
            .velocity
            .iter_mut()
            .find(|(pid, _)| *pid == id)
            .ok_or_else(|| Error::invalid(format!("no velocity slot for parameter {}", id.0)))?;
        if slot.1.dims() != v.dims() {
            return Err(Error::shape("sgd_step", "velocity shape mismatch"));
        }
        slot.1 = v;
        Ok(())
    }

    /// Applies one update to every trainable parameter. Parameters without
    /// an entry in `grads` are updated with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor4<T>)], lr: f64) -> Result<()> {
        for (id, vel) in &mut self.velocity {
            let param = store.get_mut(*id);
            match grads.iter().find(|(g, _)| g == id) {
                Some((_, g)) => sgd_update(param, g, vel, lr, self.momentum, self.weight_decay)?,
                None => {
                    let zero = Tensor4::zeros(param.dims());
                    sgd_update(param, &zero, vel, lr, self.momentum, self.weight_decay)?
                }
            }
        }
        Ok(())
    }
}
