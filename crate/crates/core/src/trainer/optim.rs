use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AxisSel, Element, ParamId, ParamStore, Region};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: beta1(), beta2: beta2(), eps: adam_eps(), weight_decay: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum, weight_decay } => {
                lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps, weight_decay } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

#[inline]
fn sgd_elem<T: Element>(w: &mut T, g: T, vel: &mut T, lr: T, mu: T, wd: T) {
    let g = g + wd * *w;
    *vel = mu * *vel + g;
    *w = *w - lr * *vel;
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn adam_elem<T: Element>(w: &mut T, g: T, m: &mut T, v: &mut T, lr_t: T, b1: T, b2: T, eps: T, wd: T) {
    let g = g + wd * *w;
    *m = b1 * *m + (T::one() - b1) * g;
    *v = b2 * *v + (T::one() - b2) * g * g;
    *w = *w - lr_t * *m / (v.sqrt() + eps);
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::State(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

/// One dense SGD step with momentum and L2 weight decay.
pub fn sgd_momentum_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_len("gradient", grads.len(), params.len())?;
    if state.velocity.is_empty() {
        state.velocity = vec![T::zero(); params.len()];
    }
    check_len("momentum buffer", state.velocity.len(), params.len())?;
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((w, &g), vel) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        sgd_elem(w, g, vel, lr, mu, wd);
    }
    Ok(())
}

/// One dense Adam step with bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check_len("gradient", grads.len(), params.len())?;
    if state.m.is_empty() {
        state.m = vec![T::zero(); params.len()];
        state.v = vec![T::zero(); params.len()];
    }
    check_len("first moment", state.m.len(), params.len())?;
    check_len("second moment", state.v.len(), params.len())?;
    state.t += 1;
    let lr_t = adam_rate(lr, beta1, beta2, state.t);
    let (b1, b2, e, wd) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps), T::from_f64(weight_decay));
    for (i, (w, &g)) in params.iter_mut().zip(grads).enumerate() {
        adam_elem(w, g, &mut state.m[i], &mut state.v[i], lr_t, b1, b2, e, wd);
    }
    Ok(())
}

fn adam_rate<T: Element>(lr: f64, beta1: f64, beta2: f64, t: u64) -> T {
    let t = t as i32;
    T::from_f64(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)))
}

enum Slot<T> {
    Sgd(SgdState<T>),
    Adam(AdamState<T>),
}

/// Optimizer over a [`ParamStore`] that only visits the parameter regions a
/// step touched, then clears their gradients.
///
/// Elements outside every touched region keep their value, their gradient
/// (zero) and their optimizer state.
pub struct Optimizer<T: Element> {
    cfg: OptimizerConfig,
    slots: Vec<Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let slots = store
            .iter()
            .map(|p| {
                let n = p.value.numel();
                match cfg {
                    OptimizerConfig::Sgd { .. } => Slot::Sgd(SgdState { velocity: vec![T::zero(); n] }),
                    OptimizerConfig::Adam { .. } => {
                        Slot::Adam(AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 })
                    }
                }
            })
            .collect();
        Ok(Optimizer { cfg, slots })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, store: &ParamStore<T>, touched: &[(ParamId, Region)]) -> Result<()> {
        if self.slots.len() != store.len() {
            return Err(Error::State(format!("{} optimizer slots for {} parameters", self.slots.len(), store.len())));
        }
        let mut by_param: BTreeMap<ParamId, Vec<&Region>> = BTreeMap::new();
        for (id, r) in touched {
            by_param.entry(*id).or_default().push(r);
        }
        for (id, regions) in by_param {
            let p = store.get(id);
            let offsets = touched_offsets(p.value.shape(), &regions);
            let mut value = p.value.write_guard();
            let mut grad = p.grad.write_guard();
            let (vo, go) = (p.value.offset(), p.grad.offset());
            match (&mut self.slots[id.0], self.cfg) {
                (Slot::Sgd(s), OptimizerConfig::Sgd { lr, momentum, weight_decay }) => {
                    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
                    offsets.visit(|o| {
                        sgd_elem(&mut value[vo + o], grad[go + o], &mut s.velocity[o], lr, mu, wd);
                        grad[go + o] = T::zero();
                    });
                }
                (Slot::Adam(s), OptimizerConfig::Adam { lr, beta1, beta2, eps, weight_decay }) => {
                    s.t += 1;
                    let lr_t = adam_rate(lr, beta1, beta2, s.t);
                    let (b1, b2, e, wd) =
                        (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps), T::from_f64(weight_decay));
                    let AdamState { m, v, .. } = s;
                    offsets.visit(|o| {
                        adam_elem(&mut value[vo + o], grad[go + o], &mut m[o], &mut v[o], lr_t, b1, b2, e, wd);
                        grad[go + o] = T::zero();
                    });
                }
                _ => return Err(Error::State("optimizer slot does not match its configuration".into())),
            }
        }
        Ok(())
    }
}

enum Offsets<'a> {
    All(usize),
    One(&'a Region, Vec<usize>),
    Mask(Vec<bool>),
}

impl Offsets<'_> {
    fn visit(&self, mut f: impl FnMut(usize)) {
        match self {
            Offsets::All(n) => (0..*n).for_each(f),
            Offsets::One(r, shape) => r.for_each_offset(shape, f),
            Offsets::Mask(m) => m.iter().enumerate().filter(|(_, &b)| b).for_each(|(o, _)| f(o)),
        }
    }
}

fn is_full(r: &Region, shape: &[usize]) -> bool {
    r.axes.iter().zip(shape).all(|(a, &d)| matches!(a, AxisSel::Range { start: 0, len } if *len == d))
}

fn touched_offsets<'a>(shape: &[usize], regions: &[&'a Region]) -> Offsets<'a> {
    let n = shape.iter().product();
    if regions.iter().any(|r| is_full(r, shape)) {
        return Offsets::All(n);
    }
    if regions.len() == 1 || regions.windows(2).all(|w| w[0] == w[1]) {
        return Offsets::One(regions[0], shape.to_vec());
    }
    let mut mask = vec![false; n];
    for r in regions {
        r.for_each_offset(shape, |o| mask[o] = true);
    }
    Offsets::Mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = vec![1.5, -2.0];
        let mut s = SgdState::default();
        sgd_momentum_step(&mut w, &[0.0, 0.0], &mut s, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
        let mut a = AdamState::default();
        adam_step(&mut w, &[0.0, 0.0], &mut a, 0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert_eq!(w, vec![1.5, -2.0]);
    }

    #[test]
    fn sgd_one_step() {
        let mut w = vec![1.0f64];
        sgd_momentum_step(&mut w, &[1.0], &mut SgdState::default(), 0.1, 0.9, 0.0).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction; eps shifts the step by ~lr·eps/√v
        let mut w = vec![0.0f64];
        adam_step(&mut w, &[1.0], &mut AdamState::default(), 0.01, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert!((w[0] + 0.01).abs() < 1e-8, "{}", w[0]);
    }

    #[test]
    fn state_mismatch() {
        let mut w = vec![0.0; 3];
        let mut s = SgdState { velocity: vec![0.0; 2] };
        assert!(matches!(sgd_momentum_step(&mut w, &[0.0; 3], &mut s, 0.1, 0.0, 0.0), Err(Error::State(_))));
        assert!(matches!(sgd_momentum_step(&mut w, &[0.0; 2], &mut SgdState::default(), 0.1, 0.0, 0.0), Err(Error::State(_))));
    }
}
