//! Adam with coupled L2 weight decay, and the polynomial learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::Result;

#[derive(Debug)]
pub struct Adam {
    pub vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step_count: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay · θ` before the moment updates.
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, weight_decay: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Adam {
            vars,
            m,
            v,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    /// One update at learning rate `lr`. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients can carry their own graph; keeping them in the
            // moments would chain every step's graph to the next
            let g = g.detach();
            let theta = var.as_tensor().detach();
            let g = if self.weight_decay != 0.0 {
                (g + (&theta * self.weight_decay)?)?
            } else {
                g
            };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// `base · (1 − iter/max_iter)^power`, zero at and past the end.
pub fn poly_lr(base: f64, iteration: usize, max_iterations: usize, power: f64) -> f64 {
    if max_iterations == 0 || iteration >= max_iterations {
        return 0.0;
    }
    base * (1.0 - iteration as f64 / max_iterations as f64).powf(power)
}
