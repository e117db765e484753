//! SGD and Adam over a chosen subset of parameter groups.

use serde::{Deserialize, Serialize};

use super::params::{ModelParams, ParamGroup};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(format!("unknown optimizer {s:?}")),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

pub enum Optimizer<F> {
    Sgd { lr: f64, momentum: f64, velocity: Option<ModelParams<F>> },
    Adam { lr: f64, t: u64, m: ModelParams<F>, v: ModelParams<F> },
}

impl<F: Real> Optimizer<F> {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd { lr, momentum, velocity: None }
    }

    pub fn adam(lr: f64, like: &ModelParams<F>) -> Self {
        Optimizer::Adam { lr, t: 0, m: like.zeros_like(), v: like.zeros_like() }
    }

    pub fn new(kind: OptimizerKind, lr: f64, like: &ModelParams<F>) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr, 0.0),
            OptimizerKind::Adam => Self::adam(lr, like),
        }
    }

    /// Updates every tensor whose group is in `groups`; others are untouched.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, groups: &[ParamGroup]) {
        let g_all = grads.tensors();
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                let lr = F::c(*lr);
                let mu = F::c(*momentum);
                if *momentum > 0.0 && velocity.is_none() {
                    *velocity = Some(params.zeros_like());
                }
                let mut vel = velocity.as_mut().map(|v| v.tensors_mut());
                for (i, (_, group, p)) in params.tensors_mut().into_iter().enumerate() {
                    if !groups.contains(&group) {
                        continue;
                    }
                    let g = &g_all[i].2.data;
                    match vel.as_mut() {
                        Some(vs) => {
                            let v = &mut vs[i].2.data;
                            for ((w, gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                                *vi = mu * *vi + *gi;
                                *w -= lr * *vi;
                            }
                        }
                        None => {
                            for (w, gi) in p.data.iter_mut().zip(g) {
                                *w -= lr * *gi;
                            }
                        }
                    }
                }
            }
            Optimizer::Adam { lr, t, m, v } => {
                *t += 1;
                let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
                let c1 = F::c(1.0 - b1.powi(*t as i32));
                let c2 = F::c(1.0 - b2.powi(*t as i32));
                let (b1, b2, lr, eps) = (F::c(b1), F::c(b2), F::c(*lr), F::c(ADAM_EPS));
                let mut ms = m.tensors_mut();
                let mut vs = v.tensors_mut();
                for (i, (_, group, p)) in params.tensors_mut().into_iter().enumerate() {
                    if !groups.contains(&group) {
                        continue;
                    }
                    let g = &g_all[i].2.data;
                    let mi = &mut ms[i].2.data;
                    let vi = &mut vs[i].2.data;
                    for j in 0..p.data.len() {
                        mi[j] = b1 * mi[j] + (F::one() - b1) * g[j];
                        vi[j] = b2 * vi[j] + (F::one() - b2) * g[j] * g[j];
                        let mh = mi[j] / c1;
                        let vh = vi[j] / c2;
                        p.data[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> ModelParams<f64> {
        let cfg = EncoderConfig { vocab_size: 5, max_seq_len: 4, d_model: 4, n_layers: 1, n_heads: 1, d_ff: 4, proj_dim: 2, ..Default::default() };
        ModelParams::init(&cfg, &mut crate::rng::seeded(0))
    }

    #[test]
    fn sgd_step_is_lr_times_grad() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.head_b.data.iter_mut().for_each(|x| *x = 2.0);
        let mut opt = Optimizer::sgd(0.1, 0.0);
        opt.step(&mut p, &g, &[ParamGroup::Heads]);
        assert!(p.head_b.data.iter().all(|x| (*x + 0.2).abs() < 1e-15));
        assert_eq!(p.tok_emb, before.tok_emb);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias correction makes the first update lr * sign(g).
        let mut p = tiny();
        let mut g = p.zeros_like();
        g.head_b.data[0] = 3.0;
        g.head_b.data[1] = -0.5;
        let mut opt = Optimizer::adam(0.01, &p);
        opt.step(&mut p, &g, &[ParamGroup::Heads]);
        assert!((p.head_b.data[0] + 0.01).abs() < 1e-9);
        assert!((p.head_b.data[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.head_b.data[2], 0.0);
    }

    #[test]
    fn frozen_groups_untouched() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, _, t) in g.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 1.0);
        }
        let mut opt = Optimizer::adam(0.1, &p);
        opt.step(&mut p, &g, &[ParamGroup::Heads]);
        for ((_, grp, a), (_, _, b)) in p.tensors().into_iter().zip(before.tensors()) {
            assert_eq!(grp == ParamGroup::Heads, a != b);
        }
    }

    #[test]
    fn zero_lr_and_zero_grads_leave_params() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, _, t) in g.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.7);
        }
        let all = [ParamGroup::Encoder, ParamGroup::Projection, ParamGroup::Heads];
        Optimizer::sgd(0.0, 0.0).step(&mut p, &g, &all);
        assert_eq!(p, before);
        let mut adam = Optimizer::adam(0.1, &p);
        let zeros = p.zeros_like();
        adam.step(&mut p, &zeros, &all);
        assert_eq!(p, before);
    }
}
