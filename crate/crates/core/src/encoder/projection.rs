//! Projection head g(.): affine, norm, ReLU, affine, L2 normalization.

use super::params::ModelParams;
use super::{EncoderError, Model, ProjNorm, BN_EPS};
use crate::tensor::{
    add_row_bias, col_sum_acc, layer_norm, layer_norm_backward, matmul, matmul_a_bt_acc, matmul_at_b_acc, Real,
};

/// Below this the L2 norm is clamped.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormMode {
    BatchTrain,
    BatchEval,
    Layer,
}

pub struct ProjCache<F> {
    n: usize,
    mode: NormMode,
    cls: Vec<F>,
    xhat: Vec<F>,
    /// Per column for batch norm, per row for layer norm.
    rstd: Vec<F>,
    relu_in: Vec<F>,
    act: Vec<F>,
    u: Vec<F>,
    norms: Vec<F>,
    pub batch_mean: Vec<F>,
    pub batch_var: Vec<F>,
}

/// Maps CLS rows (n x d_model) to unit vectors (n x proj_dim). `train`
/// selects batch statistics for batch norm.
pub fn project<F: Real>(model: &Model<F>, cls: &[F], n: usize, train: bool) -> Result<(Vec<F>, ProjCache<F>), EncoderError> {
    let cfg = &model.config;
    let (d, p) = (cfg.d_model, cfg.proj_dim);
    let pp = &model.params.proj;
    let mode = match (cfg.proj_norm, train) {
        (ProjNorm::Layer, _) => NormMode::Layer,
        (ProjNorm::Batch, true) => NormMode::BatchTrain,
        (ProjNorm::Batch, false) => NormMode::BatchEval,
    };
    if mode == NormMode::BatchTrain && n < 2 {
        return Err(EncoderError::BatchTooSmall(n));
    }
    let mut h = matmul(cls, &pp.w1.data, n, d, p);
    add_row_bias(&mut h, &pp.b1.data);

    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    let (normed, xhat, rstd) = match mode {
        NormMode::Layer => layer_norm(&h, &pp.norm_g.data, &pp.norm_b.data),
        NormMode::BatchTrain | NormMode::BatchEval => {
            let (mean, var) = if mode == NormMode::BatchTrain {
                let nf = F::c(n as f64);
                let mut mean = vec![F::zero(); p];
                col_sum_acc(&h, &mut mean);
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![F::zero(); p];
                for r in 0..n {
                    for j in 0..p {
                        let c = h[r * p + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nf);
                batch_mean = mean.clone();
                batch_var = var.clone();
                (mean, var)
            } else {
                (model.running_mean.clone(), model.running_var.clone())
            };
            let rstd: Vec<F> = var.iter().map(|v| F::one() / (*v + F::c(BN_EPS)).sqrt()).collect();
            let mut xhat = vec![F::zero(); n * p];
            let mut y = vec![F::zero(); n * p];
            for r in 0..n {
                for j in 0..p {
                    let v = (h[r * p + j] - mean[j]) * rstd[j];
                    xhat[r * p + j] = v;
                    y[r * p + j] = v * pp.norm_g.data[j] + pp.norm_b.data[j];
                }
            }
            (y, xhat, rstd)
        }
    };
    let act: Vec<F> = normed.iter().map(|v| v.max(F::zero())).collect();
    let mut u = matmul(&act, &pp.w2.data, n, p, p);
    add_row_bias(&mut u, &pp.b2.data);
    let mut z = u.clone();
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let row = &mut z[r * p..(r + 1) * p];
        let nrm = row.iter().fold(F::zero(), |s, v| s + *v * *v).sqrt().max(F::c(NORM_FLOOR));
        row.iter_mut().for_each(|v| *v /= nrm);
        norms.push(nrm);
    }
    let cache = ProjCache {
        n,
        mode,
        cls: cls.to_vec(),
        xhat,
        rstd,
        relu_in: normed,
        act,
        u,
        norms,
        batch_mean,
        batch_var,
    };
    Ok((z, cache))
}

/// Backward of [`project`]. Accumulates projection grads and returns dCLS.
pub fn project_backward<F: Real>(model: &Model<F>, cache: &ProjCache<F>, dz: &[F], grads: &mut ModelParams<F>) -> Vec<F> {
    let cfg = &model.config;
    let (d, p, n) = (cfg.d_model, cfg.proj_dim, cache.n);
    let pp = &model.params.proj;
    let gp = &mut grads.proj;

    // L2 normalization: du = (dz - z (z . dz)) / |u|.
    let mut du = vec![F::zero(); n * p];
    for r in 0..n {
        let nrm = cache.norms[r];
        let ur = &cache.u[r * p..(r + 1) * p];
        let dzr = &dz[r * p..(r + 1) * p];
        if nrm <= F::c(NORM_FLOOR) {
            // Clamped branch: z = u / floor, linear in u.
            for j in 0..p {
                du[r * p + j] = dzr[j] / nrm;
            }
            continue;
        }
        let zdz = (0..p).fold(F::zero(), |s, j| s + ur[j] * dzr[j]) / nrm;
        for j in 0..p {
            du[r * p + j] = (dzr[j] - ur[j] / nrm * zdz) / nrm;
        }
    }
    matmul_at_b_acc(&cache.act, &du, &mut gp.w2.data, n, p, p);
    col_sum_acc(&du, &mut gp.b2.data);
    let mut dact = vec![F::zero(); n * p];
    matmul_a_bt_acc(&du, &pp.w2.data, &mut dact, n, p, p);
    for (g, x) in dact.iter_mut().zip(&cache.relu_in) {
        if *x <= F::zero() {
            *g = F::zero();
        }
    }

    let mut dh = vec![F::zero(); n * p];
    match cache.mode {
        NormMode::Layer => {
            layer_norm_backward(&dact, &cache.xhat, &cache.rstd, &pp.norm_g.data, &mut gp.norm_g.data, &mut gp.norm_b.data, &mut dh)
        }
        NormMode::BatchEval | NormMode::BatchTrain => {
            let mut dxhat = vec![F::zero(); n * p];
            for r in 0..n {
                for j in 0..p {
                    let g = dact[r * p + j];
                    gp.norm_g.data[j] += g * cache.xhat[r * p + j];
                    gp.norm_b.data[j] += g;
                    dxhat[r * p + j] = g * pp.norm_g.data[j];
                }
            }
            if cache.mode == NormMode::BatchEval {
                for r in 0..n {
                    for j in 0..p {
                        dh[r * p + j] = dxhat[r * p + j] * cache.rstd[j];
                    }
                }
            } else {
                let nf = F::c(n as f64);
                for j in 0..p {
                    let mut s = F::zero();
                    let mut sx = F::zero();
                    for r in 0..n {
                        s += dxhat[r * p + j];
                        sx += dxhat[r * p + j] * cache.xhat[r * p + j];
                    }
                    for r in 0..n {
                        let i = r * p + j;
                        dh[i] = cache.rstd[j] / nf * (nf * dxhat[i] - s - cache.xhat[i] * sx);
                    }
                }
            }
        }
    }
    matmul_at_b_acc(&cache.cls, &dh, &mut gp.w1.data, n, d, p);
    col_sum_acc(&dh, &mut gp.b1.data);
    let mut dcls = vec![F::zero(); n * d];
    matmul_a_bt_acc(&dh, &pp.w1.data, &mut dcls, n, p, d);
    dcls
}
