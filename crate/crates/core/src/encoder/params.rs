use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::labels::{Observation, N_OBSERVATIONS};
use crate::tensor::Real;

/// Dense parameter tensor (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| F::c(dist.sample(rng)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::c(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// Projection head g(.): affine, normalization, ReLU, affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub norm_g: Tensor<F>,
    pub norm_b: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

/// Which parameters an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Projection,
    Heads,
}

/// Class-logit offsets of each observation head inside the concatenated
/// head matrix: 13 heads of 4 classes, then No Finding with 2.
pub fn head_offsets() -> [(usize, usize); N_OBSERVATIONS] {
    let mut out = [(0, 0); N_OBSERVATIONS];
    let mut at = 0;
    for (i, obs) in Observation::ALL.iter().enumerate() {
        let n = obs.classes().len();
        out[i] = (at, n);
        at += n;
    }
    out
}

pub const N_HEAD_LOGITS: usize = 13 * 4 + 2;

/// All trainable tensors. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
    pub proj: ProjectionParams<F>,
    /// d_model x 54 concatenated classification heads.
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let lin = |fan_in: usize, fan_out: usize, rng: &mut R| {
            Tensor::normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let mut wo = lin(d, d, rng);
                wo.data.iter_mut().for_each(|v| *v = *v * F::c(resid));
                let w1 = lin(d, cfg.d_ff, rng);
                let mut w2 = lin(cfg.d_ff, d, rng);
                w2.data.iter_mut().for_each(|v| *v = *v * F::c(resid));
                LayerParams {
                    ln1_g: Tensor::filled(&[d], F::one()),
                    ln1_b: Tensor::zeros(&[d]),
                    wq: lin(d, d, rng),
                    bq: Tensor::zeros(&[d]),
                    wk: lin(d, d, rng),
                    bk: Tensor::zeros(&[d]),
                    wv: lin(d, d, rng),
                    bv: Tensor::zeros(&[d]),
                    wo,
                    bo: Tensor::zeros(&[d]),
                    ln2_g: Tensor::filled(&[d], F::one()),
                    ln2_b: Tensor::zeros(&[d]),
                    w1,
                    b1: Tensor::zeros(&[cfg.d_ff]),
                    w2,
                    b2: Tensor::zeros(&[d]),
                }
            })
            .collect();
        let p = cfg.proj_dim;
        Self {
            tok_emb: Tensor::normal(&[cfg.vocab_size, d], cfg.emb_std, rng),
            pos_emb: Tensor::normal(&[cfg.max_seq_len, d], cfg.emb_std, rng),
            layers,
            lnf_g: Tensor::filled(&[d], F::one()),
            lnf_b: Tensor::zeros(&[d]),
            proj: ProjectionParams {
                w1: lin(d, p, rng),
                b1: Tensor::zeros(&[p]),
                norm_g: Tensor::filled(&[p], F::one()),
                norm_b: Tensor::zeros(&[p]),
                w2: lin(p, p, rng),
                b2: Tensor::zeros(&[p]),
            },
            head_w: Tensor::zeros(&[d, N_HEAD_LOGITS]),
            head_b: Tensor::zeros(&[N_HEAD_LOGITS]),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, t) in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = F::zero());
        }
        out
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let c = |t: &Tensor<F>| t.cast::<G>();
        ModelParams {
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: c(&l.ln1_g),
                    ln1_b: c(&l.ln1_b),
                    wq: c(&l.wq),
                    bq: c(&l.bq),
                    wk: c(&l.wk),
                    bk: c(&l.bk),
                    wv: c(&l.wv),
                    bv: c(&l.bv),
                    wo: c(&l.wo),
                    bo: c(&l.bo),
                    ln2_g: c(&l.ln2_g),
                    ln2_b: c(&l.ln2_b),
                    w1: c(&l.w1),
                    b1: c(&l.b1),
                    w2: c(&l.w2),
                    b2: c(&l.b2),
                })
                .collect(),
            lnf_g: c(&self.lnf_g),
            lnf_b: c(&self.lnf_b),
            proj: ProjectionParams {
                w1: c(&self.proj.w1),
                b1: c(&self.proj.b1),
                norm_g: c(&self.proj.norm_g),
                norm_b: c(&self.proj.norm_b),
                w2: c(&self.proj.w2),
                b2: c(&self.proj.b2),
            },
            head_w: c(&self.head_w),
            head_b: c(&self.head_b),
        }
    }

    /// Every tensor with its stable name and group, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, &Tensor<F>)> {
        use ParamGroup::*;
        let mut out = vec![
            ("tok_emb".to_string(), Encoder, &self.tok_emb),
            ("pos_emb".to_string(), Encoder, &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_tensors(l).map(|(n, t)| (format!("layers.{i}.{n}"), Encoder, t)));
        }
        let p = &self.proj;
        out.extend([
            ("lnf_g".to_string(), Encoder, &self.lnf_g),
            ("lnf_b".to_string(), Encoder, &self.lnf_b),
            ("proj.w1".to_string(), Projection, &p.w1),
            ("proj.b1".to_string(), Projection, &p.b1),
            ("proj.norm_g".to_string(), Projection, &p.norm_g),
            ("proj.norm_b".to_string(), Projection, &p.norm_b),
            ("proj.w2".to_string(), Projection, &p.w2),
            ("proj.b2".to_string(), Projection, &p.b2),
            ("head_w".to_string(), Heads, &self.head_w),
            ("head_b".to_string(), Heads, &self.head_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor<F>)> {
        use ParamGroup::*;
        let mut out = vec![
            ("tok_emb".to_string(), Encoder, &mut self.tok_emb),
            ("pos_emb".to_string(), Encoder, &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_tensors_mut(l).map(|(n, t)| (format!("layers.{i}.{n}"), Encoder, t)));
        }
        let p = &mut self.proj;
        out.extend([
            ("lnf_g".to_string(), Encoder, &mut self.lnf_g),
            ("lnf_b".to_string(), Encoder, &mut self.lnf_b),
            ("proj.w1".to_string(), Projection, &mut p.w1),
            ("proj.b1".to_string(), Projection, &mut p.b1),
            ("proj.norm_g".to_string(), Projection, &mut p.norm_g),
            ("proj.norm_b".to_string(), Projection, &mut p.norm_b),
            ("proj.w2".to_string(), Projection, &mut p.w2),
            ("proj.b2".to_string(), Projection, &mut p.b2),
            ("head_w".to_string(), Heads, &mut self.head_w),
            ("head_b".to_string(), Heads, &mut self.head_b),
        ]);
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        for ((_, _, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.data.iter_mut().zip(&s.data) {
                *a += *b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }
}

fn layer_tensors<F>(l: &LayerParams<F>) -> [(&'static str, &Tensor<F>); 16] {
    [
        ("ln1_g", &l.ln1_g),
        ("ln1_b", &l.ln1_b),
        ("wq", &l.wq),
        ("bq", &l.bq),
        ("wk", &l.wk),
        ("bk", &l.bk),
        ("wv", &l.wv),
        ("bv", &l.bv),
        ("wo", &l.wo),
        ("bo", &l.bo),
        ("ln2_g", &l.ln2_g),
        ("ln2_b", &l.ln2_b),
        ("w1", &l.w1),
        ("b1", &l.b1),
        ("w2", &l.w2),
        ("b2", &l.b2),
    ]
}

fn layer_tensors_mut<F>(l: &mut LayerParams<F>) -> [(&'static str, &mut Tensor<F>); 16] {
    [
        ("ln1_g", &mut l.ln1_g),
        ("ln1_b", &mut l.ln1_b),
        ("wq", &mut l.wq),
        ("bq", &mut l.bq),
        ("wk", &mut l.wk),
        ("bk", &mut l.bk),
        ("wv", &mut l.wv),
        ("bv", &mut l.bv),
        ("wo", &mut l.wo),
        ("bo", &mut l.bo),
        ("ln2_g", &mut l.ln2_g),
        ("ln2_b", &mut l.ln2_b),
        ("w1", &mut l.w1),
        ("b1", &mut l.b1),
        ("w2", &mut l.w2),
        ("b2", &mut l.b2),
    ]
}
