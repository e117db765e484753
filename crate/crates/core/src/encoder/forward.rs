//! Per-sequence transformer pass with a cache for exact backprop.

use rand::Rng;

use super::params::{LayerParams, ModelParams};
use super::{EncoderConfig, PAD_ID};
use crate::rng;
use crate::tensor::{
    add_row_bias, col_sum_acc, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_a_bt_acc,
    matmul_acc, matmul_at_b_acc, softmax_in_place, Real,
};

#[derive(Debug, Clone)]
struct LayerCache<F> {
    rows_out: usize,
    xhat1: Vec<F>,
    rstd1: Vec<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    attn_mask: Option<Vec<F>>,
    xhat2: Vec<F>,
    rstd2: Vec<F>,
    h2: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
    ffn_mask: Option<Vec<F>>,
}

/// Everything backward needs for one encoded sequence.
#[derive(Debug, Clone)]
pub struct SeqCache<F> {
    ids: Vec<u32>,
    positions: Vec<usize>,
    layers: Vec<LayerCache<F>>,
    xhatf: Vec<F>,
    rstdf: Vec<F>,
}

/// Dropout request for one sequence: masks come from `rng::stream(seed, stream)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutSeed {
    pub seed: u64,
    pub stream: u64,
}

fn dropout_mask<F: Real, R: Rng>(len: usize, p: f64, rng: &mut R) -> Vec<F> {
    let keep = F::c(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen_bool(p) { F::zero() } else { keep })
        .collect()
}

fn layer_forward<F: Real, R: Rng>(
    l: &LayerParams<F>,
    cfg: &EncoderConfig,
    x: &[F],
    len: usize,
    rows_out: usize,
    dropout: Option<&mut R>,
) -> (Vec<F>, LayerCache<F>) {
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = F::c(1.0 / (dh as f64).sqrt());

    let (h1, xhat1, rstd1) = layer_norm(x, &l.ln1_g.data, &l.ln1_b.data);
    let mut q = matmul(&h1[..rows_out * d], &l.wq.data, rows_out, d, d);
    add_row_bias(&mut q, &l.bq.data);
    let mut k = matmul(&h1, &l.wk.data, len, d, d);
    add_row_bias(&mut k, &l.bk.data);
    let mut v = matmul(&h1, &l.wv.data, len, d, d);
    add_row_bias(&mut v, &l.bv.data);

    let mut probs = vec![F::zero(); nh * rows_out * len];
    let mut ctx = vec![F::zero(); rows_out * d];
    for h in 0..nh {
        let p = &mut probs[h * rows_out * len..(h + 1) * rows_out * len];
        // scores = q_h k_h^T
        F::gemm_strided(
            rows_out, dh, len, &q[h * dh..], d as isize, 1, &k[h * dh..], 1, d as isize, F::zero(), p, len,
        );
        for row in p.chunks_exact_mut(len) {
            row.iter_mut().for_each(|s| *s = *s * scale);
            softmax_in_place(row);
        }
        // ctx_h = P v_h
        F::gemm_strided(
            rows_out, len, dh, p, len as isize, 1, &v[h * dh..], d as isize, 1, F::zero(), &mut ctx[h * dh..], d,
        );
    }
    let mut a = matmul(&ctx, &l.wo.data, rows_out, d, d);
    add_row_bias(&mut a, &l.bo.data);

    let mut dropout = dropout;
    let attn_mask = dropout.as_deref_mut().map(|r| dropout_mask::<F, R>(a.len(), cfg.dropout_p, r));
    if let Some(m) = &attn_mask {
        a.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
    }
    let mut xmid: Vec<F> = x[..rows_out * d].to_vec();
    xmid.iter_mut().zip(&a).for_each(|(x, a)| *x += *a);

    let (h2, xhat2, rstd2) = layer_norm(&xmid, &l.ln2_g.data, &l.ln2_b.data);
    let mut pre = matmul(&h2, &l.w1.data, rows_out, d, cfg.d_ff);
    add_row_bias(&mut pre, &l.b1.data);
    let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
    let mut f = matmul(&act, &l.w2.data, rows_out, cfg.d_ff, d);
    add_row_bias(&mut f, &l.b2.data);
    let ffn_mask = dropout.map(|r| dropout_mask::<F, R>(f.len(), cfg.dropout_p, r));
    if let Some(m) = &ffn_mask {
        f.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
    }
    let mut out = xmid;
    out.iter_mut().zip(&f).for_each(|(x, f)| *x += *f);

    (
        out,
        LayerCache {
            rows_out,
            xhat1,
            rstd1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            xhat2,
            rstd2,
            h2,
            pre,
            act,
            ffn_mask,
        },
    )
}

/// Returns the gradient w.r.t. the layer input (len x d).
fn layer_backward<F: Real>(
    l: &LayerParams<F>,
    g: &mut LayerParams<F>,
    cfg: &EncoderConfig,
    c: &LayerCache<F>,
    len: usize,
    dout: &[F],
) -> Vec<F> {
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let dff = cfg.d_ff;
    let ro = c.rows_out;
    let scale = F::c(1.0 / (dh as f64).sqrt());

    // feed-forward block
    let mut df = dout.to_vec();
    if let Some(m) = &c.ffn_mask {
        df.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
    }
    matmul_at_b_acc(&c.act, &df, &mut g.w2.data, ro, dff, d);
    col_sum_acc(&df, &mut g.b2.data);
    let mut dact = vec![F::zero(); ro * dff];
    matmul_a_bt_acc(&df, &l.w2.data, &mut dact, ro, d, dff);
    for (da, &p) in dact.iter_mut().zip(&c.pre) {
        *da *= gelu_grad(p);
    }
    matmul_at_b_acc(&c.h2, &dact, &mut g.w1.data, ro, d, dff);
    col_sum_acc(&dact, &mut g.b1.data);
    let mut dh2 = vec![F::zero(); ro * d];
    matmul_a_bt_acc(&dact, &l.w1.data, &mut dh2, ro, dff, d);
    let mut dxmid = dout.to_vec();
    layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, &l.ln2_g.data, &mut g.ln2_g.data, &mut g.ln2_b.data, &mut dxmid);

    // attention block
    let mut da = dxmid.clone();
    if let Some(m) = &c.attn_mask {
        da.iter_mut().zip(m).for_each(|(v, m)| *v *= *m);
    }
    matmul_at_b_acc(&c.ctx, &da, &mut g.wo.data, ro, d, d);
    col_sum_acc(&da, &mut g.bo.data);
    let mut dctx = vec![F::zero(); ro * d];
    matmul_a_bt_acc(&da, &l.wo.data, &mut dctx, ro, d, d);

    let mut dq = vec![F::zero(); ro * d];
    let mut dk = vec![F::zero(); len * d];
    let mut dv = vec![F::zero(); len * d];
    let mut dp = vec![F::zero(); ro * len];
    for h in 0..nh {
        let p = &c.probs[h * ro * len..(h + 1) * ro * len];
        // dP = dctx_h v_h^T
        F::gemm_strided(
            ro, dh, len, &dctx[h * dh..], d as isize, 1, &c.v[h * dh..], 1, d as isize, F::zero(), &mut dp, len,
        );
        // dv_h += P^T dctx_h
        F::gemm_strided(
            len, ro, dh, p, 1, len as isize, &dctx[h * dh..], d as isize, 1, F::one(), &mut dv[h * dh..], d,
        );
        // softmax backward, folded with the score scale
        for (prow, dprow) in p.chunks_exact(len).zip(dp.chunks_exact_mut(len)) {
            let s = prow.iter().zip(dprow.iter()).fold(F::zero(), |s, (p, g)| s + *p * *g);
            for (g, &p) in dprow.iter_mut().zip(prow) {
                *g = p * (*g - s) * scale;
            }
        }
        // dq_h += dS k_h ; dk_h += dS^T q_h
        F::gemm_strided(
            ro, len, dh, &dp, len as isize, 1, &c.k[h * dh..], d as isize, 1, F::one(), &mut dq[h * dh..], d,
        );
        F::gemm_strided(
            len, ro, dh, &dp, 1, len as isize, &c.q[h * dh..], d as isize, 1, F::one(), &mut dk[h * dh..], d,
        );
    }
    matmul_at_b_acc(&c.h1[..ro * d], &dq, &mut g.wq.data, ro, d, d);
    col_sum_acc(&dq, &mut g.bq.data);
    matmul_at_b_acc(&c.h1, &dk, &mut g.wk.data, len, d, d);
    col_sum_acc(&dk, &mut g.bk.data);
    matmul_at_b_acc(&c.h1, &dv, &mut g.wv.data, len, d, d);
    col_sum_acc(&dv, &mut g.bv.data);

    let mut dh1 = vec![F::zero(); len * d];
    matmul_a_bt_acc(&dq, &l.wq.data, &mut dh1[..ro * d], ro, d, d);
    matmul_a_bt_acc(&dk, &l.wk.data, &mut dh1, len, d, d);
    matmul_a_bt_acc(&dv, &l.wv.data, &mut dh1, len, d, d);

    let mut dx = vec![F::zero(); len * d];
    dx[..ro * d].copy_from_slice(&dxmid);
    layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, &l.ln1_g.data, &mut g.ln1_g.data, &mut g.ln1_b.data, &mut dx);
    dx
}

/// Drops PAD tokens (keeping original positions) and truncates to the
/// configured maximum length.
fn prepare(ids: &[u32], max_len: usize) -> (Vec<u32>, Vec<usize>) {
    ids.iter()
        .take(max_len)
        .enumerate()
        .filter(|(_, &id)| id != PAD_ID)
        .map(|(i, &id)| (id, i))
        .unzip()
}

/// Encodes one id sequence (CLS first) into its final CLS vector.
pub fn encode_with_cache<F: Real>(
    params: &ModelParams<F>,
    cfg: &EncoderConfig,
    ids: &[u32],
    dropout: Option<DropoutSeed>,
) -> (Vec<F>, SeqCache<F>) {
    let d = cfg.d_model;
    let (ids, positions) = prepare(ids, cfg.max_seq_len);
    assert!(!ids.is_empty(), "sequence must contain at least the CLS token");
    let len = ids.len();
    let mut x = vec![F::zero(); len * d];
    for (i, (&id, &pos)) in ids.iter().zip(&positions).enumerate() {
        let id = (id as usize).min(cfg.vocab_size - 1);
        let row = &mut x[i * d..(i + 1) * d];
        let te = &params.tok_emb.data[id * d..(id + 1) * d];
        let pe = &params.pos_emb.data[pos * d..(pos + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut drop_rng = dropout
        .filter(|_| cfg.dropout_p > 0.0)
        .map(|s| rng::stream(s.seed, s.stream));
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (li, l) in params.layers.iter().enumerate() {
        // Only the CLS row is needed out of the last layer.
        let rows_out = if li + 1 == cfg.n_layers { 1 } else { len };
        let (out, cache) = layer_forward(l, cfg, &x, len, rows_out, drop_rng.as_mut());
        x = out;
        caches.push(cache);
    }
    let (cls, xhatf, rstdf) = layer_norm(&x[..d], &params.lnf_g.data, &params.lnf_b.data);
    (
        cls,
        SeqCache {
            ids,
            positions,
            layers: caches,
            xhatf,
            rstdf,
        },
    )
}

pub fn encode<F: Real>(params: &ModelParams<F>, cfg: &EncoderConfig, ids: &[u32]) -> Vec<F> {
    encode_with_cache(params, cfg, ids, None).0
}

/// Accumulates parameter gradients for one sequence given dLoss/dCLS.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cfg: &EncoderConfig,
    cache: &SeqCache<F>,
    dcls: &[F],
    grads: &mut ModelParams<F>,
) {
    let d = cfg.d_model;
    let len = cache.ids.len();
    let mut dx = vec![F::zero(); d];
    layer_norm_backward(
        dcls,
        &cache.xhatf,
        &cache.rstdf,
        &params.lnf_g.data,
        &mut grads.lnf_g.data,
        &mut grads.lnf_b.data,
        &mut dx,
    );
    for li in (0..cfg.n_layers).rev() {
        let c = &cache.layers[li];
        // the layer's output has `rows_out` rows; upstream gradient may cover
        // fewer rows (only CLS after the last layer)
        let mut dout = vec![F::zero(); c.rows_out * d];
        dout[..dx.len()].copy_from_slice(&dx);
        dx = layer_backward(&params.layers[li], &mut grads.layers[li], cfg, c, len, &dout);
    }
    for (i, (&id, &pos)) in cache.ids.iter().zip(&cache.positions).enumerate() {
        let id = (id as usize).min(cfg.vocab_size - 1);
        let g = &dx[i * d..(i + 1) * d];
        for j in 0..d {
            grads.tok_emb.data[id * d + j] += g[j];
            grads.pos_emb.data[pos * d + j] += g[j];
        }
    }
}

/// `logits = cls W + b` for the concatenated heads.
pub fn head_logits<F: Real>(params: &ModelParams<F>, cls: &[F], n: usize) -> Vec<F> {
    let d = params.head_w.shape[0];
    let c = params.head_w.shape[1];
    let mut out = vec![F::zero(); n * c];
    for row in out.chunks_exact_mut(c) {
        row.copy_from_slice(&params.head_b.data);
    }
    matmul_acc(cls, &params.head_w.data, &mut out, n, d, c);
    out
}

/// Backward of [`head_logits`]; returns dCLS.
pub fn head_backward<F: Real>(
    params: &ModelParams<F>,
    cls: &[F],
    dlogits: &[F],
    n: usize,
    grads: &mut ModelParams<F>,
) -> Vec<F> {
    let d = params.head_w.shape[0];
    let c = params.head_w.shape[1];
    matmul_at_b_acc(cls, dlogits, &mut grads.head_w.data, n, d, c);
    col_sum_acc(dlogits, &mut grads.head_b.data);
    let mut dcls = vec![F::zero(); n * d];
    matmul_a_bt_acc(dlogits, &params.head_w.data, &mut dcls, n, c, d);
    dcls
}
