//! Dense row-major kernels shared by the encoder and the heads.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Float type the model is generic over: `f32` for training, `f64` for
/// gradient checks.
pub trait Real: Float + NumAssign + FromPrimitive + Default + Debug + Send + Sync + 'static {
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    /// `c = a * b + beta * c` for an m x k by k x n product with explicit
    /// strides; `c` rows are `rsc` apart with unit column stride.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rs: isize, cs: isize, r: usize, cc: usize| {
                    if r == 0 || cc == 0 {
                        0
                    } else {
                        (r as isize - 1) * rs + (cc as isize - 1) * cs
                    }
                };
                assert!(last(rsa, csa, m, k) < a.len() as isize || k == 0);
                assert!(last(rsb, csb, k, n) < b.len() as isize || k == 0);
                assert!(rsc >= n && c.len() >= (m - 1) * rsc + n);
                // SAFETY: the asserts above keep every strided access inside
                // the slices; `c` is row-major m x n and exclusively borrowed.
                unsafe {
                    $f(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                        c.as_mut_ptr(), rsc as isize, 1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `c (m x n) += a (m x k) * b (k x n)`.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, F::one(), c, n);
}

/// `c (m x n) = a (m x k) * b (k x n)`.
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    F::gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, F::zero(), &mut c, n);
    c
}

/// `c (k x n) += a^T * b` for `a` (m x k) and `b` (m x n).
pub fn matmul_at_b_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm_strided(k, m, n, a, 1, k as isize, b, n as isize, 1, F::one(), c, n);
}

/// `c (m x k) += a * b^T` for `a` (m x n) and `b` (k x n).
pub fn matmul_a_bt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    F::gemm_strided(m, n, k, a, n as isize, 1, b, 1, n as isize, F::one(), c, k);
}

pub fn add_row_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Column sums of `x` (rows of width `acc.len()`) added into `acc`.
pub fn col_sum_acc<F: Real>(x: &[F], acc: &mut [F]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (x, y)| s + *x * *y)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns `(y, xhat, rstd)`.
pub fn layer_norm<F: Real>(x: &[F], gamma: &[F], beta: &[F]) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let nd = F::c(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().fold(F::zero(), |s, v| s + *v) / nd;
        let var = row.iter().fold(F::zero(), |s, v| s + (*v - mean) * (*v - mean)) / nd;
        let rs = F::one() / (var + F::c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]; accumulates parameter grads and adds the
/// input gradient into `dx`.
pub fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    dx: &mut [F],
) {
    let d = gamma.len();
    let nd = F::c(d as f64);
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for j in 0..d {
            dgamma[j] += dyr[j] * xr[j];
            dbeta[j] += dyr[j];
            let g = dyr[j] * gamma[j];
            sum_g += g;
            sum_gx += g * xr[j];
        }
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[r * d + j] += rs * (g - sum_g / nd - xr[j] * sum_gx / nd);
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let inner = F::c(GELU_K) * (x + F::c(GELU_C) * x * x * x);
    F::c(0.5) * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let x2 = x * x;
    let inner = F::c(GELU_K) * (x + F::c(GELU_C) * x2 * x);
    let t = inner.tanh();
    let dinner = F::c(GELU_K) * (F::one() + F::c(3.0 * GELU_C) * x2);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * dinner
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<F: Real>(x: &mut [F]) {
    let max = x.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
    let mut sum = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp<F: Real>(x: &[F]) -> F {
    let max = x.iter().fold(F::neg_infinity(), |m, v| m.max(*v));
    if max == F::neg_infinity() {
        return max;
    }
    max + x.iter().fold(F::zero(), |s, v| s + (*v - max).exp()).ln()
}
