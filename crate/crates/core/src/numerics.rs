//! Dense linear-algebra primitives, probability kernels and a seeded RNG.
//!
//! Everything is `f64`. Matrices are row-major with explicit dimensions.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;
/// Vectors with a smaller Euclidean norm cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.row_iter().zip(y) {
            axpy(yi, r, &mut out);
        }
        out
    }

    /// `self += scale · a bᵀ`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                axpy(scale * ai, b, self.row_mut(i));
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    axpy(a, other.row(k), out.row_mut(i));
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_finite(z: &[f64]) -> Result<()> {
    match z.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invalid(format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    check_finite(z)?;
    let m = max_of(z);
    let mut out: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    Ok(out)
}

/// `log(softmax(z))`, computed as `z - logsumexp(z)`.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    check_finite(z)?;
    let m = max_of(z);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|x| x - lse).collect())
}

/// `H(p, q) = -Σ p_c log q_c`, with `q` clamped to [`PROB_EPS`] inside the log.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "cross_entropy length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_finite(p)?;
    check_finite(q)?;
    Ok(-p
        .iter()
        .zip(q)
        .map(|(pc, qc)| pc * qc.max(PROB_EPS).ln())
        .sum::<f64>())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    check_finite(v)?;
    let n = norm(v);
    if n < NORM_EPS {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Vector-Jacobian product of [`l2_normalize`]:
/// `(I/‖v‖ − v vᵀ/‖v‖³) · upstream`.
pub fn l2_normalize_backward(v: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    if v.len() != upstream.len() {
        return Err(Error::invalid(format!(
            "normalize backward length mismatch: {} vs {}",
            v.len(),
            upstream.len()
        )));
    }
    let n = norm(v);
    if n < NORM_EPS {
        return Err(Error::DegenerateVector { norm: n });
    }
    let proj = dot(v, upstream) / (n * n * n);
    Ok(upstream
        .iter()
        .zip(v)
        .map(|(g, x)| g / n - proj * x)
        .collect())
}

/// Central-difference gradient check.
///
/// Returns the worst coordinate-wise relative error between `analytic` and
/// `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h`. The denominator is floored at
/// [`GRADCHECK_FLOOR`], so coordinates whose true gradient vanishes are
/// judged on absolute error.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn fd_gradient_check<F>(mut loss: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut theta = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = loss(&theta);
        theta[i] = orig - h;
        let minus = loss(&theta);
        theta[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if !(err <= worst) {
            worst = err;
        }
    }
    worst
}

/// Denominator floor for [`relative_error`].
pub const GRADCHECK_FLOOR: f64 = 1e-3;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADCHECK_FLOOR)
}

/// Seeded pseudo-random stream. Identical seeds give identical sequences.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed, keyed by `stream`.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn softmax_uniform_and_single() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[-42.5]).unwrap(), vec![1.0]);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn softmax_matches_extended_precision() {
        // Reference values evaluated with 50-digit arithmetic:
        // e^k / (e + e^2 + e^3) for k = 1, 2, 3.
        let expected = [
            0.090_030_573_170_380_457_998,
            0.244_728_471_054_797_652_473,
            0.665_240_955_774_821_889_529,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let h = cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(h.abs() < 1e-10);
        let h = cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_matches_termwise_sum() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let p = softmax(&rng.normal_vec(5)).unwrap();
            let q = softmax(&rng.normal_vec(5)).unwrap();
            let mut oracle = 0.0;
            for c in 0..5 {
                oracle -= p[c] * q[c].ln();
            }
            assert_eq!(cross_entropy(&p, &q).unwrap(), oracle);
        }
    }

    #[test]
    fn normalize_basic() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = [0.6, 0.8];
        let n = l2_normalize(&u).unwrap();
        assert!(n.iter().zip(u).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(
            l2_normalize(&[0.0, 1e-14]),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn normalize_backward_identities() {
        let v = [0.6, 0.8];
        let tangent = [-0.8, 0.6];
        let g = l2_normalize_backward(&v, &tangent).unwrap();
        assert!(g.iter().zip(tangent).all(|(a, b)| (a - b).abs() < 1e-15));
        let radial = [1.2, 1.6];
        let g = l2_normalize_backward(&[3.0, 4.0], &radial).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let v = rng.normal_vec(6);
            let up = rng.normal_vec(6);
            let analytic = l2_normalize_backward(&v, &up).unwrap();
            let err = fd_gradient_check(
                |x| dot(&l2_normalize(x).unwrap(), &up),
                &v,
                &analytic,
                1e-6,
            );
            assert!(err <= 1e-6, "rel err {err}");
        }
    }

    #[test]
    fn gradcheck_on_quadratic() {
        let theta = Rng::new(1).normal_vec(12);
        let err = fd_gradient_check(|x| 0.5 * dot(x, x), &theta, &theta, 1e-5);
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn gradcheck_reports_wrong_gradient() {
        let theta = [1.0, -2.0];
        let err = fd_gradient_check(|x| 0.5 * dot(x, x), &theta, &[1.0, -1.0], 1e-5);
        assert!(err > 0.4);
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        let xa: Vec<f64> = (0..50).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..50).map(|_| b.normal()).collect();
        assert_eq!(xa, xb);
        let mut c = a.derive(3);
        let mut d = b.derive(3);
        assert_eq!(c.uniform(), d.uniform());
        assert_ne!(Rng::new(99).derive(1).uniform(), Rng::new(99).derive(2).uniform());
    }

    #[test]
    fn matrix_ops() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![3.0, 7.0, 11.0]);
        assert_eq!(a.matvec_t(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
        let at = a.transpose();
        assert_eq!(at.matmul(&a).as_slice(), &[35.0, 44.0, 44.0, 56.0]);
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&z).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = z.iter().map(|x| x + shift).collect();
            let ps = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(ps) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..10)) {
            prop_assume!(norm(&v) > 1e-6);
            let n1 = l2_normalize(&v).unwrap();
            prop_assert!((norm(&n1) - 1.0).abs() < 1e-12);
            prop_assert!((dot(&n1, &v) - norm(&v)).abs() < 1e-10 * norm(&v).max(1.0));
            let n2 = l2_normalize(&n1).unwrap();
            for (a, b) in n1.iter().zip(n2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn self_cross_entropy_is_entropy(z in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let p = softmax(&z).unwrap();
            let entropy: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
            prop_assert!((cross_entropy(&p, &p).unwrap() - entropy).abs() < 1e-10);
        }
    }
}
