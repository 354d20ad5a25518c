//! Dense symmetric linear algebra and seeded randomness.
//!
//! Everything here is written for desk-scale dense problems (dimensions up to
//! a couple of thousand): a cyclic Jacobi eigensolver for symmetric matrices,
//! pseudo-inverse application through an eigendecomposition, a matrix-free
//! conjugate gradient, and generators for random PSD matrices with a
//! prescribed spectrum.
//!
//! Randomness convention, fixed for the whole workspace: generators are
//! ChaCha8 streams keyed by a 64-bit seed ([`seeded_rng`]); standard normals
//! are produced by the Box–Muller transform, one sample per call
//! ([`standard_normal`]). Tests depend only on spectral invariants of the
//! generated matrices, never on the specific stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

// ── slice helpers ───────────────────────────────────────────────────

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y ← y + alpha · x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

// ── dense matrices ──────────────────────────────────────────────────

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from a flat row-major slice; panics if the length is wrong.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Mat {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// Aᵀ v without forming the transpose.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row(i), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a != 0.0 {
                    for j in 0..other.cols {
                        out[(i, j)] += a * other[(k, j)];
                    }
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// self ← self + alpha · other (same shape).
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(alpha, &other.data, &mut self.data);
    }

    /// (A + Aᵀ)/2 for square matrices.
    pub fn symmetrized(&self) -> Mat {
        assert_eq!(self.rows, self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = m;
                out[(j, i)] = m;
            }
        }
        out
    }

    /// ‖A − Aᵀ‖_F for square matrices.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut s = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = self[(i, j)] - self[(j, i)];
                s += 2.0 * d * d;
            }
        }
        s.sqrt()
    }

    /// Largest singular value, estimated by power iteration on AᵀA.
    ///
    /// Deterministic: the starting vector comes from a fixed internal seed.
    pub fn op_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let mut rng = seeded_rng(0x9e37_79b9_7f4a_7c15);
        let mut v = gaussian_vec(&mut rng, self.cols);
        let n0 = norm(&v);
        if n0 == 0.0 {
            return 0.0;
        }
        for x in &mut v {
            *x /= n0;
        }
        let mut sigma = 0.0_f64;
        for _ in 0..200 {
            let w = self.tr_matvec(&self.matvec(&v));
            let nw = norm(&w);
            if nw == 0.0 {
                return 0.0;
            }
            let next = nw.sqrt();
            let rel = (next - sigma).abs() / next.max(f64::MIN_POSITIVE);
            sigma = next;
            v = scaled(1.0 / nw, &w);
            if rel < 1e-14 {
                break;
            }
        }
        sigma
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// ── seeded randomness ───────────────────────────────────────────────

/// The workspace-wide deterministic generator: ChaCha8 keyed by a 64-bit seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard normal sample via Box–Muller (cosine branch).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

pub fn gaussian_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let data = gaussian_vec(rng, rows * cols);
    Mat { rows, cols, data }
}

/// Uniform sample from the ball of the given radius, via a Gaussian direction
/// and a radial factor u^(1/d).
pub fn uniform_ball<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> Vec<f64> {
    let mut v = gaussian_vec(rng, dim);
    let n = norm(&v);
    if n == 0.0 {
        return v;
    }
    let u: f64 = rng.random();
    let r = radius * u.powf(1.0 / dim as f64);
    for x in &mut v {
        *x *= r / n;
    }
    v
}

// I − 2vvᵀ applied to rows k.. of the trailing column block [col0..d) of m,
// traversing rows so the row-major layout stays cache-friendly.
fn apply_reflector(m: &mut Mat, v: &[f64], k: usize, col0: usize) {
    let d = m.cols();
    let width = d - col0;
    let mut w = vec![0.0; width];
    for (off, vi) in v.iter().enumerate() {
        let start = (k + off) * d + col0;
        let row = &m.data[start..start + width];
        for (wj, rj) in w.iter_mut().zip(row) {
            *wj += vi * rj;
        }
    }
    for (off, vi) in v.iter().enumerate() {
        let scale = 2.0 * vi;
        let start = (k + off) * d + col0;
        let row = &mut m.data[start..start + width];
        for (rj, wj) in row.iter_mut().zip(&w) {
            *rj -= scale * wj;
        }
    }
}

/// Orthogonal factor of a seeded Gaussian square matrix (Householder QR,
/// column signs fixed so the R factor has a non-negative diagonal).
pub fn orthogonal_from_gaussian<R: Rng>(rng: &mut R, d: usize) -> Mat {
    let mut a = gaussian_mat(rng, d, d);
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(d);
    for k in 0..d {
        // Householder vector for column k below the diagonal.
        let mut v: Vec<f64> = (k..d).map(|i| a[(i, k)]).collect();
        let alpha = -v[0].signum() * norm(&v);
        v[0] -= alpha;
        let vn = norm(&v);
        if vn > 0.0 {
            for x in &mut v {
                *x /= vn;
            }
            apply_reflector(&mut a, &v, k, k);
        } else {
            v.clear();
        }
        reflectors.push(v);
    }
    // Accumulate Q = H_0 · H_1 ⋯ H_{d-1} applied to the identity.
    let mut q = Mat::identity(d);
    for k in (0..d).rev() {
        let v = &reflectors[k];
        if !v.is_empty() {
            apply_reflector(&mut q, v, k, 0);
        }
    }
    // Sign fix: R's diagonal now sits in A; flip Q's columns where it is negative.
    for j in 0..d {
        if a[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

// ── symmetric eigendecomposition ────────────────────────────────────

/// Eigendecomposition of a symmetric matrix: `eigenvalues` ascending,
/// `eigenvectors` orthonormal with column `i` paired with eigenvalue `i`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Q Λ Qᵀ (verification helper).
    pub fn reconstruct(&self) -> Mat {
        let d = self.dim();
        let mut out = Mat::zeros(d, d);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            if lam == 0.0 {
                continue;
            }
            let q = self.eigenvectors.col(k);
            for i in 0..d {
                let qi = lam * q[i];
                for j in 0..d {
                    out[(i, j)] += qi * q[j];
                }
            }
        }
        out
    }

    /// A v through the decomposition.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let coeffs = self.eigenvectors.tr_matvec(v);
        let scaled: Vec<f64> = coeffs
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, l)| c * l)
            .collect();
        self.eigenvectors.matvec(&scaled)
    }
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input must be symmetric within `1e-9 · ‖A‖_F`; it is symmetrized as
/// `(A + Aᵀ)/2` before the sweeps. Accurate to roughly machine precision for
/// dense symmetric matrices up to dimensions of a couple of thousand.
pub fn sym_eig(a: &Mat) -> Result<SymEig> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidInput(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("sym_eig: non-finite entries".into()));
    }
    let fro = a.frob_norm();
    if a.asymmetry() > 1e-9 * fro.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidInput(
            "sym_eig: matrix is not symmetric within tolerance".into(),
        ));
    }
    let d = a.rows();
    if d == 0 {
        return Ok(SymEig {
            eigenvalues: vec![],
            eigenvectors: Mat::zeros(0, 0),
        });
    }
    let mut m = a.symmetrized();
    let mut q = Mat::identity(d);
    let target = 1e-30_f64.max(1e-28 * fro * fro); // squared off-diagonal mass target

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off_sq = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off_sq += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        if off_sq <= target {
            converged = true;
            break;
        }
        for p in 0..d {
            for r in (p + 1)..d {
                let apq = m[(p, r)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(r, r)];
                // Rotation angle choice that keeps |t| ≤ 1.
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    // Diagonal difference dwarfs the off-diagonal entry.
                    1.0 / (2.0 * theta)
                };
                let t = if t.is_finite() { t } else { 0.0 };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                if s == 0.0 {
                    continue;
                }
                m[(p, p)] = app - t * apq;
                m[(r, r)] = aqq + t * apq;
                m[(p, r)] = 0.0;
                m[(r, p)] = 0.0;
                for i in 0..d {
                    if i != p && i != r {
                        let aip = m[(i, p)];
                        let aiq = m[(i, r)];
                        let new_p = c * aip - s * aiq;
                        let new_q = s * aip + c * aiq;
                        m[(i, p)] = new_p;
                        m[(p, i)] = new_p;
                        m[(i, r)] = new_q;
                        m[(r, i)] = new_q;
                    }
                }
                for i in 0..d {
                    let vip = q[(i, p)];
                    let viq = q[(i, r)];
                    q[(i, p)] = c * vip - s * viq;
                    q[(i, r)] = s * vip + c * viq;
                }
            }
        }
    }
    if !converged {
        // Re-check once more after the final sweep.
        let mut off_sq = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off_sq += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        if off_sq > target {
            return Err(Error::NumericalFailure(format!(
                "Jacobi sweeps did not converge within {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Mat::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..d {
            eigenvectors[(i, dst)] = q[(i, src)];
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// Default relative rank threshold for pseudo-inverse application.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// A† v for a PSD matrix given its eigendecomposition.
///
/// Eigenvalues above `rank_tol · λ_max` are inverted; components along the
/// rest are annihilated. Eigenvalues below `−rank_tol · λ_max` mean the
/// matrix is not PSD.
pub fn pinv_psd_apply(eig: &SymEig, v: &[f64], rank_tol: f64) -> Result<Vec<f64>> {
    if v.len() != eig.dim() {
        return Err(Error::InvalidInput(format!(
            "pinv_psd_apply: vector length {} does not match dimension {}",
            v.len(),
            eig.dim()
        )));
    }
    let lam_max = eig.max_eigenvalue().max(0.0);
    let tau = rank_tol * lam_max;
    if let Some(&lam_min) = eig.eigenvalues.first() {
        if lam_min < -tau {
            return Err(Error::NotPsd(format!(
                "eigenvalue {lam_min:.3e} below -{tau:.3e}"
            )));
        }
    }
    let mut out = vec![0.0; eig.dim()];
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tau {
            let qk = eig.eigenvectors.col(k);
            let c = dot(&qk, v) / lam;
            axpy(c, &qk, &mut out);
        }
    }
    Ok(out)
}

/// Orthogonal projection of `v` onto the range of the decomposed matrix
/// (eigenvalues above `rank_tol · λ_max`).
pub fn range_project(eig: &SymEig, v: &[f64], rank_tol: f64) -> Vec<f64> {
    let tau = rank_tol * eig.max_eigenvalue().max(0.0);
    let mut out = vec![0.0; eig.dim()];
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > tau {
            let qk = eig.eigenvectors.col(k);
            let c = dot(&qk, v);
            axpy(c, &qk, &mut out);
        }
    }
    out
}

// ── conjugate gradient ──────────────────────────────────────────────

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    pub iters: usize,
}

/// Conjugate gradient for an operator that is symmetric PSD on the affine
/// span explored from `init`.
///
/// Runs until the residual norm drops to `tol` or `max_iters` is reached,
/// returning the best iterate. A non-positive curvature `pᵀAp` stops the
/// iteration (the search direction left the operator's range); non-finite
/// intermediates report `NumericalFailure`.
pub fn cg_solve<F>(
    mut matvec: F,
    rhs: &[f64],
    init: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    if rhs.len() != init.len() {
        return Err(Error::InvalidInput(
            "cg_solve: rhs and init lengths differ".into(),
        ));
    }
    if !all_finite(rhs) || !all_finite(init) {
        return Err(Error::InvalidInput("cg_solve: non-finite input".into()));
    }
    let mut x = init.to_vec();
    let ax = matvec(&x);
    let mut r = sub(rhs, &ax);
    if !all_finite(&r) {
        return Err(Error::NumericalFailure(
            "cg_solve: non-finite residual".into(),
        ));
    }
    let mut rs = dot(&r, &r);
    if rs.sqrt() <= tol {
        return Ok(CgOutcome {
            solution: x,
            residual_norm: rs.sqrt(),
            iters: 0,
        });
    }
    let mut p = r.clone();
    let mut iters = 0;
    let mut max_rayleigh = 0.0_f64;
    for _ in 0..max_iters {
        let ap = matvec(&p);
        if !all_finite(&ap) {
            return Err(Error::NumericalFailure(
                "cg_solve: non-finite operator output".into(),
            ));
        }
        let curv = dot(&p, &ap);
        if !curv.is_finite() {
            return Err(Error::NumericalFailure(
                "cg_solve: non-finite curvature".into(),
            ));
        }
        // Breakdown guards for PSD-singular operators: a non-positive
        // curvature, or a Rayleigh quotient that collapsed by twelve orders
        // of magnitude against the stiffest one seen, means the search
        // direction is numerically in the null space. Stopping there gives
        // the iteration pseudo-inverse semantics: sub-threshold modes are
        // annihilated instead of inverted.
        let rayleigh = curv / dot(&p, &p).max(f64::MIN_POSITIVE);
        max_rayleigh = max_rayleigh.max(rayleigh);
        if curv <= 0.0 || rayleigh < 1e-12 * max_rayleigh {
            break;
        }
        let alpha = rs / curv;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() || !all_finite(&x) {
            return Err(Error::NumericalFailure(
                "cg_solve: non-finite iterate (indefinite operator or bad scaling?)".into(),
            ));
        }
        iters += 1;
        if rs_new.sqrt() <= tol {
            rs = rs_new;
            break;
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    let _ = rs;
    let final_res = sub(rhs, &matvec(&x));
    Ok(CgOutcome {
        solution: x,
        residual_norm: norm(&final_res),
        iters,
    })
}

// ── random PSD matrices with prescribed spectrum ────────────────────

/// Random symmetric PSD matrix with exactly `d − rank` zero eigenvalues and
/// the nonzero eigenvalues log-spaced in `[lambda_max/cond, lambda_max]`.
///
/// The eigenbasis is the orthogonal factor of a seeded Gaussian matrix, so
/// the output is bit-reproducible for a fixed `(seed, d, rank, cond,
/// lambda_max)`.
pub fn rand_spd_with_spectrum<R: Rng>(
    d: usize,
    rank: usize,
    cond: f64,
    lambda_max: f64,
    rng: &mut R,
) -> Result<Mat> {
    rand_spd_with_spectrum_eig(d, rank, cond, lambda_max, rng).map(|(m, _)| m)
}

/// Same construction as [`rand_spd_with_spectrum`], additionally returning
/// the exact eigendecomposition used to build the matrix (zero eigenvalues
/// first, then the log-spaced positive ones, ascending).
pub fn rand_spd_with_spectrum_eig<R: Rng>(
    d: usize,
    rank: usize,
    cond: f64,
    lambda_max: f64,
    rng: &mut R,
) -> Result<(Mat, SymEig)> {
    if rank == 0 || rank > d {
        return Err(Error::InvalidInput(format!(
            "rank must be in 1..={d}, got {rank}"
        )));
    }
    if cond.is_nan() || cond < 1.0 {
        return Err(Error::InvalidInput(format!(
            "cond must be >= 1, got {cond}"
        )));
    }
    if !lambda_max.is_finite() || lambda_max <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda_max must be positive and finite, got {lambda_max}"
        )));
    }
    let mut eigenvalues = vec![0.0; d - rank];
    if rank == 1 {
        eigenvalues.push(lambda_max);
    } else {
        let log_min = (lambda_max / cond).ln();
        let log_max = lambda_max.ln();
        for i in 0..rank {
            let lam = if i == 0 {
                lambda_max / cond
            } else if i == rank - 1 {
                lambda_max
            } else {
                let t = i as f64 / (rank - 1) as f64;
                (log_min + t * (log_max - log_min)).exp()
            };
            eigenvalues.push(lam);
        }
    }
    let q = orthogonal_from_gaussian(rng, d);
    let mut a = Mat::zeros(d, d);
    for (k, &lam) in eigenvalues.iter().enumerate() {
        if lam == 0.0 {
            continue;
        }
        let qk = q.col(k);
        for i in 0..d {
            let s = lam * qk[i];
            let row = &mut a.data[i * d..i * d + i + 1];
            for (aij, qj) in row.iter_mut().zip(&qk) {
                *aij += s * qj;
            }
        }
    }
    // Only the lower triangle was accumulated; mirror it.
    for i in 0..d {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    Ok((
        a,
        SymEig {
            eigenvalues,
            eigenvectors: q,
        },
    ))
}
