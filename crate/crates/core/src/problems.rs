//! Problem oracles: the contract the solvers consume plus two concrete
//! families.
//!
//! An oracle exposes the upper objective `f`, the lower objective `g`, their
//! first derivatives, and matrix-free second-order products of `g`:
//! Hessian-vector products `∂²_yy g · v` and cross products
//! `∂_x ⟨∂_y g, v⟩`. Dense blocks are only ever reconstructed by probing with
//! basis vectors, and only for small problems (see [`DENSE_PROBE_LIMIT`]).
//!
//! Jacobian convention used everywhere in this crate: the Jacobian of a map
//! `x ↦ φ(x, y)` has shape `dim_y × dim_x` with entry `(i, j) = ∂φ_i/∂x_j`;
//! chain-rule products against upper gradients are formed as `Jᵀ · ∂_y f`.

use rand::Rng;

use crate::linalg::{
    self, dot, norm, pinv_psd_apply, rand_spd_with_spectrum_eig, range_project, sub, Mat, SymEig,
    DEFAULT_RANK_TOL,
};
use crate::{Error, Result};

/// Largest lower-level dimension for which dense Hessian/cross blocks may be
/// reconstructed by basis probing.
pub const DENSE_PROBE_LIMIT: usize = 512;

// ── the oracle contract ─────────────────────────────────────────────

/// Callable surface of a bilevel problem.
///
/// Implementations must be immutable after construction and safe to evaluate
/// concurrently. Dimension agreement between arguments and
/// `dim_x`/`dim_y` is the caller's responsibility on these raw methods; the
/// checked entry points [`oracle_first_order`], [`oracle_hvp_yy`] and
/// [`oracle_hvp_xy`] validate it.
pub trait ProblemOracle {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    /// Lipschitz bound `L` on `y ↦ ∂_y g(x, y)`, valid on the problem's
    /// working region.
    fn smoothness_bound(&self) -> f64;

    fn upper_value(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_upper_x(&self, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn grad_upper_y(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    fn lower_value(&self, x: &[f64], y: &[f64]) -> f64;
    fn grad_lower_y(&self, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// `∂²_yy g(x, y) · v`.
    fn hvp_yy(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64>;

    /// Gradient with respect to `x` of the scalar `⟨∂_y g(x, y), v⟩`
    /// (length `dim_x`).
    fn hvp_xy(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64>;
}

/// First-order data at a point, as returned by [`oracle_first_order`].
#[derive(Debug, Clone)]
pub struct FirstOrder {
    pub upper: f64,
    pub grad_upper_x: Vec<f64>,
    pub grad_upper_y: Vec<f64>,
    pub lower: f64,
    pub grad_lower_y: Vec<f64>,
}

fn check_dims<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != p.dim_x() || y.len() != p.dim_y() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: got x:{} y:{}, problem is {}x{}",
            x.len(),
            y.len(),
            p.dim_x(),
            p.dim_y()
        )));
    }
    Ok(())
}

/// Evaluate both objectives and their first derivatives at `(x, y)`.
pub fn oracle_first_order<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
) -> Result<FirstOrder> {
    check_dims(p, x, y)?;
    Ok(FirstOrder {
        upper: p.upper_value(x, y),
        grad_upper_x: p.grad_upper_x(x, y),
        grad_upper_y: p.grad_upper_y(x, y),
        lower: p.lower_value(x, y),
        grad_lower_y: p.grad_lower_y(x, y),
    })
}

/// Checked Hessian-vector product `∂²_yy g(x, y) · v`.
pub fn oracle_hvp_yy<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    check_dims(p, x, y)?;
    if v.len() != p.dim_y() {
        return Err(Error::InvalidInput(format!(
            "hvp_yy probe has length {}, expected {}",
            v.len(),
            p.dim_y()
        )));
    }
    Ok(p.hvp_yy(x, y, v))
}

/// Checked cross product: gradient in `x` of `⟨∂_y g(x, y), v⟩`.
pub fn oracle_hvp_xy<P: ProblemOracle + ?Sized>(
    p: &P,
    x: &[f64],
    y: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    check_dims(p, x, y)?;
    if v.len() != p.dim_y() {
        return Err(Error::InvalidInput(format!(
            "hvp_xy probe has length {}, expected {}",
            v.len(),
            p.dim_y()
        )));
    }
    Ok(p.hvp_xy(x, y, v))
}

/// Dense lower-level Hessian `∂²_yy g(x, y)` reconstructed column-by-column.
pub fn dense_hessian_yy<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64]) -> Result<Mat> {
    check_dims(p, x, y)?;
    let d = p.dim_y();
    if d > DENSE_PROBE_LIMIT {
        return Err(Error::Unsupported(format!(
            "dense Hessian reconstruction limited to dim_y <= {DENSE_PROBE_LIMIT}, got {d}"
        )));
    }
    let mut h = Mat::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        h.set_col(j, &p.hvp_yy(x, y, &e));
        e[j] = 0.0;
    }
    Ok(h)
}

/// Dense cross block of shape `dim_y × dim_x` with entry
/// `(i, j) = ∂²g/∂y_i∂x_j`, reconstructed row-by-row from `hvp_xy` probes.
pub fn dense_cross_yx<P: ProblemOracle + ?Sized>(p: &P, x: &[f64], y: &[f64]) -> Result<Mat> {
    check_dims(p, x, y)?;
    let (dy, dx) = (p.dim_y(), p.dim_x());
    if dy > DENSE_PROBE_LIMIT {
        return Err(Error::Unsupported(format!(
            "dense cross-block reconstruction limited to dim_y <= {DENSE_PROBE_LIMIT}, got {dy}"
        )));
    }
    let mut b = Mat::zeros(dy, dx);
    let mut e = vec![0.0; dy];
    for i in 0..dy {
        e[i] = 1.0;
        let row = p.hvp_xy(x, y, &e);
        for j in 0..dx {
            b[(i, j)] = row[j];
        }
        e[i] = 0.0;
    }
    Ok(b)
}

/// Problems whose equilibria are available in closed form expose them for
/// trace metrics and oracle comparisons.
pub trait ClosedFormEquilibrium {
    /// The equilibrium upper-level point.
    fn optimum_x(&self) -> &[f64];
    /// Metric distance to the equilibrium: `sqrt(½ (x − x*)ᵀ A (x − x*))`
    /// in the problem's natural upper-level metric.
    fn distance_to_optimum(&self, x: &[f64]) -> f64;
    /// Norm of the exact selection-composed upper gradient at `x`.
    fn bgs_residual(&self, x: &[f64], y: &[f64]) -> f64;
}

// ── quadratic family ────────────────────────────────────────────────

/// Bilevel quadratic with a possibly singular lower Hessian:
///
/// `f(x, y) = ½ xᵀA_f x + C_fᵀ y`,  `g(x, y) = ½ yᵀA_g y + yᵀB_g x`,
///
/// with `A_f` symmetric positive definite, `A_g` symmetric PSD (possibly
/// rank-deficient) and `B_g` constrained to the range of `A_g`
/// (`B_g = A_g U`), which makes the selection and the equilibrium available
/// in closed form.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    pub a_f: Mat,
    pub a_g: Mat,
    pub b_g: Mat,
    pub c_f: Vec<f64>,
    eig_ag: SymEig,
    eig_af: SymEig,
    /// B_gᵀ A_g† C_f, the constant part of the exact upper gradient.
    coupling: Vec<f64>,
    x_star: Vec<f64>,
    smoothness: f64,
}

impl QuadraticBilevel {
    /// Validate and assemble a quadratic instance.
    ///
    /// Checks that `A_f` is positive definite, `A_g` is PSD within tolerance,
    /// and every column of `B_g` lies in the range of `A_g` (absolute
    /// Frobenius residual at most 1e-10). Spectral bounds beyond that (such
    /// as eigenvalues below one) are a property of [`quadratic_generate`],
    /// not of the type.
    pub fn new(a_f: Mat, a_g: Mat, b_g: Mat, c_f: Vec<f64>) -> Result<Self> {
        let dim_x = a_f.rows();
        let dim_y = a_g.rows();
        if a_f.cols() != dim_x || a_g.cols() != dim_y {
            return Err(Error::InvalidInput("A_f and A_g must be square".into()));
        }
        if b_g.rows() != dim_y || b_g.cols() != dim_x || c_f.len() != dim_y {
            return Err(Error::InvalidInput(format!(
                "B_g must be {dim_y}x{dim_x} and C_f length {dim_y}"
            )));
        }
        let eig_ag = linalg::sym_eig(&a_g)?;
        let eig_af = linalg::sym_eig(&a_f)?;
        Self::from_parts(a_f, a_g, b_g, c_f, eig_ag, eig_af)
    }

    fn from_parts(
        a_f: Mat,
        a_g: Mat,
        b_g: Mat,
        c_f: Vec<f64>,
        eig_ag: SymEig,
        eig_af: SymEig,
    ) -> Result<Self> {
        let dim_x = a_f.rows();
        if eig_af.min_eigenvalue() <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "A_f must be positive definite (min eigenvalue {:.3e})",
                eig_af.min_eigenvalue()
            )));
        }
        let lam_max_g = eig_ag.max_eigenvalue().max(0.0);
        if eig_ag.min_eigenvalue() < -DEFAULT_RANK_TOL * lam_max_g {
            return Err(Error::NotPsd(format!(
                "A_g has eigenvalue {:.3e}",
                eig_ag.min_eigenvalue()
            )));
        }
        // Range condition: every column of B_g in range(A_g).
        let mut residual_sq = 0.0;
        for j in 0..dim_x {
            let col = b_g.col(j);
            let proj = range_project(&eig_ag, &col, DEFAULT_RANK_TOL);
            residual_sq += dot(&sub(&col, &proj), &sub(&col, &proj));
        }
        let residual = residual_sq.sqrt();
        if residual > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "B_g leaves the range of A_g (residual {residual:.3e})"
            )));
        }
        let pinv_c = pinv_psd_apply(&eig_ag, &c_f, DEFAULT_RANK_TOL)?;
        let coupling = b_g.tr_matvec(&pinv_c);
        // A_f is positive definite, so its pseudo-inverse is its inverse.
        let x_star = pinv_psd_apply(&eig_af, &coupling, DEFAULT_RANK_TOL)?;
        let smoothness = lam_max_g + b_g.op_norm();
        Ok(QuadraticBilevel {
            a_f,
            a_g,
            b_g,
            c_f,
            eig_ag,
            eig_af,
            coupling,
            x_star,
            smoothness,
        })
    }

    pub fn eig_ag(&self) -> &SymEig {
        &self.eig_ag
    }

    pub fn eig_af(&self) -> &SymEig {
        &self.eig_af
    }

    /// Smallest positive eigenvalue of `A_g` (slowest contracting mode).
    pub fn min_positive_eigenvalue(&self) -> Option<f64> {
        let tau = DEFAULT_RANK_TOL * self.eig_ag.max_eigenvalue().max(0.0);
        self.eig_ag.eigenvalues.iter().copied().find(|l| *l > tau)
    }

    /// The flow selection in closed form:
    /// `φ(x, y) = −A_g† B_g x + (I − A_g A_g†) y`.
    pub fn selection(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let bx = self.b_g.matvec(x);
        let pinv_bx = pinv_psd_apply(&self.eig_ag, &bx, DEFAULT_RANK_TOL)
            .expect("A_g validated PSD at construction");
        let y_range = range_project(&self.eig_ag, y, DEFAULT_RANK_TOL);
        let mut out = sub(y, &y_range);
        linalg::axpy(-1.0, &pinv_bx, &mut out);
        out
    }

    /// Exact gradient of the selection-composed upper objective in `x`:
    /// `A_f x − B_gᵀ A_g† C_f`.
    pub fn selection_gradient_x(&self, x: &[f64]) -> Vec<f64> {
        sub(&self.a_f.matvec(x), &self.coupling)
    }
}

impl ProblemOracle for QuadraticBilevel {
    fn dim_x(&self) -> usize {
        self.a_f.rows()
    }

    fn dim_y(&self) -> usize {
        self.a_g.rows()
    }

    fn smoothness_bound(&self) -> f64 {
        self.smoothness
    }

    fn upper_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * dot(x, &self.a_f.matvec(x)) + dot(&self.c_f, y)
    }

    fn grad_upper_x(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
        self.a_f.matvec(x)
    }

    fn grad_upper_y(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        self.c_f.clone()
    }

    fn lower_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * dot(y, &self.a_g.matvec(y)) + dot(y, &self.b_g.matvec(x))
    }

    fn grad_lower_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut out = self.a_g.matvec(y);
        linalg::axpy(1.0, &self.b_g.matvec(x), &mut out);
        out
    }

    fn hvp_yy(&self, _x: &[f64], _y: &[f64], v: &[f64]) -> Vec<f64> {
        self.a_g.matvec(v)
    }

    fn hvp_xy(&self, _x: &[f64], _y: &[f64], v: &[f64]) -> Vec<f64> {
        self.b_g.tr_matvec(v)
    }
}

impl ClosedFormEquilibrium for QuadraticBilevel {
    fn optimum_x(&self) -> &[f64] {
        &self.x_star
    }

    fn distance_to_optimum(&self, x: &[f64]) -> f64 {
        let d = sub(x, &self.x_star);
        (0.5 * dot(&d, &self.a_f.matvec(&d))).max(0.0).sqrt()
    }

    fn bgs_residual(&self, x: &[f64], _y: &[f64]) -> f64 {
        norm(&self.selection_gradient_x(x))
    }
}

/// Generate a random quadratic instance.
///
/// `A_g` has `null_dim` zero eigenvalues and positive spectrum log-spaced
/// with the given conditioning; `A_f` is full-rank with the same
/// conditioning; `B_g = A_g U` for a seeded Gaussian `U`, rescaled so
/// `‖B_g‖_op ≤ 1`; `C_f` is a seeded Gaussian scaled to unit norm. The
/// smoothness bound is reported as `λ_max(A_g) + ‖B_g‖_op`.
pub fn quadratic_generate(
    dim_x: usize,
    dim_y: usize,
    null_dim: usize,
    cond: f64,
    lambda_max: f64,
    seed: u64,
) -> Result<QuadraticBilevel> {
    if dim_x == 0 || dim_y == 0 {
        return Err(Error::InvalidInput("dimensions must be positive".into()));
    }
    if null_dim >= dim_y {
        return Err(Error::InvalidInput(format!(
            "null_dim {null_dim} must be smaller than dim_y {dim_y}"
        )));
    }
    if !(lambda_max > 0.0 && lambda_max <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "lambda_max must lie in (0, 1], got {lambda_max}"
        )));
    }
    let mut rng = linalg::seeded_rng(seed);
    let (a_g, eig_ag) =
        rand_spd_with_spectrum_eig(dim_y, dim_y - null_dim, cond, lambda_max, &mut rng)?;
    let (a_f, eig_af) = rand_spd_with_spectrum_eig(dim_x, dim_x, cond, lambda_max, &mut rng)?;
    let u = linalg::gaussian_mat(&mut rng, dim_y, dim_x);
    let mut b_g = a_g.matmul(&u);
    let op = b_g.op_norm();
    if op > 1.0 {
        b_g.scale_in_place(1.0 / op);
    }
    let mut c_f = linalg::gaussian_vec(&mut rng, dim_y);
    let cn = norm(&c_f);
    if cn > 0.0 {
        for v in &mut c_f {
            *v /= cn;
        }
    }
    QuadraticBilevel::from_parts(a_f, a_g, b_g, c_f, eig_ag, eig_af)
}

/// Closed forms of the quadratic family at a point.
#[derive(Debug, Clone)]
pub struct QuadraticClosedForms {
    /// φ(x, y) = −A_g† B_g x + (I − A_g A_g†) y.
    pub selection: Vec<f64>,
    /// x* = A_f⁻¹ B_gᵀ A_g† C_f.
    pub optimum_x: Vec<f64>,
    /// A_f x − B_gᵀ A_g† C_f, the exact upper gradient at x.
    pub selection_gradient_x: Vec<f64>,
}

pub fn quadratic_closed_forms(
    q: &QuadraticBilevel,
    x: &[f64],
    y: &[f64],
) -> Result<QuadraticClosedForms> {
    check_dims(q, x, y)?;
    Ok(QuadraticClosedForms {
        selection: q.selection(x, y),
        optimum_x: q.x_star.clone(),
        selection_gradient_x: q.selection_gradient_x(x),
    })
}

// ── Mexican-hat family ──────────────────────────────────────────────

/// Two-dimensional landscape with a degenerate critical circle:
///
/// `g(x, y) = ¼ (‖y − x‖² − 1)²`,  `f(x, y) = ½ ‖x‖² + cᵀ y`.
///
/// For every `x` the critical set of `g(x, ·)` is `{x}` together with the
/// unit circle centred at `x`; at every circle point the Hessian
/// `(r² − 1) I + 2 (y−x)(y−x)ᵀ` has exactly one zero eigenvalue, the
/// degenerate regime the pseudo-inverse correction is built for.
#[derive(Debug, Clone)]
pub struct MexicanHatProblem {
    pub linear_coeff: [f64; 2],
}

/// Radius of the working region (around the critical circle) on which the
/// reported smoothness bound is valid.
const HAT_WORKING_RADIUS: f64 = 2.1;

impl MexicanHatProblem {
    pub fn new(linear_coeff: [f64; 2]) -> Self {
        MexicanHatProblem { linear_coeff }
    }

    /// Nearest critical-circle point to `y`: `x + (y − x)/‖y − x‖`.
    pub fn circle_point(&self, x: &[f64], y: &[f64]) -> Option<Vec<f64>> {
        let u = sub(y, x);
        let r = norm(&u);
        if r == 0.0 {
            return None;
        }
        Some(vec![x[0] + u[0] / r, x[1] + u[1] / r])
    }
}

impl ProblemOracle for MexicanHatProblem {
    fn dim_x(&self) -> usize {
        2
    }

    fn dim_y(&self) -> usize {
        2
    }

    fn smoothness_bound(&self) -> f64 {
        // Hessian eigenvalues are 3r² − 1 and r² − 1; bounded on r ≤ 2.1.
        3.0 * HAT_WORKING_RADIUS * HAT_WORKING_RADIUS - 1.0
    }

    fn upper_value(&self, x: &[f64], y: &[f64]) -> f64 {
        0.5 * dot(x, x) + dot(&self.linear_coeff, y)
    }

    fn grad_upper_x(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn grad_upper_y(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        self.linear_coeff.to_vec()
    }

    fn lower_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let u = sub(y, x);
        let s = dot(&u, &u) - 1.0;
        0.25 * s * s
    }

    fn grad_lower_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let u = sub(y, x);
        let s = dot(&u, &u) - 1.0;
        linalg::scaled(s, &u)
    }

    fn hvp_yy(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64> {
        let u = sub(y, x);
        let s = dot(&u, &u) - 1.0;
        let mut out = linalg::scaled(s, v);
        linalg::axpy(2.0 * dot(&u, v), &u, &mut out);
        out
    }

    fn hvp_xy(&self, x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64> {
        // ∂_x (s · uᵀv) = −2u (uᵀv) − s v = −∂²_yy g · v.
        linalg::scaled(-1.0, &self.hvp_yy(x, y, v))
    }
}

// ── negative control ────────────────────────────────────────────────

/// Hand-built problem whose cross block escapes the Hessian range:
/// `g(x, y) = y₁² + x y₂`, `f(x, y) = ½ x²` with `dim_x = 1`, `dim_y = 2`.
///
/// At the critical point `(0, 0)` the Hessian is `diag(2, 0)` while the
/// cross column is `(0, 1)ᵀ`, entirely outside the range. Used as the
/// negative control for range diagnostics; deliberately not a landscape the
/// solvers are meant to handle.
#[derive(Debug, Clone, Default)]
pub struct RangeDefectProblem;

impl ProblemOracle for RangeDefectProblem {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_y(&self) -> usize {
        2
    }

    fn smoothness_bound(&self) -> f64 {
        2.0
    }

    fn upper_value(&self, x: &[f64], _y: &[f64]) -> f64 {
        0.5 * x[0] * x[0]
    }

    fn grad_upper_x(&self, x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }

    fn grad_upper_y(&self, _x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn lower_value(&self, x: &[f64], y: &[f64]) -> f64 {
        y[0] * y[0] + x[0] * y[1]
    }

    fn grad_lower_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        vec![2.0 * y[0], x[0]]
    }

    fn hvp_yy(&self, _x: &[f64], _y: &[f64], v: &[f64]) -> Vec<f64> {
        vec![2.0 * v[0], 0.0]
    }

    fn hvp_xy(&self, _x: &[f64], _y: &[f64], v: &[f64]) -> Vec<f64> {
        vec![v[1]]
    }
}

// ── problem families and serialization ──────────────────────────────

/// A concrete problem, dispatched by family.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // instances are built once, never collected
pub enum Problem {
    Quadratic(QuadraticBilevel),
    MexicanHat(MexicanHatProblem),
}

impl Problem {
    pub fn oracle(&self) -> &dyn ProblemOracle {
        match self {
            Problem::Quadratic(q) => q,
            Problem::MexicanHat(h) => h,
        }
    }

    pub fn closed_form(&self) -> Option<&dyn ClosedFormEquilibrium> {
        match self {
            Problem::Quadratic(q) => Some(q),
            Problem::MexicanHat(_) => None,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Problem::Quadratic(_) => "quadratic",
            Problem::MexicanHat(_) => "mexican_hat",
        }
    }
}

/// Provenance recorded alongside a serialized problem so a run is exactly
/// re-derivable from the artifact alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemMeta {
    pub seed: Option<u64>,
    pub cond: Option<f64>,
    pub null_dim: Option<usize>,
    pub lambda_max: Option<f64>,
}

/// 17-significant-digit decimal formatting: lossless for f64 round trips.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_row(row: &[f64]) -> String {
    row.iter()
        .map(|v| format_f64(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Serialize a problem to the structured text format (see the repository
/// README for the grammar). Matrices are written row-major as decimal text.
pub fn problem_to_text(problem: &Problem, meta: &ProblemMeta) -> String {
    let mut out = String::new();
    out.push_str("format bgs-problem 1\n");
    out.push_str(&format!("family {}\n", problem.family_name()));
    let p = problem.oracle();
    out.push_str(&format!("dim_x {}\n", p.dim_x()));
    out.push_str(&format!("dim_y {}\n", p.dim_y()));
    if let Some(seed) = meta.seed {
        out.push_str(&format!("seed {seed}\n"));
    }
    if let Some(cond) = meta.cond {
        out.push_str(&format!("cond {}\n", format_f64(cond)));
    }
    if let Some(nd) = meta.null_dim {
        out.push_str(&format!("null_dim {nd}\n"));
    }
    if let Some(lm) = meta.lambda_max {
        out.push_str(&format!("lambda_max {}\n", format_f64(lm)));
    }
    match problem {
        Problem::Quadratic(q) => {
            for (name, m) in [("a_f", &q.a_f), ("a_g", &q.a_g), ("b_g", &q.b_g)] {
                out.push_str(&format!("matrix {name} {} {}\n", m.rows(), m.cols()));
                for i in 0..m.rows() {
                    out.push_str(&fmt_row(m.row(i)));
                    out.push('\n');
                }
            }
            out.push_str(&format!("vector c_f {}\n", q.c_f.len()));
            out.push_str(&fmt_row(&q.c_f));
            out.push('\n');
        }
        Problem::MexicanHat(h) => {
            out.push_str("vector linear_coeff 2\n");
            out.push_str(&fmt_row(&h.linear_coeff));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn next_tokens(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (idx, line) in self.lines.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            return Ok((idx + 1, line.split_whitespace().collect()));
        }
        Err(Error::InvalidInput("unexpected end of problem file".into()))
    }
}

fn parse_f64(token: &str, line: usize) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse number `{token}`")))
}

fn parse_usize(token: &str, line: usize) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse integer `{token}`")))
}

/// Parse the structured text format written by [`problem_to_text`].
pub fn problem_from_text(text: &str) -> Result<(Problem, ProblemMeta)> {
    let mut reader = LineReader {
        lines: text.lines().enumerate(),
    };
    let (line, header) = reader.next_tokens()?;
    if header != ["format", "bgs-problem", "1"] {
        return Err(Error::InvalidInput(format!(
            "line {line}: expected `format bgs-problem 1` header"
        )));
    }
    let mut family: Option<String> = None;
    let mut dims: (Option<usize>, Option<usize>) = (None, None);
    let mut meta = ProblemMeta::default();
    let mut matrices: Vec<(String, Mat)> = Vec::new();
    let mut vectors: Vec<(String, Vec<f64>)> = Vec::new();
    loop {
        let (line, tokens) = reader.next_tokens()?;
        match tokens[0] {
            "end" => break,
            "family" if tokens.len() == 2 => family = Some(tokens[1].to_string()),
            "dim_x" if tokens.len() == 2 => dims.0 = Some(parse_usize(tokens[1], line)?),
            "dim_y" if tokens.len() == 2 => dims.1 = Some(parse_usize(tokens[1], line)?),
            "seed" if tokens.len() == 2 => {
                meta.seed = Some(tokens[1].parse().map_err(|_| {
                    Error::InvalidInput(format!("line {line}: bad seed `{}`", tokens[1]))
                })?)
            }
            "cond" if tokens.len() == 2 => meta.cond = Some(parse_f64(tokens[1], line)?),
            "null_dim" if tokens.len() == 2 => meta.null_dim = Some(parse_usize(tokens[1], line)?),
            "lambda_max" if tokens.len() == 2 => {
                meta.lambda_max = Some(parse_f64(tokens[1], line)?)
            }
            "matrix" if tokens.len() == 4 => {
                let name = tokens[1].to_string();
                let rows = parse_usize(tokens[2], line)?;
                let cols = parse_usize(tokens[3], line)?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (rline, row) = reader.next_tokens()?;
                    if row.len() != cols {
                        return Err(Error::InvalidInput(format!(
                            "line {rline}: expected {cols} entries, got {}",
                            row.len()
                        )));
                    }
                    for tok in row {
                        data.push(parse_f64(tok, rline)?);
                    }
                }
                matrices.push((name, Mat::from_rows(rows, cols, &data)));
            }
            "vector" if tokens.len() == 3 => {
                let name = tokens[1].to_string();
                let len = parse_usize(tokens[2], line)?;
                let (vline, row) = reader.next_tokens()?;
                if row.len() != len {
                    return Err(Error::InvalidInput(format!(
                        "line {vline}: expected {len} entries, got {}",
                        row.len()
                    )));
                }
                let mut v = Vec::with_capacity(len);
                for tok in row {
                    v.push(parse_f64(tok, vline)?);
                }
                vectors.push((name, v));
            }
            other => {
                return Err(Error::InvalidInput(format!(
                    "line {line}: unknown key `{other}`"
                )));
            }
        }
    }
    let family =
        family.ok_or_else(|| Error::InvalidInput("problem file is missing `family`".into()))?;
    let take_mat = |name: &str, matrices: &mut Vec<(String, Mat)>| -> Result<Mat> {
        matrices
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| matrices.remove(i).1)
            .ok_or_else(|| Error::InvalidInput(format!("missing matrix `{name}`")))
    };
    let take_vec = |name: &str, vectors: &mut Vec<(String, Vec<f64>)>| -> Result<Vec<f64>> {
        vectors
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| vectors.remove(i).1)
            .ok_or_else(|| Error::InvalidInput(format!("missing vector `{name}`")))
    };
    let problem = match family.as_str() {
        "quadratic" => {
            let a_f = take_mat("a_f", &mut matrices)?;
            let a_g = take_mat("a_g", &mut matrices)?;
            let b_g = take_mat("b_g", &mut matrices)?;
            let c_f = take_vec("c_f", &mut vectors)?;
            Problem::Quadratic(QuadraticBilevel::new(a_f, a_g, b_g, c_f)?)
        }
        "mexican_hat" => {
            let c = take_vec("linear_coeff", &mut vectors)?;
            if c.len() != 2 {
                return Err(Error::InvalidInput(
                    "linear_coeff must have length 2".into(),
                ));
            }
            Problem::MexicanHat(MexicanHatProblem::new([c[0], c[1]]))
        }
        other => {
            return Err(Error::InvalidInput(format!("unknown family `{other}`")));
        }
    };
    if let (Some(dx), Some(dy)) = dims {
        let p = problem.oracle();
        if p.dim_x() != dx || p.dim_y() != dy {
            return Err(Error::InvalidInput(format!(
                "declared dims {dx}x{dy} do not match data ({}x{})",
                p.dim_x(),
                p.dim_y()
            )));
        }
    }
    Ok((problem, meta))
}

/// Seeded Gaussian initialization for `(x0, y0)`, derived from a base seed
/// with a fixed offset so problem generation and initialization never share
/// a stream.
pub fn gaussian_init(p: &dyn ProblemOracle, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = linalg::seeded_rng(seed ^ 0x5851_f42d_4c95_7f2d);
    let x = linalg::gaussian_vec(&mut rng, p.dim_x());
    let y = linalg::gaussian_vec(&mut rng, p.dim_y());
    (x, y)
}

/// Uniform sample in a product of balls around `(x0, y0)`.
pub fn product_ball_sample<R: Rng>(
    rng: &mut R,
    x0: &[f64],
    y0: &[f64],
    radius: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dx = linalg::uniform_ball(rng, x0.len(), radius);
    let dy = linalg::uniform_ball(rng, y0.len(), radius);
    (linalg::add(x0, &dx), linalg::add(y0, &dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::seeded_rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    pub(crate) fn scalar_quadratic() -> QuadraticBilevel {
        // A_f = 1, C_f = 1, A_g = 2, B_g = 1 (B_g = A_g · 0.5).
        QuadraticBilevel::new(
            Mat::diag(&[1.0]),
            Mat::diag(&[2.0]),
            Mat::from_rows(1, 1, &[1.0]),
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_quadratic_first_order() {
        let q = scalar_quadratic();
        let fo = oracle_first_order(&q, &[0.0], &[1.0]).unwrap();
        assert_close(fo.upper, 1.0, 1e-15);
        assert_close(fo.grad_upper_x[0], 0.0, 1e-15);
        assert_close(fo.grad_upper_y[0], 1.0, 1e-15);
        assert_close(fo.lower, 1.0, 1e-15);
        assert_close(fo.grad_lower_y[0], 2.0, 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let q = scalar_quadratic();
        assert!(matches!(
            oracle_first_order(&q, &[0.0, 1.0], &[1.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            oracle_hvp_yy(&q, &[0.0], &[1.0], &[1.0, 2.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn hat_on_critical_circle() {
        let hat = MexicanHatProblem::new([0.5, 0.3]);
        let fo = oracle_first_order(&hat, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_close(fo.lower, 0.0, 1e-15);
        assert_close(norm(&fo.grad_lower_y), 0.0, 1e-15);
    }

    #[test]
    fn hat_off_circle_gradient() {
        let hat = MexicanHatProblem::new([0.5, 0.3]);
        let fo = oracle_first_order(&hat, &[0.0, 0.0], &[2.0, 0.0]).unwrap();
        assert_close(fo.lower, 2.25, 1e-15);
        assert_close(fo.grad_lower_y[0], 6.0, 1e-15);
        assert_close(fo.grad_lower_y[1], 0.0, 1e-15);
    }

    #[test]
    fn hat_hessian_products_at_circle_point() {
        let hat = MexicanHatProblem::new([0.5, 0.3]);
        let x = [0.0, 0.0];
        let y = [1.0, 0.0];
        let radial = oracle_hvp_yy(&hat, &x, &y, &[1.0, 0.0]).unwrap();
        assert_close(radial[0], 2.0, 1e-15);
        assert_close(radial[1], 0.0, 1e-15);
        let tangent = oracle_hvp_yy(&hat, &x, &y, &[0.0, 1.0]).unwrap();
        assert_close(norm(&tangent), 0.0, 1e-15);
        let cross = oracle_hvp_xy(&hat, &x, &y, &[1.0, 0.0]).unwrap();
        assert_close(cross[0], -2.0, 1e-15);
        assert_close(cross[1], 0.0, 1e-15);
    }

    #[test]
    fn scalar_quadratic_hvps() {
        let q = scalar_quadratic();
        assert_close(
            oracle_hvp_yy(&q, &[0.3], &[0.7], &[1.0]).unwrap()[0],
            2.0,
            1e-15,
        );
        assert_close(
            oracle_hvp_xy(&q, &[0.3], &[0.7], &[1.0]).unwrap()[0],
            1.0,
            1e-15,
        );
        let zero = oracle_hvp_xy(&q, &[0.3], &[0.7], &[0.0]).unwrap();
        assert_eq!(zero, vec![0.0]);
    }

    #[test]
    fn scalar_closed_forms() {
        let q = scalar_quadratic();
        let cf = quadratic_closed_forms(&q, &[0.0], &[3.7]).unwrap();
        assert_close(cf.optimum_x[0], 0.5, 1e-14);
        assert_close(cf.selection[0], 0.0, 1e-14);
        // Gradient vanishes at the optimum.
        let at_star = quadratic_closed_forms(&q, &cf.optimum_x, &[0.0]).unwrap();
        assert!(norm(&at_star.selection_gradient_x) <= 1e-12);
    }

    #[test]
    fn degenerate_closed_forms() {
        // A_g = diag(2, 0), B_g = (1, 0)ᵀ, A_f = a, C_f = (c1, c2).
        let a = 0.8;
        let (c1, c2) = (0.4, -0.7);
        let q = QuadraticBilevel::new(
            Mat::diag(&[a]),
            Mat::diag(&[2.0, 0.0]),
            Mat::from_rows(2, 1, &[1.0, 0.0]),
            vec![c1, c2],
        )
        .unwrap();
        let cf = quadratic_closed_forms(&q, &[0.6], &[5.0, 9.0]).unwrap();
        assert_close(cf.optimum_x[0], c1 / (2.0 * a), 1e-14);
        assert_close(cf.selection[0], -0.3, 1e-14);
        assert_close(cf.selection[1], 9.0, 1e-14);
    }

    #[test]
    fn generated_instance_satisfies_range_condition() {
        let q = quadratic_generate(200, 100, 10, 10.0, 0.99, 0).unwrap();
        let mut residual_sq = 0.0;
        for j in 0..200 {
            let col = q.b_g.col(j);
            let proj = range_project(q.eig_ag(), &col, DEFAULT_RANK_TOL);
            let r = sub(&col, &proj);
            residual_sq += dot(&r, &r);
        }
        assert!(
            residual_sq.sqrt() <= 1e-10,
            "residual {}",
            residual_sq.sqrt()
        );
        assert!(q.smoothness_bound() > 0.0);
        assert!(q.b_g.op_norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn generate_one_dimensional_forced_spectrum() {
        let q = quadratic_generate(1, 1, 0, 1.0, 1.0, 3).unwrap();
        assert_close(q.a_g[(0, 0)], 1.0, 1e-12);
        assert_close(q.a_f[(0, 0)], 1.0, 1e-12);
    }

    #[test]
    fn generate_rejects_bad_dims() {
        assert!(quadratic_generate(2, 2, 2, 10.0, 1.0, 0).is_err());
        assert!(quadratic_generate(2, 2, 0, 10.0, 1.5, 0).is_err());
    }

    #[test]
    fn selection_axioms_at_closed_form() {
        let q = quadratic_generate(20, 12, 3, 10.0, 0.99, 1).unwrap();
        let mut rng = seeded_rng(2);
        for _ in 0..5 {
            let x = linalg::gaussian_vec(&mut rng, 20);
            let y = linalg::gaussian_vec(&mut rng, 12);
            let phi = q.selection(&x, &y);
            // Criticality.
            assert!(norm(&q.grad_lower_y(&x, &phi)) <= 1e-10);
            // Self-consistency: a critical point maps to itself.
            let phi2 = q.selection(&x, &phi);
            assert!(norm(&sub(&phi2, &phi)) <= 1e-10);
        }
    }

    #[test]
    fn hat_circle_points_are_critical() {
        let hat = MexicanHatProblem::new([0.2, 0.1]);
        let mut rng = seeded_rng(4);
        for _ in 0..10 {
            let x = linalg::gaussian_vec(&mut rng, 2);
            let y = linalg::gaussian_vec(&mut rng, 2);
            if norm(&sub(&y, &x)) < 1e-9 {
                continue;
            }
            let c = hat.circle_point(&x, &y).unwrap();
            assert!(norm(&hat.grad_lower_y(&x, &c)) <= 1e-12);
            assert!(hat.lower_value(&x, &c).abs() <= 1e-24);
        }
    }

    #[test]
    fn hessian_products_are_symmetric() {
        let q = quadratic_generate(8, 6, 2, 5.0, 0.9, 7).unwrap();
        let hat = MexicanHatProblem::new([0.5, 0.3]);
        let mut rng = seeded_rng(8);
        for _ in 0..10 {
            let xq = linalg::gaussian_vec(&mut rng, 8);
            let yq = linalg::gaussian_vec(&mut rng, 6);
            let u = linalg::gaussian_vec(&mut rng, 6);
            let v = linalg::gaussian_vec(&mut rng, 6);
            let lhs = dot(&u, &q.hvp_yy(&xq, &yq, &v));
            let rhs = dot(&v, &q.hvp_yy(&xq, &yq, &u));
            assert_close(lhs, rhs, 1e-9 * lhs.abs().max(1.0));

            let xh = linalg::gaussian_vec(&mut rng, 2);
            let yh = linalg::gaussian_vec(&mut rng, 2);
            let u2 = linalg::gaussian_vec(&mut rng, 2);
            let v2 = linalg::gaussian_vec(&mut rng, 2);
            let lhs = dot(&u2, &hat.hvp_yy(&xh, &yh, &v2));
            let rhs = dot(&v2, &hat.hvp_yy(&xh, &yh, &u2));
            assert_close(lhs, rhs, 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn smoothness_bound_holds_on_samples() {
        let q = quadratic_generate(10, 8, 2, 10.0, 0.99, 5).unwrap();
        let hat = MexicanHatProblem::new([0.5, 0.3]);
        let mut rng = seeded_rng(9);
        for _ in 0..20 {
            let x = linalg::gaussian_vec(&mut rng, 10);
            let y1 = linalg::gaussian_vec(&mut rng, 8);
            let y2 = linalg::gaussian_vec(&mut rng, 8);
            let dg = sub(&q.grad_lower_y(&x, &y1), &q.grad_lower_y(&x, &y2));
            assert!(norm(&dg) <= q.smoothness_bound() * norm(&sub(&y1, &y2)) + 1e-12);

            // Hat samples stay inside the working region (‖y − x‖ ≤ 2.1).
            let xh = linalg::scaled(0.1, &linalg::gaussian_vec(&mut rng, 2));
            let yh1 = linalg::uniform_ball(&mut rng, 2, 1.8);
            let yh2 = linalg::uniform_ball(&mut rng, 2, 1.8);
            let dg = sub(&hat.grad_lower_y(&xh, &yh1), &hat.grad_lower_y(&xh, &yh2));
            assert!(norm(&dg) <= hat.smoothness_bound() * norm(&sub(&yh1, &yh2)) + 1e-12);
        }
    }

    #[test]
    fn dense_blocks_match_structure() {
        let q = quadratic_generate(5, 4, 1, 4.0, 0.9, 11).unwrap();
        let x = vec![0.1; 5];
        let y = vec![-0.2; 4];
        let h = dense_hessian_yy(&q, &x, &y).unwrap();
        let mut diff = h.clone();
        diff.add_scaled(-1.0, &q.a_g);
        assert!(diff.frob_norm() <= 1e-14);
        let b = dense_cross_yx(&q, &x, &y).unwrap();
        let mut bdiff = b.clone();
        bdiff.add_scaled(-1.0, &q.b_g);
        assert!(bdiff.frob_norm() <= 1e-14);
    }

    #[test]
    fn serialization_round_trips_quadratic() {
        let q = quadratic_generate(6, 4, 1, 7.0, 0.95, 21).unwrap();
        let meta = ProblemMeta {
            seed: Some(21),
            cond: Some(7.0),
            null_dim: Some(1),
            lambda_max: Some(0.95),
        };
        let text = problem_to_text(&Problem::Quadratic(q.clone()), &meta);
        let (parsed, meta2) = problem_from_text(&text).unwrap();
        assert_eq!(meta, meta2);
        match parsed {
            Problem::Quadratic(q2) => {
                assert_eq!(q.a_f.data(), q2.a_f.data());
                assert_eq!(q.a_g.data(), q2.a_g.data());
                assert_eq!(q.b_g.data(), q2.b_g.data());
                assert_eq!(q.c_f, q2.c_f);
            }
            _ => panic!("family changed through round trip"),
        }
    }

    #[test]
    fn serialization_round_trips_hat() {
        let hat = MexicanHatProblem::new([0.25, -0.75]);
        let text = problem_to_text(&Problem::MexicanHat(hat), &ProblemMeta::default());
        let (parsed, _) = problem_from_text(&text).unwrap();
        match parsed {
            Problem::MexicanHat(h) => assert_eq!(h.linear_coeff, [0.25, -0.75]),
            _ => panic!("family changed through round trip"),
        }
    }

    #[test]
    fn serialization_rejects_unknown_key() {
        let text = "format bgs-problem 1\nfamily quadratic\nbogus 3\nend\n";
        let err = problem_from_text(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn range_defect_problem_shape() {
        let p = RangeDefectProblem;
        assert_eq!(p.grad_lower_y(&[0.0], &[0.0, 5.0]), vec![0.0, 0.0]);
        let b = dense_cross_yx(&p, &[0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((b[(0, 0)], b[(1, 0)]), (0.0, 1.0));
    }
}
