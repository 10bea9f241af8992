//! Dense small-matrix kernels shared by the rest of the crate: the matrix
//! exponential, a jittered Cholesky square root, SPD solves and chi-square
//! quantiles.
//!
//! Everything here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Numerical tolerances used across the kernels, gathered in one record so
/// tests can refer to the same values the code uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Symmetry slack relative to the largest absolute entry.
    pub symmetry: f64,
    /// Allowed negative eigenvalue, relative to the trace.
    pub psd_slack: f64,
    /// Diagonal jitter added before retrying Cholesky, relative to trace/n.
    pub jitter: f64,
    /// Target relative accuracy of `expm` on well-conditioned inputs.
    pub expm_relative: f64,
    /// Target relative residual of `spd_solve`.
    pub solve_residual: f64,
    /// Target absolute accuracy of `chi2_quantile`.
    pub chi2_absolute: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    symmetry: 1e-9,
    psd_slack: 1e-10,
    jitter: 1e-12,
    expm_relative: 1e-12,
    solve_residual: 1e-10,
    chi2_absolute: 1e-6,
};

/// A symmetric positive-semidefinite matrix.
///
/// `new` validates symmetry and the eigenvalue slack; `symmetrized` only
/// forces exact symmetry and is what the filter uses after each update.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let scale = m.amax();
        let asym = (&m - m.transpose()).amax();
        if asym > TOLERANCES.symmetry * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::OutOfRange(format!(
                "covariance asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        let sym = symmetrize(&m);
        let min_eig = min_eigenvalue(&sym);
        if min_eig < -TOLERANCES.psd_slack * sym.trace().abs() {
            return Err(Error::Indefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(SpdMatrix(sym))
    }

    pub fn symmetrized(m: Matrix) -> Self {
        SpdMatrix(symmetrize(&m))
    }

    pub fn identity(n: usize, scale: f64) -> Self {
        SpdMatrix(Matrix::identity(n, n) * scale)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SpdMatrix(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    pub fn zeros(n: usize) -> Self {
        SpdMatrix(Matrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn diagonal(&self) -> Vector {
        self.0.diagonal()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Block-diagonal `diag(self, other)`.
    pub fn block_diag(&self, other: &SpdMatrix) -> SpdMatrix {
        let (a, b) = (self.dim(), other.dim());
        let mut m = Matrix::zeros(a + b, a + b);
        m.view_mut((0, 0), (a, a)).copy_from(&self.0);
        m.view_mut((a, a), (b, b)).copy_from(&other.0);
        SpdMatrix(m)
    }
}

/// `(M + Mᵀ)/2`; exactly symmetric.
pub fn symmetrize(m: &Matrix) -> Matrix {
    let mut s = m.clone();
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

fn min_eigenvalue(sym: &Matrix) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    sym.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn one_norm(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Padé coefficients b_0..b_m for degrees 3, 5, 7, 9, 13 and the matching
// 1-norm thresholds theta_m (Higham 2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with Padé approximants of
/// degree 3..13, degree 13 plus scaling once the 1-norm exceeds θ₉.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expm needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expm input"));
    }
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    if n == 0 {
        return Ok(ident);
    }
    let norm = one_norm(a);

    for &(deg, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match deg {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            let (u, v) = pade_low(a, coeffs, &ident);
            return pade_solve(&u, &v, norm, 0);
        }
    }

    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-(squarings as i32));
    let (u, v) = pade13(&scaled, &ident);
    let mut r = pade_solve(&u, &v, norm, squarings)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::ExpmOverflow { norm, squarings });
    }
    Ok(r)
}

/// Diagonal similarity `D⁻¹·A·D` with power-of-two `D` that roughly
/// equalizes off-diagonal row and column 1-norms (Parlett-Reinsch).
/// Returns the balanced matrix and `diag(D)`; the scaling is exact.
pub fn balance(a: &Matrix) -> (Matrix, Vector) {
    const RADIX: f64 = 2.0;
    let n = a.nrows();
    let mut b = a.clone();
    let mut d = Vector::from_element(n, 1.0);
    for _ in 0..100 {
        let mut done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                c += b[(j, i)].abs();
                r += b[(i, j)].abs();
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let total = c + r;
            let mut f = 1.0;
            while c < r / RADIX {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            while c > r * RADIX {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * total {
                done = false;
                d[i] *= f;
                for j in 0..n {
                    b[(i, j)] /= f;
                    b[(j, i)] *= f;
                }
            }
        }
        if done {
            break;
        }
    }
    (b, d)
}

// Taylor degree for φ₁ once the argument is scaled to a 1-norm of at most
// PHI_SCALED_NORM; the truncation error is below 1e-19.
const PHI_TAYLOR_DEGREE: usize = 15;
const PHI_SCALED_NORM: f64 = 0.5;
const PS_BLOCK: usize = 4;

/// `Σ_k c_k X^k` by Paterson-Stockmeyer with blocks of `PS_BLOCK` terms.
fn poly_ps(x: &Matrix, c: &[f64]) -> Matrix {
    let n = x.nrows();
    let mut powers = vec![Matrix::identity(n, n), x.clone()];
    for k in 2..=PS_BLOCK {
        let next = &powers[k - 1] * x;
        powers.push(next);
    }
    let block = |j: usize| {
        let mut acc = Matrix::zeros(n, n);
        for (i, p) in powers.iter().take(PS_BLOCK).enumerate() {
            if let Some(ck) = c.get(j * PS_BLOCK + i) {
                acc += p * *ck;
            }
        }
        acc
    };
    let blocks = c.len().div_ceil(PS_BLOCK);
    let mut acc = block(blocks - 1);
    for j in (0..blocks - 1).rev() {
        acc = acc * &powers[PS_BLOCK] + block(j);
    }
    acc
}

/// `(e^A, φ₁(A))` with `φ₁(A) = Σ_k A^k/(k+1)!`, by Taylor on the balanced
/// and scaled `A/2^s` followed by `e^{2X} = (e^X)²` and
/// `φ₁(2X) = ½(e^X + I)·φ₁(X)`.
///
/// These are the leading blocks of `exp([[A, I], [0, 0]])`, obtained with
/// `n`-square products only.
pub fn expm_phi1(a: &Matrix) -> Result<(Matrix, Matrix)> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expm_phi1 needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expm_phi1 input"));
    }
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    if n == 0 {
        return Ok((ident.clone(), ident));
    }
    let (b, d) = balance(a);
    let norm = one_norm(&b);
    let squarings = if norm > PHI_SCALED_NORM {
        (norm / PHI_SCALED_NORM).log2().ceil() as u32
    } else {
        0
    };
    let x = b * 2f64.powi(-(squarings as i32));
    let mut coeffs = vec![1.0; PHI_TAYLOR_DEGREE + 1];
    let mut fact = 1.0;
    for (k, c) in coeffs.iter_mut().enumerate() {
        fact *= (k + 1) as f64;
        *c = 1.0 / fact;
    }
    let mut phi = poly_ps(&x, &coeffs);
    let mut e = &x * &phi + &ident;
    for _ in 0..squarings {
        let mut half = e.clone();
        for i in 0..n {
            half[(i, i)] += 1.0;
        }
        phi = (half * phi) * 0.5;
        e = &e * &e;
    }
    if e.iter().chain(phi.iter()).any(|v| !v.is_finite()) {
        return Err(Error::ExpmOverflow { norm, squarings });
    }
    let unbalance = |m: Matrix| Matrix::from_fn(n, n, |i, j| m[(i, j)] * d[i] / d[j]);
    Ok((unbalance(e), unbalance(phi)))
}

fn pade_low(a: &Matrix, b: &[f64], ident: &Matrix) -> (Matrix, Matrix) {
    let a2 = a * a;
    let mut u = ident * b[1];
    let mut v = ident * b[0];
    let mut power = ident.clone();
    let mut k = 2;
    while k < b.len() {
        power = &power * &a2;
        v += &power * b[k];
        u += &power * b[k + 1];
        k += 2;
    }
    (a * u, v)
}

fn pade13(a: &Matrix, ident: &Matrix) -> (Matrix, Matrix) {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a * (&a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + ident * b[1]);
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    (u, v)
}

fn pade_solve(u: &Matrix, v: &Matrix, norm: f64, squarings: u32) -> Result<Matrix> {
    let denom = v - u;
    let numer = v + u;
    let r = denom
        .lu()
        .solve(&numer)
        .ok_or(Error::Singular("Padé denominator"))?;
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::ExpmOverflow { norm, squarings });
    }
    Ok(r)
}

/// Strict Cholesky; `None` on a non-positive pivot.
fn cholesky_lower(m: &Matrix) -> Option<Matrix> {
    let n = m.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Lower-triangular `L` with `L·Lᵀ = P`.
///
/// A failed factorization is retried with diagonal jitter starting at
/// `1e-12·trace/n`, growing tenfold up to the PSD slack. A matrix whose
/// smallest eigenvalue is below `-psd_slack·trace` is rejected.
pub fn spd_sqrt(p: &SpdMatrix) -> Result<Matrix> {
    let m = p.as_matrix();
    let n = m.nrows();
    if let Some(l) = cholesky_lower(m) {
        return Ok(l);
    }
    let trace = m.trace();
    if trace == 0.0 && m.iter().all(|v| *v == 0.0) {
        return Ok(Matrix::zeros(n, n));
    }
    let min_eig = min_eigenvalue(m);
    if min_eig < -TOLERANCES.psd_slack * trace.abs() {
        return Err(Error::Indefinite {
            min_eigenvalue: min_eig,
        });
    }
    let mut eps = TOLERANCES.jitter * trace.abs() / n as f64;
    let limit = TOLERANCES.psd_slack * trace.abs() * 10.0;
    while eps <= limit {
        let mut jittered = m.clone();
        for i in 0..n {
            jittered[(i, i)] += eps;
        }
        if let Some(l) = cholesky_lower(&jittered) {
            return Ok(l);
        }
        eps *= 10.0;
    }
    Err(Error::Indefinite {
        min_eigenvalue: min_eig,
    })
}

/// Solves `P·X = B` through the Cholesky factor of `P`.
pub fn spd_solve(p: &SpdMatrix, b: &Matrix) -> Result<Matrix> {
    let n = p.dim();
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "spd_solve: P is {n}x{n} but B has {} rows",
            b.nrows()
        )));
    }
    let l = spd_sqrt(p)?;
    let diag_max = l.diagonal().amax();
    let diag_min = l.diagonal().iter().copied().fold(f64::INFINITY, f64::min);
    if n > 0 && (diag_max == 0.0 || (diag_min / diag_max).powi(2) < 1e-15) {
        return Err(Error::Singular("spd_solve"));
    }
    let y = l
        .solve_lower_triangular(b)
        .ok_or(Error::Singular("spd_solve forward substitution"))?;
    l.transpose()
        .solve_upper_triangular(&y)
        .ok_or(Error::Singular("spd_solve back substitution"))
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut k = a;
        for _ in 0..1000 {
            k += 1.0;
            term *= x / k;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum * log_prefix.exp()).min(1.0)
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - log_prefix.exp() * h).max(0.0)
    }
}

/// CDF of the chi-square distribution with `dof` degrees of freedom.
pub fn chi2_cdf(dof: u32, x: f64) -> f64 {
    gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Inverse chi-square CDF by bisection.
pub fn chi2_quantile(dof: u32, q: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::OutOfRange("chi-square dof must be >= 1".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::OutOfRange(format!(
            "chi-square probability {q} not in (0, 1)"
        )));
    }
    let mut lo = 0.0;
    let mut hi = (dof as f64).max(1.0);
    while chi2_cdf(dof, hi) < q {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(dof, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
