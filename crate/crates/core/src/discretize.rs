//! One-step schemes: explicit RK4 and its absolute-stability analysis,
//! backward Euler solved by Newton, and the exact exponential map of a
//! linear surrogate with piecewise-constant input and offset.

use std::fmt::Write as _;

use nalgebra::{Complex, Schur};

use crate::error::{Error, Result};
use crate::models::{numerical_jacobian, Dynamics};
use crate::numkit::{expm, expm_phi1, Matrix, Vector};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

/// Exact discrete propagator `x_k = Φ x_{k-1} + Γ u_{k-1} + Λ d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMap {
    pub phi: Matrix,
    pub gamma: Matrix,
    pub lambda: Matrix,
    pub h: f64,
}

impl DiscreteMap {
    pub fn apply(&self, x: &Vector, u: &Vector, d: &Vector) -> Vector {
        &self.phi * x + &self.gamma * u + &self.lambda * d
    }
}

fn check_finite(v: &Vector, stage: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Rk4Divergence { stage })
    }
}

/// Classical fourth-order Runge-Kutta step with the input held constant.
pub fn rk4_step<M: Dynamics + ?Sized>(model: &M, x: &Vector, u: &Vector, h: f64) -> Result<Vector> {
    if !(h > 0.0) {
        return Err(Error::OutOfRange(format!("step size must be > 0, got {h}")));
    }
    let k1 = model.f(x, u);
    check_finite(&k1, 1)?;
    let k2 = model.f(&(x + &k1 * (0.5 * h)), u);
    check_finite(&k2, 2)?;
    let k3 = model.f(&(x + &k2 * (0.5 * h)), u);
    check_finite(&k3, 3)?;
    let k4 = model.f(&(x + &k3 * h), u);
    check_finite(&k4, 4)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    check_finite(&next, 5)?;
    Ok(next)
}

/// `R(z) = 1 + z + z²/2 + z³/6 + z⁴/24`.
pub fn rk4_stability_fn(z: Complex<f64>) -> Complex<f64> {
    let one = Complex::new(1.0, 0.0);
    // Horner form.
    one + z * (one + z * (one / 2.0 + z * (one / 6.0 + z / 24.0)))
}

pub fn in_rk4_region(z: Complex<f64>) -> bool {
    rk4_stability_fn(z).norm() <= 1.0
}

/// Jacobian spectrum at an operating point and its RK4 stability picture at step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub h: f64,
    pub scaled: Vec<Complex<f64>>,
    pub abs_r: Vec<f64>,
    pub inside: Vec<bool>,
    pub all_stable: bool,
}

impl StabilityReport {
    pub fn from_eigenvalues(eigenvalues: Vec<Complex<f64>>, h: f64) -> Self {
        let scaled: Vec<_> = eigenvalues.iter().map(|l| l * h).collect();
        let abs_r: Vec<f64> = scaled.iter().map(|z| rk4_stability_fn(*z).norm()).collect();
        let inside: Vec<bool> = abs_r.iter().map(|r| *r <= 1.0).collect();
        let all_stable = inside.iter().all(|b| *b);
        StabilityReport {
            eigenvalues,
            h,
            scaled,
            abs_r,
            inside,
            all_stable,
        }
    }

    /// Eigenvalue with the largest modulus.
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("re_lambda,im_lambda,re_hlambda,im_hlambda,abs_R,inside\n");
        for i in 0..self.eigenvalues.len() {
            let (l, z) = (self.eigenvalues[i], self.scaled[i]);
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                l.re, l.im, z.re, z.im, self.abs_r[i], self.inside[i]
            );
        }
        out
    }
}

/// Eigenvalues of a real square matrix, sorted by real part then imaginary part.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000).ok_or(Error::Eigen)?;
    let mut eig: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    if eig.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Eigen);
    }
    eig.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(eig)
}

pub fn stability_report<M: Dynamics + ?Sized>(
    model: &M,
    x_op: &Vector,
    u_op: &Vector,
    h: f64,
) -> Result<StabilityReport> {
    if !(h > 0.0) {
        return Err(Error::OutOfRange(format!("step size must be > 0, got {h}")));
    }
    let jac = numerical_jacobian(model, x_op, u_op);
    Ok(StabilityReport::from_eigenvalues(eigenvalues(&jac)?, h))
}

/// Points approximating the curve `|R(z)| = 1` on a `res × res` grid over
/// `[-4, 1] × [-4i, 4i]`: cell centres where `|R| - 1` changes sign.
pub fn rk4_boundary(res: usize) -> Vec<(f64, f64)> {
    let (re0, re1, im0, im1) = (-4.0, 1.0, -4.0, 4.0);
    let dre = (re1 - re0) / (res - 1) as f64;
    let dim = (im1 - im0) / (res - 1) as f64;
    let g = |i: usize, j: usize| {
        rk4_stability_fn(Complex::new(re0 + i as f64 * dre, im0 + j as f64 * dim)).norm() - 1.0
    };
    let mut prev_row: Vec<f64> = (0..res).map(|j| g(0, j)).collect();
    let mut pts = Vec::new();
    for i in 1..res {
        let row: Vec<f64> = (0..res).map(|j| g(i, j)).collect();
        for j in 1..res {
            let corners = [prev_row[j - 1], prev_row[j], row[j - 1], row[j]];
            let pos = corners.iter().any(|v| *v > 0.0);
            let neg = corners.iter().any(|v| *v <= 0.0);
            if pos && neg {
                pts.push((
                    re0 + (i as f64 - 0.5) * dre,
                    im0 + (j as f64 - 0.5) * dim,
                ));
            }
        }
        prev_row = row;
    }
    pts
}

/// Backward Euler `x = x_prev + h f(x, u)` by Newton from `x_prev`, with the
/// forward-difference Jacobian refreshed every iteration.
///
/// Returns the converged state and the number of Newton updates taken.
pub fn backward_euler_step<M: Dynamics + ?Sized>(
    model: &M,
    x_prev: &Vector,
    u: &Vector,
    h: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(Vector, usize)> {
    if !(h > 0.0) {
        return Err(Error::OutOfRange(format!("step size must be > 0, got {h}")));
    }
    if !(tol > 0.0) {
        return Err(Error::OutOfRange(format!("Newton tolerance must be > 0, got {tol}")));
    }
    let n = x_prev.len();
    let ident = Matrix::identity(n, n);
    let mut x = x_prev.clone();
    let mut residual = f64::INFINITY;
    for iter in 0..=max_iter {
        let r = &x - x_prev - model.f(&x, u) * h;
        residual = r.amax();
        if !residual.is_finite() {
            return Err(Error::NonFinite("backward Euler residual"));
        }
        if residual <= tol {
            return Ok((x, iter));
        }
        if iter == max_iter {
            break;
        }
        let newton = &ident - numerical_jacobian(model, &x, u) * h;
        let dx = newton
            .lu()
            .solve(&r)
            .ok_or(Error::Singular("backward Euler Newton matrix"))?;
        x -= dx;
    }
    Err(Error::NewtonFailed {
        iterations: max_iter,
        residual,
    })
}

fn check_surrogate(f: &Matrix, g: &Matrix, h: f64) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::OutOfRange(format!("step size must be > 0, got {h}")));
    }
    if !f.is_square() || g.nrows() != f.nrows() {
        return Err(Error::Dimension(format!(
            "F is {}x{}, G is {}x{}",
            f.nrows(),
            f.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    Ok(())
}

/// Exact discretization of `ẋ = F x + G u + d` over `h`: the blocks
/// `Φ = e^{hF}`, `Λ = ∫₀ʰ e^{Fs} ds` and `Γ = Λ G` of the exponential of
/// the augmented generator `[[F, G, I], [0, 0, 0], [0, 0, 0]]`.
pub fn exp_discretize(f: &Matrix, g: &Matrix, h: f64) -> Result<DiscreteMap> {
    check_surrogate(f, g, h)?;
    let (phi, phi1) = expm_phi1(&(f * h))?;
    let lambda = phi1 * h;
    Ok(DiscreteMap {
        phi,
        gamma: &lambda * g,
        lambda,
        h,
    })
}

/// Same map read off the full `(2n+m)`-square exponential of the augmented
/// generator. Slower; kept as a cross-check.
pub fn exp_discretize_augmented(f: &Matrix, g: &Matrix, h: f64) -> Result<DiscreteMap> {
    check_surrogate(f, g, h)?;
    let n = f.nrows();
    let m = g.ncols();
    let size = 2 * n + m;
    let mut xi = Matrix::zeros(size, size);
    xi.view_mut((0, 0), (n, n)).copy_from(&(f * h));
    xi.view_mut((0, n), (n, m)).copy_from(&(g * h));
    for i in 0..n {
        xi[(i, n + m + i)] = h;
    }
    let e = expm(&xi)?;
    Ok(DiscreteMap {
        phi: e.view((0, 0), (n, n)).into_owned(),
        gamma: e.view((0, n), (n, m)).into_owned(),
        lambda: e.view((0, n + m), (n, n)).into_owned(),
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FnModel, LinearModel};

    fn scalar(f: fn(f64) -> f64) -> FnModel {
        FnModel::new(
            1,
            1,
            1,
            move |x, _| Vector::from_element(1, f(x[0])),
            |x, _| x.clone(),
        )
    }

    fn one(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let m = scalar(|_| 0.0);
        assert_eq!(rk4_step(&m, &one(3.0), &one(0.0), 0.1).unwrap(), one(3.0));
    }

    #[test]
    fn rk4_decay_matches_stability_function() {
        let m = scalar(|x| -x);
        let x = rk4_step(&m, &one(1.0), &one(0.0), 0.1).unwrap();
        assert!((x[0] - 0.90483750).abs() < 1e-8);
        assert!((x[0] - rk4_stability_fn(Complex::new(-0.1, 0.0)).re).abs() < 1e-15);
    }

    #[test]
    fn rk4_stiff_growth() {
        let m = scalar(|x| -100.0 * x);
        let x = rk4_step(&m, &one(1.0), &one(0.0), 0.04).unwrap();
        assert!((x[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rk4_reports_divergent_stage() {
        let m = scalar(|x| if x > 1.0 { f64::INFINITY } else { 1.0 });
        match rk4_step(&m, &one(0.5), &one(0.0), 2.0) {
            Err(Error::Rk4Divergence { stage }) => assert_eq!(stage, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stability_function_values() {
        assert_eq!(rk4_stability_fn(Complex::new(0.0, 0.0)), Complex::new(1.0, 0.0));
        let r = rk4_stability_fn(Complex::new(-3.0, 0.0));
        assert!((r.re - 1.375).abs() < 1e-14 && r.im == 0.0);
        assert!(!in_rk4_region(Complex::new(-3.0, 0.0)));
    }

    #[test]
    fn real_axis_boundary() {
        // Bisection on |R(x)| = 1 for x in [-3, -2].
        let (mut lo, mut hi) = (-3.0, -2.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if in_rk4_region(Complex::new(mid, 0.0)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((hi - (-2.7853)).abs() < 1e-4, "boundary {hi}");
    }

    #[test]
    fn boundary_sampling_hits_real_axis_crossing() {
        let pts = rk4_boundary(200);
        assert!(!pts.is_empty());
        for (re, im) in &pts {
            let r = rk4_stability_fn(Complex::new(*re, *im)).norm();
            assert!((r - 1.0).abs() < 0.2, "({re}, {im}) -> {r}");
        }
        assert!(pts.iter().any(|(re, im)| (re + 2.785).abs() < 0.05 && im.abs() < 0.05));
    }

    #[test]
    fn tiny_step_is_always_inside() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![-1e4, -1.0, 0.0]));
        let m = LinearModel::new(a, Matrix::zeros(3, 1));
        let rep = stability_report(&m, &Vector::zeros(3), &one(0.0), 1e-9).unwrap();
        assert!(rep.all_stable);
        assert_eq!(rep.inside.len(), 3);
        let csv = rep.to_csv();
        assert!(csv.starts_with("re_lambda,im_lambda,re_hlambda,im_hlambda,abs_R,inside\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn backward_euler_examples() {
        let zero = scalar(|_| 0.0);
        let (x, it) = backward_euler_step(&zero, &one(2.0), &one(0.0), 0.1, NEWTON_TOL, 50).unwrap();
        assert_eq!((x[0], it), (2.0, 0));

        let stiff = scalar(|x| -100.0 * x);
        let (x, _) = backward_euler_step(&stiff, &one(1.0), &one(0.0), 0.04, NEWTON_TOL, 50).unwrap();
        assert!((x[0] - 0.2).abs() < 1e-10);

        // Oracle: bisection on y + 0.1 y³ = 1.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + 0.1 * mid.powi(3) < 1.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let cubic = scalar(|x| -x * x * x);
        let (x, _) = backward_euler_step(&cubic, &one(1.0), &one(0.0), 0.1, NEWTON_TOL, 50).unwrap();
        assert!((x[0] - lo).abs() < 1e-9);
        assert!((x[0] - 0.9217).abs() < 1e-4);
    }

    #[test]
    fn backward_euler_l_stable_at_extreme_stiffness() {
        for lambda in [-1.0, -1e3, -1e6] {
            let m = LinearModel::new(Matrix::from_element(1, 1, lambda), Matrix::zeros(1, 1));
            let (x, _) = backward_euler_step(&m, &one(1.0), &one(0.0), 0.01, NEWTON_TOL, 50).unwrap();
            let want = 1.0 / (1.0 - 0.01 * lambda);
            assert!((x[0] - want).abs() <= 1e-10, "lambda {lambda}: {} vs {want}", x[0]);
        }
    }

    #[test]
    fn backward_euler_reports_non_convergence() {
        let m = scalar(|x| x.exp());
        // y = 1 + 10 e^y has no real root.
        match backward_euler_step(&m, &one(1.0), &one(0.0), 10.0, NEWTON_TOL, 5) {
            Err(Error::NewtonFailed { iterations, residual }) => {
                assert_eq!(iterations, 5);
                assert!(residual > 0.0);
            }
            Err(Error::NonFinite(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exp_discretize_scalar() {
        let d = exp_discretize(&Matrix::from_element(1, 1, -1.0), &Matrix::from_element(1, 1, 1.0), 0.1).unwrap();
        let decay = (-0.1f64).exp();
        assert!((d.phi[(0, 0)] - decay).abs() < 1e-14);
        assert!((d.gamma[(0, 0)] - (1.0 - decay)).abs() < 1e-14);
        assert!((d.lambda[(0, 0)] - (1.0 - decay)).abs() < 1e-14);
        assert!((d.phi[(0, 0)] - 0.9048374).abs() < 1e-7);
        assert!((d.gamma[(0, 0)] - 0.0951626).abs() < 1e-7);
    }

    #[test]
    fn exp_discretize_integrator() {
        let d = exp_discretize(&Matrix::zeros(1, 1), &Matrix::from_element(1, 1, 2.0), 0.5).unwrap();
        assert!((d.phi[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((d.gamma[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((d.lambda[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_discretize_small_step_limit() {
        let f = Matrix::from_row_slice(2, 2, &[-3.0, 1.0, 0.5, -2.0]);
        let g = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let d = exp_discretize(&f, &g, 1e-12).unwrap();
        assert!((&d.phi - Matrix::identity(2, 2)).amax() < 1e-9);
        assert!(d.gamma.amax() < 1e-9 && d.lambda.amax() < 1e-9);
        for h in [1e-3, 1e-4] {
            let d = exp_discretize(&f, &g, h).unwrap();
            let first_order = Matrix::identity(2, 2) + &f * h;
            assert!((&d.phi - first_order).amax() < 10.0 * h * h);
        }
    }
}
