//! Quasicompressible pressure solve: `eps * lap(p) = rhs` with zero-flux
//! boundary closure and zero mean.
//!
//! The operator is the grid module's Neumann Laplacian — literally the
//! composition `div(grad(.))` — so a velocity corrected with the same
//! discrete gradient satisfies `div v = eps * lap p` to the tolerance of
//! this solve, with no additional discretization slack. The system is
//! symmetric positive semidefinite with the constants as kernel; conjugate
//! gradients run on the zero-mean complement, re-projecting every iterate
//! so round-off never accumulates along the kernel.

use std::fmt;

use crate::grid::{neumann_laplacian_apply, Field2, Grid};

/// Compatibility bound: a Neumann problem is only solvable for zero-mean
/// data, so a right-hand side whose mean exceeds this is rejected.
pub const COMPATIBILITY_TOL: f64 = 1e-8;

/// One pressure solve: `eps * lap(p) = rhs`.
#[derive(Debug, Clone)]
pub struct PressureProblem {
    pub epsilon: f64,
    pub rhs: Field2,
    /// Relative residual target: the solve stops once
    /// `||eps*lap(p) - rhs|| <= solver_tol * ||rhs||`.
    pub solver_tol: f64,
    pub max_iter: usize,
    /// Optional warm start; only its zero-mean part matters.
    pub initial: Option<Field2>,
}

impl PressureProblem {
    pub fn new(epsilon: f64, rhs: Field2, g: &Grid) -> PressureProblem {
        PressureProblem {
            epsilon,
            rhs,
            solver_tol: 1e-10,
            max_iter: 10 * (g.nx + g.ny).max(40),
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PressureError {
    /// Right-hand side has a mean component no Neumann solution can match.
    IncompatibleRhs { mean: f64 },
    NoConvergence { iterations: usize, residual: f64, target: f64 },
    BadEpsilon { epsilon: f64 },
}

impl fmt::Display for PressureError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PressureError::IncompatibleRhs { mean } => {
                write!(f, "pressure rhs is incompatible: mean {mean:.3e} exceeds {COMPATIBILITY_TOL:.0e}")
            }
            PressureError::NoConvergence { iterations, residual, target } => write!(
                f,
                "pressure solve stalled after {iterations} iterations: residual {residual:.3e} > target {target:.3e}"
            ),
            PressureError::BadEpsilon { epsilon } => {
                write!(f, "relaxation parameter must be positive, got {epsilon}")
            }
        }
    }
}

impl std::error::Error for PressureError {}

/// Converged pressure field with solve statistics.
#[derive(Debug, Clone)]
pub struct PressureSolution {
    pub p: Field2,
    pub iterations: usize,
    /// Final true residual `||eps*lap(p) - rhs||_2`.
    pub residual: f64,
}

fn true_residual(p: &Field2, epsilon: f64, rhs: &Field2, g: &Grid) -> f64 {
    let mut r = neumann_laplacian_apply(p, g);
    r.scale(epsilon);
    r.axpy(-1.0, rhs);
    r.dot(&r).sqrt()
}

/// Solves `eps * lap(p) = rhs`; the result has zero mean to 1e-12 and
/// satisfies the relative residual contract, which is re-verified on the
/// true residual before returning.
pub fn solve_pressure(prob: &PressureProblem, g: &Grid) -> Result<PressureSolution, PressureError> {
    if !(prob.epsilon > 0.0) {
        return Err(PressureError::BadEpsilon { epsilon: prob.epsilon });
    }
    let mean = prob.rhs.mean();
    if mean.abs() > COMPATIBILITY_TOL {
        return Err(PressureError::IncompatibleRhs { mean });
    }
    let rhs_norm = prob.rhs.dot(&prob.rhs).sqrt();
    if rhs_norm == 0.0 {
        return Ok(PressureSolution {
            p: Field2::new(g.nx, g.ny),
            iterations: 0,
            residual: 0.0,
        });
    }
    let target = prob.solver_tol * rhs_norm;

    // Work with the SPD form (-eps*lap) p = -rhs on the zero-mean subspace.
    let apply = |x: &Field2| -> Field2 {
        let mut y = neumann_laplacian_apply(x, g);
        y.scale(-prob.epsilon);
        y
    };
    let mut b = prob.rhs.clone();
    b.scale(-1.0);
    b.project_zero_mean();

    let mut x = match &prob.initial {
        Some(guess) => {
            debug_assert_eq!(guess.dims(), prob.rhs.dims());
            let mut x = guess.clone();
            x.project_zero_mean();
            x
        }
        None => Field2::new(g.nx, g.ny),
    };

    let mut r = b.clone();
    r.axpy(-1.0, &apply(&x));
    r.project_zero_mean();
    let mut d = r.clone();
    let mut rho = r.dot(&r);

    let mut iterations = 0;
    for _ in 0..prob.max_iter {
        if rho.sqrt() <= 0.5 * target {
            break;
        }
        let ad = apply(&d);
        let da = d.dot(&ad);
        if da <= 0.0 {
            break; // numerically lost positivity; bail to the contract check
        }
        let alpha = rho / da;
        x.axpy(alpha, &d);
        r.axpy(-alpha, &ad);
        r.project_zero_mean();
        let rho_new = r.dot(&r);
        let beta = rho_new / rho;
        rho = rho_new;
        let mut d_new = r.clone();
        d_new.axpy(beta, &d);
        d = d_new;
        iterations += 1;
    }

    x.project_zero_mean();
    let residual = true_residual(&x, prob.epsilon, &prob.rhs, g);
    if residual > target {
        return Err(PressureError::NoConvergence { iterations, residual, target });
    }
    Ok(PressureSolution { p: x, iterations, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_contract(sol: &PressureSolution, prob: &PressureProblem, _g: &Grid) {
        assert!(sol.p.mean().abs() < 1e-12, "mean {:.3e}", sol.p.mean());
        let rhs_norm = prob.rhs.dot(&prob.rhs).sqrt();
        assert!(sol.residual <= prob.solver_tol * rhs_norm.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn zero_rhs_gives_zero_pressure() {
        let g = Grid::channel(8, 8, 1.0, 1.0).unwrap();
        let prob = PressureProblem::new(0.5, Field2::new(8, 8), &g);
        let sol = solve_pressure(&prob, &g).unwrap();
        assert_eq!(sol.p.max_abs(), 0.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn apply_then_solve_round_trip_periodic() {
        let g = Grid::periodic(32, 32, 1.0, 1.0).unwrap();
        let eps = 3e-3;
        let p_star = Field2::from_fn(g.nx, g.ny, |i, _| {
            (2.0 * std::f64::consts::PI * g.xc(i)).cos()
        });
        let mut rhs = neumann_laplacian_apply(&p_star, &g);
        rhs.scale(eps);
        let prob = PressureProblem::new(eps, rhs, &g);
        let sol = solve_pressure(&prob, &g).unwrap();
        assert_contract(&sol, &prob, &g);
        let mut err = sol.p.clone();
        err.axpy(-1.0, &p_star);
        err.project_zero_mean();
        assert!(err.max_abs() < 1e-6, "recovery error {:.3e}", err.max_abs());
    }

    #[test]
    fn apply_then_solve_round_trip_channel() {
        // cos(pi y / Ly) has zero wall-normal derivative: admissible Neumann
        // manufactured solution for the channel.
        let g = Grid::channel(24, 24, 1.0, 1.0).unwrap();
        let eps = 1e-4;
        let p_star = Field2::from_fn(g.nx, g.ny, |i, j| {
            (2.0 * std::f64::consts::PI * g.xc(i)).cos() * (std::f64::consts::PI * g.yc(j)).cos()
        });
        let mut rhs = neumann_laplacian_apply(&p_star, &g);
        rhs.scale(eps);
        let prob = PressureProblem::new(eps, rhs, &g);
        let sol = solve_pressure(&prob, &g).unwrap();
        assert_contract(&sol, &prob, &g);
        let mut err = sol.p.clone();
        err.axpy(-1.0, &p_star);
        err.project_zero_mean();
        assert!(err.max_abs() < 1e-5, "recovery error {:.3e}", err.max_abs());
    }

    #[test]
    fn constant_rhs_is_incompatible() {
        let g = Grid::channel(8, 8, 1.0, 1.0).unwrap();
        let mut rhs = Field2::new(8, 8);
        rhs.fill(0.25);
        let prob = PressureProblem::new(1e-2, rhs, &g);
        match solve_pressure(&prob, &g) {
            Err(PressureError::IncompatibleRhs { mean }) => assert!((mean - 0.25).abs() < 1e-15),
            other => panic!("expected IncompatibleRhs, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_is_invariant_to_additive_constants() {
        let g = Grid::channel(16, 16, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut rhs = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
        rhs.project_zero_mean();
        let guess = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
        let mut shifted = guess.clone();
        for v in shifted.as_mut_slice() {
            *v += 7.0;
        }
        let mut prob = PressureProblem::new(2e-3, rhs, &g);
        prob.initial = Some(guess);
        let a = solve_pressure(&prob, &g).unwrap();
        prob.initial = Some(shifted);
        let b = solve_pressure(&prob, &g).unwrap();
        let mut diff = a.p.clone();
        diff.axpy(-1.0, &b.p);
        assert!(diff.max_abs() < 1e-10, "guess shift leaked {:.3e}", diff.max_abs());
    }

    #[test]
    fn iteration_cap_reports_no_convergence() {
        let g = Grid::channel(16, 16, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut rhs = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
        rhs.project_zero_mean();
        let mut prob = PressureProblem::new(1e-3, rhs, &g);
        prob.max_iter = 1;
        match solve_pressure(&prob, &g) {
            Err(PressureError::NoConvergence { residual, target, .. }) => {
                assert!(residual > target);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let g = Grid::channel(8, 8, 1.0, 1.0).unwrap();
        let prob = PressureProblem::new(0.0, Field2::new(8, 8), &g);
        assert!(matches!(
            solve_pressure(&prob, &g),
            Err(PressureError::BadEpsilon { .. })
        ));
    }
}
