//! Spatial accuracy of the transport-viscosity core on a smooth analytic
//! flow: a periodic Taylor-Green eddy in the Newtonian limit decays as
//! exp(-nu (kx^2 + ky^2) t). The absolute decay rate carries an
//! h-independent backward-Euler bias of about nu^2 (kx^2+ky^2)^2 dt / 2, so
//! the spatial defect is isolated by differencing the measured rates of
//! consecutive grids; that difference must shrink four-fold per refinement.

use actiflow::config::{
    CoefficientsConfig, GridConfig, InitialConfig, OutputConfig, SimConfig, SolverConfig,
};

const AMPLITUDE: f64 = 1e-3;
const T_FINAL: f64 = 0.01;
const DT: f64 = 1e-4;

fn taylor_green_config(n: usize) -> SimConfig {
    SimConfig {
        grid: GridConfig { lx: 1.0, ly: 1.0, nx: n, ny: n, periodic_x: true, periodic_y: true },
        coefficients: CoefficientsConfig {
            preset: Some("newtonian".into()),
            tables: None,
            c0: None,
            c1: None,
            c2: None,
            c3: None,
        },
        solver: SolverConfig {
            dt: DT,
            t_final: T_FINAL,
            k: 64,
            epsilon: None,
            picard_tol: 1e-12,
            picard_max: 200,
            body_force: [0.0, 0.0],
            stop_when_steady: false,
            steady_tol: 1e-8,
        },
        initial: InitialConfig {
            preset: "taylor_green".into(),
            e0: 0.5,
            e0_bands: None,
            amplitude: AMPLITUDE,
            amplitude2: 0.0,
            snapshot: None,
        },
        output: OutputConfig::default(),
    }
}

/// Measured exponential decay rate of the velocity norm over the run.
fn measured_decay_rate(n: usize) -> f64 {
    let built = taylor_green_config(n).build().expect("config builds");
    let traj = actiflow::solver::run(
        built.initial,
        &built.params,
        &built.coefficients,
        &built.grid,
        &actiflow::solver::RunOptions::default(),
    )
    .expect("run completes");
    let first = traj.budgets.first().unwrap().norm_v_l2;
    let last = traj.budgets.last().unwrap().norm_v_l2;
    (first / last).ln() / T_FINAL
}

#[test]
fn taylor_green_decay_rate_is_second_order_in_space() {
    let nu = 1.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    let exact = nu * 2.0 * two_pi * two_pi;
    let rates: Vec<f64> = [16usize, 32, 64].iter().map(|&n| measured_decay_rate(n)).collect();
    println!(
        "taylor-green decay rates: {:.5} / {:.5} / {:.5} at n = 16/32/64 (exact {exact:.5})",
        rates[0], rates[1], rates[2]
    );

    // Finest grid within the stepping bias plus a small spatial remainder.
    let rel = (rates[2] - exact).abs() / exact;
    assert!(rel <= 0.02, "64^2 decay rate off by {:.3}%", 100.0 * rel);

    // Rate differences cancel the h-independent bias, leaving the O(h^2)
    // spatial defect: each refinement must shrink it about four-fold.
    let d1 = rates[0] - rates[1];
    let d2 = rates[1] - rates[2];
    let ratio = d1 / d2;
    println!("spatial defect differences: {d1:.4e} / {d2:.4e}, ratio {ratio:.2}");
    assert!(
        (3.0..=5.5).contains(&ratio),
        "expected ~4x defect reduction per refinement, got {ratio:.2} ({rates:?})"
    );
}
