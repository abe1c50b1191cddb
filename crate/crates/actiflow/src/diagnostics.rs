//! Per-step budget records, CSV serialization, and trajectory audits.
//!
//! Every time step emits one [`BudgetRecord`]: energies, the dissipation
//! channels (the same discrete sums used inside the solve, not
//! re-derivations), constraint residuals, solution norms, and solver
//! iteration counts. The audit replays the energy balance across
//! consecutive records and checks that the closure residual
//!
//! ```text
//! (E_total^n - E_total^{n-1}) + dt (wall^n + eps_work^n - forcing^n)
//! ```
//!
//! is second order in dt — bulk dissipation cancels between the kinetic
//! sink and the internal-energy source, so it does not appear.
//!
//! Floating-point CSV output uses 17 significant digits, which makes the
//! files bit-faithful: writing, parsing, and re-writing reproduces the
//! identical byte stream, and two runs from the same configuration and
//! seed produce identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::coefficients::CoefficientSet;
use crate::grid::{
    divergence, l2_norm_centers, l2_norm_faces, neumann_laplacian_apply, pressure_gradient,
    sym_gradient_staggered_uv, Field2, FlowState, Grid,
};
use crate::solver::{lagged_coefficients, SolverParams, StepStats};

/// One row of the budget table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetRecord {
    pub step: usize,
    pub time: f64,
    /// `(1/2) sum_faces V |v|^2`.
    pub kinetic: f64,
    /// `sum_cells V e`.
    pub internal: f64,
    pub total_energy: f64,
    /// Bulk dissipation of the step that produced this state (0 at step 0).
    pub bulk_dissipation: f64,
    pub wall_dissipation: f64,
    /// `eps sum_faces V |grad p|^2`.
    pub eps_work: f64,
    /// `<b, v>` over the faces.
    pub forcing_power: f64,
    /// `||div v - eps lap p||_2`: the quasicompressible constraint.
    pub div_constraint_residual: f64,
    pub div_norm: f64,
    pub pressure_mean: f64,
    pub min_e: f64,
    pub max_speed: f64,
    pub norm_v_l2: f64,
    /// L2 norm plus the symmetric-gradient seminorm.
    pub norm_v_h1: f64,
    pub norm_s_l2: f64,
    pub norm_e_l1: f64,
    /// `(sum V (|e|^{5/4} + |grad e|^{5/4}))^{4/5}`.
    pub norm_e_w154: f64,
    /// `(sum V |p|^{5/3})^{3/5}`.
    pub norm_p_l53: f64,
    pub picard_iters: usize,
    pub cg_iters: usize,
    pub pressure_iters: usize,
    pub energy_iters: usize,
}

/// `(sum_cells V |f|^p)^{1/p}`.
pub fn lp_norm_centers(f: &Field2, g: &Grid, p: f64) -> f64 {
    let s: f64 = f.as_slice().iter().map(|x| x.abs().powf(p)).sum();
    (s * g.cell_volume()).powf(1.0 / p)
}

/// Sobolev-type norm of a center field: volume sums of `|e|^p` and of the
/// face-gradient magnitude to the p, walls contributing zero flux.
pub fn sobolev_norm_centers(e: &Field2, g: &Grid, p: f64) -> f64 {
    let (gx, gy) = pressure_gradient(e, g);
    let vals: f64 = e.as_slice().iter().map(|x| x.abs().powf(p)).sum();
    let grads: f64 = gx.as_slice().iter().chain(gy.as_slice()).map(|x| x.abs().powf(p)).sum();
    ((vals + grads) * g.cell_volume()).powf(1.0 / p)
}

fn shared_norms(state: &FlowState, params: &SolverParams, cs: &CoefficientSet, g: &Grid) -> BudgetRecord {
    let vol = g.cell_volume();
    let kinetic = 0.5 * vol * (state.u.dot(&state.u) + state.v.dot(&state.v));
    let internal: f64 = state.e.as_slice().iter().sum::<f64>() * vol;

    let div = divergence(state, g);
    let mut constraint = div.clone();
    let mut lap_p = neumann_laplacian_apply(&state.p, g);
    lap_p.scale(params.epsilon);
    constraint.axpy(-1.0, &lap_p);

    // Stress monitor at cell centers from the same lagged factors the
    // momentum solve uses.
    let lag = lagged_coefficients(&state.u, &state.v, &state.e, cs, params.k, g);
    let sr = sym_gradient_staggered_uv(&state.u, &state.v, g);
    let mut s_sq = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let ie = g.east(i);
            let jn = g.north(j);
            let d12 = 0.25
                * (sr.d12_nodes.at(i, j)
                    + sr.d12_nodes.at(ie, j)
                    + sr.d12_nodes.at(i, jn)
                    + sr.d12_nodes.at(ie, jn));
            let lam = lag.lambda_c.at(i, j);
            let (s11, s22, s12) = (lam * sr.d11.at(i, j), lam * sr.d22.at(i, j), lam * d12);
            s_sq += s11 * s11 + s22 * s22 + 2.0 * s12 * s12;
        }
    }

    let norm_v_l2 = l2_norm_faces(&state.u, &state.v, g);
    let mut grad_sq = 0.0;
    for j in 0..g.ny {
        for i in 0..g.nx {
            grad_sq += sr.d11.at(i, j).powi(2) + sr.d22.at(i, j).powi(2);
        }
    }
    let (mx, my) = sr.d12_nodes.dims();
    for j in 0..my {
        for i in 0..mx {
            grad_sq += 2.0 * sr.d12_nodes.at(i, j).powi(2);
        }
    }
    let norm_v_h1 = (norm_v_l2 * norm_v_l2 + grad_sq * vol).sqrt();

    BudgetRecord {
        step: 0,
        time: state.t,
        kinetic,
        internal,
        total_energy: kinetic + internal,
        bulk_dissipation: 0.0,
        wall_dissipation: 0.0,
        eps_work: 0.0,
        forcing_power: 0.0,
        div_constraint_residual: l2_norm_centers(&constraint, g),
        div_norm: l2_norm_centers(&div, g),
        pressure_mean: state.p.mean(),
        min_e: state.e.min(),
        max_speed: state.u.max_abs().max(state.v.max_abs()),
        norm_v_l2,
        norm_v_h1,
        norm_s_l2: (s_sq * vol).sqrt(),
        norm_e_l1: lp_norm_centers(&state.e, g, 1.0),
        norm_e_w154: sobolev_norm_centers(&state.e, g, 1.25),
        norm_p_l53: lp_norm_centers(&state.p, g, 5.0 / 3.0),
        picard_iters: 0,
        cg_iters: 0,
        pressure_iters: 0,
        energy_iters: 0,
    }
}

/// Record for the initial state (step 0): norms only, no step work.
pub fn initial_budget_record(
    state: &FlowState,
    params: &SolverParams,
    cs: &CoefficientSet,
    g: &Grid,
) -> BudgetRecord {
    shared_norms(state, params, cs, g)
}

/// Record for a completed step.
pub fn budget_record(
    step: usize,
    state: &FlowState,
    stats: &StepStats,
    params: &SolverParams,
    cs: &CoefficientSet,
    g: &Grid,
) -> BudgetRecord {
    let mut rec = shared_norms(state, params, cs, g);
    rec.step = step;
    rec.bulk_dissipation = stats.bulk_dissipation;
    rec.wall_dissipation = stats.wall_dissipation;
    rec.eps_work = stats.eps_work;
    rec.forcing_power = stats.forcing_power;
    rec.picard_iters = stats.picard_iters;
    rec.cg_iters = stats.cg_iters;
    rec.pressure_iters = stats.pressure_iters;
    rec.energy_iters = stats.energy_iters;
    rec
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub const BUDGET_CSV_HEADER: &str = "step,time,kinetic,internal,total,bulk_dissipation,wall_dissipation,eps_work,forcing_power,div_constraint_residual,div_norm,pressure_mean,min_e,max_speed,norm_v_l2,norm_v_h1,norm_s_l2,norm_e_l1,norm_e_w154,norm_p_l53,picard_iters,cg_iters,pressure_iters,energy_iters";

/// Renders the budget table as CSV with full-precision floats.
pub fn budgets_to_csv(records: &[BudgetRecord]) -> String {
    let mut out = String::new();
    out.push_str(BUDGET_CSV_HEADER);
    out.push('\n');
    for r in records {
        let floats = [
            r.time,
            r.kinetic,
            r.internal,
            r.total_energy,
            r.bulk_dissipation,
            r.wall_dissipation,
            r.eps_work,
            r.forcing_power,
            r.div_constraint_residual,
            r.div_norm,
            r.pressure_mean,
            r.min_e,
            r.max_speed,
            r.norm_v_l2,
            r.norm_v_h1,
            r.norm_s_l2,
            r.norm_e_l1,
            r.norm_e_w154,
            r.norm_p_l53,
        ];
        write!(out, "{}", r.step).unwrap();
        for v in floats {
            write!(out, ",{v:.17e}").unwrap();
        }
        writeln!(
            out,
            ",{},{},{},{}",
            r.picard_iters, r.cg_iters, r.pressure_iters, r.energy_iters
        )
        .unwrap();
    }
    out
}

pub fn write_budgets_csv(records: &[BudgetRecord], path: &Path) -> io::Result<()> {
    fs::write(path, budgets_to_csv(records))
}

/// Parses a budget CSV produced by [`budgets_to_csv`].
pub fn parse_budgets_csv(text: &str) -> Result<Vec<BudgetRecord>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| "empty budget file".to_string())?;
    if header.trim() != BUDGET_CSV_HEADER {
        return Err(format!("unrecognized budget header: {header}"));
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 24 {
            return Err(format!("row {}: expected 24 columns, found {}", idx + 2, cols.len()));
        }
        let f = |n: usize| -> Result<f64, String> {
            cols[n].parse::<f64>().map_err(|e| format!("row {}, column {}: {e}", idx + 2, n + 1))
        };
        let u = |n: usize| -> Result<usize, String> {
            cols[n].parse::<usize>().map_err(|e| format!("row {}, column {}: {e}", idx + 2, n + 1))
        };
        out.push(BudgetRecord {
            step: u(0)?,
            time: f(1)?,
            kinetic: f(2)?,
            internal: f(3)?,
            total_energy: f(4)?,
            bulk_dissipation: f(5)?,
            wall_dissipation: f(6)?,
            eps_work: f(7)?,
            forcing_power: f(8)?,
            div_constraint_residual: f(9)?,
            div_norm: f(10)?,
            pressure_mean: f(11)?,
            min_e: f(12)?,
            max_speed: f(13)?,
            norm_v_l2: f(14)?,
            norm_v_h1: f(15)?,
            norm_s_l2: f(16)?,
            norm_e_l1: f(17)?,
            norm_e_w154: f(18)?,
            norm_p_l53: f(19)?,
            picard_iters: u(20)?,
            cg_iters: u(21)?,
            pressure_iters: u(22)?,
            energy_iters: u(23)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AuditRow {
    pub step: usize,
    pub time: f64,
    /// `(E^n - E^{n-1}) + dt (wall + eps_work - forcing)` for this step.
    pub closure_residual: f64,
    /// `C dt^2` for this step's dt.
    pub bound: f64,
}

/// Tolerances for [`audit_trajectory`].
#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    /// Per-step closure bound is `closure_c * dt^2`.
    pub closure_c: f64,
    /// Bound on `||div v - eps lap p||_2` after every step.
    pub constraint_tol: f64,
    /// Energy floor constant; the minimum principle requires
    /// `min e >= min(c3, min e_initial) - min_principle_tol` at every step.
    /// Defaults to infinity, which reduces the floor to the initial minimum.
    pub c3: f64,
    pub min_principle_tol: f64,
    /// The solution-norm monitors must stay finite and below this.
    pub monitor_bound: f64,
    /// Bound on the pressure gauge `|mean p|`.
    pub gauge_tol: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            closure_c: 10.0,
            constraint_tol: 1e-8,
            c3: f64::INFINITY,
            min_principle_tol: 1e-10,
            monitor_bound: 1e6,
            gauge_tol: 1e-9,
        }
    }
}

/// Outcome of one audited property, with the step where it came closest to
/// (or crossed) its bound.
#[derive(Debug, Clone, Copy)]
pub struct AuditCheck {
    pub name: &'static str,
    pub passed: bool,
    pub worst_step: usize,
    pub worst_value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub checks: Vec<AuditCheck>,
    pub max_closure: f64,
    pub max_closure_bound: f64,
    pub accumulated_closure: f64,
    pub max_div_constraint: f64,
    pub min_internal: f64,
    pub steps: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn summary(&self) -> String {
        let failed: Vec<&str> =
            self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        if failed.is_empty() {
            format!("all {} checks passed over {} steps", self.checks.len(), self.steps)
        } else {
            format!("FAILED: {}", failed.join(", "))
        }
    }

    /// Human-readable block: one line per check plus the overall verdict.
    pub fn text_block(&self) -> String {
        let mut out = format!("energy-budget audit over {} steps\n", self.steps);
        for c in &self.checks {
            writeln!(
                out,
                "  {} {:<26} worst {:+.6e} at step {:<6} bound {:.6e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.worst_value,
                c.worst_step,
                c.bound,
            )
            .unwrap();
        }
        writeln!(
            out,
            "  closure: max {:.3e} (bound {:.3e}), accumulated {:.3e}",
            self.max_closure, self.max_closure_bound, self.accumulated_closure
        )
        .unwrap();
        writeln!(out, "overall: {}", if self.passed() { "PASS" } else { "FAIL" }).unwrap();
        out
    }

    /// Machine-readable check table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,passed,worst_step,worst_value,bound\n");
        for c in &self.checks {
            writeln!(
                out,
                "{},{},{},{:.17e},{:.17e}",
                c.name, c.passed, c.worst_step, c.worst_value, c.bound
            )
            .unwrap();
        }
        out
    }
}

/// Replays the discrete energy balance across a budget table and checks
/// every inequality the scheme guarantees: nonnegative dissipation
/// channels, per-step budget closure within `C dt^2`, the internal-energy
/// minimum principle, the quasicompressibility constraint, the pressure
/// gauge, and boundedness of the solution-norm monitors. Each check
/// reports its worst-case step.
pub fn audit_trajectory(records: &[BudgetRecord], opts: &AuditOptions) -> AuditReport {
    let mut rows = Vec::new();
    let mut max_closure = 0.0_f64;
    let mut max_bound = 0.0_f64;
    let mut accumulated = 0.0_f64;
    let mut closure = AuditCheck {
        name: "budget_closure",
        passed: true,
        worst_step: 0,
        worst_value: 0.0,
        bound: 0.0,
    };
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.time - a.time;
        let resid = (b.total_energy - a.total_energy)
            + dt * (b.wall_dissipation + b.eps_work - b.forcing_power);
        let bound = opts.closure_c * dt * dt;
        // Worst case by margin relative to the (dt-dependent) bound.
        if bound > 0.0 && resid.abs() * closure.bound >= closure.worst_value.abs() * bound {
            closure.worst_step = b.step;
            closure.worst_value = resid;
            closure.bound = bound;
            closure.passed = resid.abs() <= bound;
        }
        max_closure = max_closure.max(resid.abs());
        max_bound = max_bound.max(bound);
        accumulated += resid.abs();
        rows.push(AuditRow { step: b.step, time: b.time, closure_residual: resid, bound });
    }
    if !rows.is_empty() {
        closure.passed = rows.iter().all(|r| r.closure_residual.abs() <= r.bound);
    }

    // Dissipation channels are sums of squares and must come out >= 0.
    let mut dissipation = AuditCheck {
        name: "nonnegative_dissipation",
        passed: true,
        worst_step: 0,
        worst_value: f64::INFINITY,
        bound: 0.0,
    };
    for r in records.iter().skip(1) {
        let least = r.bulk_dissipation.min(r.wall_dissipation).min(r.eps_work);
        if least < dissipation.worst_value {
            dissipation.worst_value = least;
            dissipation.worst_step = r.step;
        }
    }
    if dissipation.worst_value.is_infinite() {
        dissipation.worst_value = 0.0;
    }
    dissipation.passed = dissipation.worst_value >= 0.0;

    // Minimum principle: e never falls below min(c3, initial minimum).
    let floor = records.first().map(|r| r.min_e.min(opts.c3)).unwrap_or(0.0);
    let mut minimum = AuditCheck {
        name: "minimum_principle",
        passed: true,
        worst_step: 0,
        worst_value: f64::INFINITY,
        bound: floor - opts.min_principle_tol,
    };
    for r in records {
        if r.min_e < minimum.worst_value {
            minimum.worst_value = r.min_e;
            minimum.worst_step = r.step;
        }
    }
    if minimum.worst_value.is_infinite() {
        minimum.worst_value = floor;
    }
    minimum.passed = minimum.worst_value >= minimum.bound;

    // Quasicompressibility: div v = eps lap p after every step.
    let mut constraint = AuditCheck {
        name: "divergence_constraint",
        passed: true,
        worst_step: 0,
        worst_value: 0.0,
        bound: opts.constraint_tol,
    };
    for r in records.iter().skip(1) {
        if r.div_constraint_residual > constraint.worst_value {
            constraint.worst_value = r.div_constraint_residual;
            constraint.worst_step = r.step;
        }
    }
    constraint.passed = constraint.worst_value <= constraint.bound;

    // Pressure gauge: zero mean.
    let mut gauge = AuditCheck {
        name: "pressure_gauge",
        passed: true,
        worst_step: 0,
        worst_value: 0.0,
        bound: opts.gauge_tol,
    };
    for r in records {
        if r.pressure_mean.abs() > gauge.worst_value.abs() {
            gauge.worst_value = r.pressure_mean;
            gauge.worst_step = r.step;
        }
    }
    gauge.passed = gauge.worst_value.abs() <= gauge.bound;

    // Solution-norm monitors stay finite and bounded.
    let mut monitors = AuditCheck {
        name: "bounded_monitors",
        passed: true,
        worst_step: 0,
        worst_value: 0.0,
        bound: opts.monitor_bound,
    };
    for r in records {
        let sup = [r.norm_v_l2, r.norm_v_h1, r.norm_s_l2, r.norm_e_l1, r.norm_e_w154, r.norm_p_l53, r.max_speed]
            .into_iter()
            .fold(0.0_f64, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) });
        if sup.is_nan() || sup > monitors.worst_value {
            monitors.worst_value = sup;
            monitors.worst_step = r.step;
        }
        if sup.is_nan() {
            break;
        }
    }
    monitors.passed = monitors.worst_value.is_finite() && monitors.worst_value <= monitors.bound;

    let max_div_constraint = constraint.worst_value;
    let min_internal = minimum.worst_value;
    AuditReport {
        rows,
        checks: vec![dissipation, closure, minimum, constraint, gauge, monitors],
        max_closure,
        max_closure_bound: max_bound,
        accumulated_closure: accumulated,
        max_div_constraint,
        min_internal,
        steps: records.len().saturating_sub(1),
    }
}

// ---------------------------------------------------------------------------
// k-sweep monitor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct KSweepRow {
    pub k: u32,
    pub sup_norm_v_l2: f64,
    pub sup_norm_v_h1: f64,
    pub sup_norm_s_l2: f64,
    pub sup_norm_e_l1: f64,
}

/// Relative spread accepted as "uniform in k".
pub const K_SWEEP_BAND: f64 = 0.10;

/// Per-regularization-level suprema of the solution norms, plus the
/// relative spread of each supremum across levels. Uniform boundedness in
/// k shows up as small spreads; growth beyond the 10% band is flagged.
#[derive(Debug, Clone)]
pub struct KSweepReport {
    pub rows: Vec<KSweepRow>,
    pub spread_v_l2: f64,
    pub spread_v_h1: f64,
    pub spread_s_l2: f64,
    pub spread_e_l1: f64,
    /// All spreads within [`K_SWEEP_BAND`].
    pub uniform: bool,
}

impl KSweepReport {
    pub fn summary(&self) -> String {
        format!(
            "k-sweep over {} levels: spreads v_l2 {:.3e}, v_h1 {:.3e}, s_l2 {:.3e}, e_l1 {:.3e} -> {}",
            self.rows.len(),
            self.spread_v_l2,
            self.spread_v_h1,
            self.spread_s_l2,
            self.spread_e_l1,
            if self.uniform { "uniform" } else { "GROWTH BEYOND BAND" }
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,sup_norm_v_l2,sup_norm_v_h1,sup_norm_s_l2,sup_norm_e_l1\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.k, r.sup_norm_v_l2, r.sup_norm_v_h1, r.sup_norm_s_l2, r.sup_norm_e_l1
            )
            .unwrap();
        }
        out
    }
}

fn relative_spread(vals: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = vals.collect();
    if v.is_empty() {
        return 0.0;
    }
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

pub fn k_sweep_monitor(runs: &[(u32, Vec<BudgetRecord>)]) -> KSweepReport {
    let rows: Vec<KSweepRow> = runs
        .iter()
        .map(|(k, records)| KSweepRow {
            k: *k,
            sup_norm_v_l2: records.iter().map(|r| r.norm_v_l2).fold(0.0, f64::max),
            sup_norm_v_h1: records.iter().map(|r| r.norm_v_h1).fold(0.0, f64::max),
            sup_norm_s_l2: records.iter().map(|r| r.norm_s_l2).fold(0.0, f64::max),
            sup_norm_e_l1: records.iter().map(|r| r.norm_e_l1).fold(0.0, f64::max),
        })
        .collect();
    let spread_v_l2 = relative_spread(rows.iter().map(|r| r.sup_norm_v_l2));
    let spread_v_h1 = relative_spread(rows.iter().map(|r| r.sup_norm_v_h1));
    let spread_s_l2 = relative_spread(rows.iter().map(|r| r.sup_norm_s_l2));
    let spread_e_l1 = relative_spread(rows.iter().map(|r| r.sup_norm_e_l1));
    let uniform = [spread_v_l2, spread_v_h1, spread_s_l2, spread_e_l1]
        .iter()
        .all(|s| *s <= K_SWEEP_BAND);
    KSweepReport { rows, spread_v_l2, spread_v_h1, spread_s_l2, spread_e_l1, uniform }
}
