//! Temperature-dependent material coefficients and their admissibility
//! checks.
//!
//! Seven scalar functions of the internal energy `e` drive the model: the
//! shear viscosity `nu`, the wall friction `gamma`, the heat conductivity
//! `kappa`, the bulk activation thresholds `tau1`/`tau2`, and the wall
//! activation thresholds `sigma1`/`sigma2`. Admissibility requires
//!
//! * continuity of every function,
//! * `0 <= tau1, tau2, sigma1, sigma2 <= c0`,
//! * `c1 <= nu, gamma, kappa <= c2` with `c1 > 0`,
//! * the product conditions `tau1(e) * tau2(e) = 0` and
//!   `sigma1(e) * sigma2(e) = 0` for every `e` (the rate threshold and the
//!   stress threshold are never active at the same temperature).
//!
//! Every function is stored as a continuous piecewise-linear table with
//! constant extension outside the outermost breakpoints. That makes
//! continuity automatic, lets range bounds be certified from breakpoint
//! values alone, and turns the product conditions into an exact structural
//! check on the merged breakpoint grid: two nonnegative linear pieces are
//! both positive somewhere on a closed interval if and only if each of them
//! is positive at one of its endpoints.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Error raised while constructing a coefficient table.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientError {
    /// Breakpoint abscissae must be finite and strictly increasing.
    BadBreakpoints(String),
    /// Values must be finite.
    BadValues(String),
}

impl fmt::Display for CoefficientError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientError::BadBreakpoints(msg) => write!(f, "bad breakpoints: {msg}"),
            CoefficientError::BadValues(msg) => write!(f, "bad values: {msg}"),
        }
    }
}

impl std::error::Error for CoefficientError {}

/// Continuous piecewise-linear function with constant extension beyond the
/// first and last breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    /// Builds a table from strictly increasing abscissae and matching values.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, CoefficientError> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(CoefficientError::BadBreakpoints(format!(
                "need matching non-empty tables, got {} abscissae and {} values",
                xs.len(),
                ys.len()
            )));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(CoefficientError::BadBreakpoints(
                "abscissae must be finite".to_string(),
            ));
        }
        if xs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoefficientError::BadBreakpoints(
                "abscissae must be strictly increasing".to_string(),
            ));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(CoefficientError::BadValues(
                "values must be finite".to_string(),
            ));
        }
        Ok(PiecewiseLinear { xs, ys })
    }

    /// Constant function.
    pub fn constant(c: f64) -> Self {
        PiecewiseLinear {
            xs: vec![0.0],
            ys: vec![c],
        }
    }

    /// Clamp ramp rising linearly from 0 at `lo` to `hi_value` at `hi`,
    /// constant outside. `ramp_up(1.0, 2.0, 1.0)` is `max(0, min(1, e - 1))`.
    pub fn ramp_up(lo: f64, hi: f64, hi_value: f64) -> Self {
        PiecewiseLinear {
            xs: vec![lo, hi],
            ys: vec![0.0, hi_value],
        }
    }

    /// Clamp ramp falling linearly from `lo_value` at `lo` to 0 at `hi`,
    /// constant outside. `ramp_down(0.0, 1.0, 1.0)` is `max(0, min(1, 1 - e))`.
    pub fn ramp_down(lo: f64, hi: f64, lo_value: f64) -> Self {
        PiecewiseLinear {
            xs: vec![lo, hi],
            ys: vec![lo_value, 0.0],
        }
    }

    /// Evaluates the interpolant; constant extension outside the table.
    pub fn eval(&self, x: f64) -> f64 {
        let xs = &self.xs;
        let ys = &self.ys;
        if x <= xs[0] {
            return ys[0];
        }
        let last = xs.len() - 1;
        if x >= xs[last] {
            return ys[last];
        }
        // xs is strictly increasing; find the segment containing x.
        let hi = xs.partition_point(|&bp| bp < x);
        let lo = hi - 1;
        let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
        ys[lo] + t * (ys[hi] - ys[lo])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    /// Global minimum; for a piecewise-linear interpolant with constant
    /// extension this is attained at a breakpoint.
    pub fn min_value(&self) -> f64 {
        self.ys.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Global maximum (attained at a breakpoint).
    pub fn max_value(&self) -> f64 {
        self.ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Point evaluation of the whole coefficient set at one internal energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub nu: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

/// The seven material functions plus the admissibility constants.
///
/// `c0` bounds the activation thresholds from above, `c1`/`c2` bound the
/// viscosity-like functions from below/above, and `c3` is the floor the
/// initial internal energy must respect (the minimum principle propagates
/// `min(c3, min e0)` forward in time).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub nu: PiecewiseLinear,
    pub gamma: PiecewiseLinear,
    pub kappa: PiecewiseLinear,
    pub tau1: PiecewiseLinear,
    pub tau2: PiecewiseLinear,
    pub sigma1: PiecewiseLinear,
    pub sigma2: PiecewiseLinear,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

/// Default admissibility constants used by the built-in presets.
pub const DEFAULT_C0: f64 = 1.0;
pub const DEFAULT_C1: f64 = 0.5;
pub const DEFAULT_C2: f64 = 2.0;
pub const DEFAULT_C3: f64 = 0.1;

impl CoefficientSet {
    /// Newtonian fluid: unit viscosity/friction/conductivity, no activation.
    pub fn newtonian() -> Self {
        CoefficientSet {
            nu: PiecewiseLinear::constant(1.0),
            gamma: PiecewiseLinear::constant(1.0),
            kappa: PiecewiseLinear::constant(1.0),
            tau1: PiecewiseLinear::constant(0.0),
            tau2: PiecewiseLinear::constant(0.0),
            sigma1: PiecewiseLinear::constant(0.0),
            sigma2: PiecewiseLinear::constant(0.0),
            c0: DEFAULT_C0,
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
            c3: DEFAULT_C3,
        }
    }

    /// The example activation family: `tau1(e) = max(0, min(1, e - 1))`
    /// and `tau2(e) = max(0, min(1, 1 - e))`. Cold fluid (`e < 1`) carries a
    /// stress activation (Bingham response), hot fluid (`e > 1`) carries a
    /// rate activation (inviscid below threshold), and exactly at `e = 1`
    /// the material is Newtonian. Wall thresholds stay off, so walls obey a
    /// plain Navier slip law.
    pub fn activated_example() -> Self {
        CoefficientSet {
            tau1: PiecewiseLinear::ramp_up(1.0, 2.0, 1.0),
            tau2: PiecewiseLinear::ramp_down(0.0, 1.0, 1.0),
            ..CoefficientSet::newtonian()
        }
    }

    /// Bingham fluid with a constant stress activation `tau2 = 0.3` and
    /// Navier-slip walls.
    pub fn bingham_const() -> Self {
        CoefficientSet {
            tau2: PiecewiseLinear::constant(0.3),
            ..CoefficientSet::newtonian()
        }
    }

    /// Newtonian bulk with a stick-slip wall: the wall shear must exceed
    /// `sigma2 = 0.5` before the fluid slides.
    pub fn stick_slip() -> Self {
        CoefficientSet {
            sigma2: PiecewiseLinear::constant(0.5),
            ..CoefficientSet::newtonian()
        }
    }

    /// Looks up a built-in preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "newtonian" => Some(Self::newtonian()),
            "activated_example" => Some(Self::activated_example()),
            "bingham_const" => Some(Self::bingham_const()),
            "stick_slip" => Some(Self::stick_slip()),
            _ => None,
        }
    }

    /// Names accepted by [`CoefficientSet::preset`].
    pub fn preset_names() -> &'static [&'static str] {
        &["newtonian", "activated_example", "bingham_const", "stick_slip"]
    }

    /// Evaluates all seven functions at internal energy `e`.
    pub fn evaluate(&self, e: f64) -> Coefficients {
        Coefficients {
            nu: self.nu.eval(e),
            gamma: self.gamma.eval(e),
            kappa: self.kappa.eval(e),
            tau1: self.tau1.eval(e),
            tau2: self.tau2.eval(e),
            sigma1: self.sigma1.eval(e),
            sigma2: self.sigma2.eval(e),
        }
    }

    /// Checks every admissibility requirement and returns a report listing
    /// each violation with a witness argument.
    ///
    /// Range bounds are certified exactly from breakpoint values (a linear
    /// interpolant stays inside the hull of its endpoint values) and
    /// additionally spot-checked at `sample_count` deterministic random
    /// arguments. The product conditions are checked structurally on the
    /// merged breakpoint grid, which is exact for piecewise-linear tables.
    pub fn validate(&self, sample_count: usize) -> ValidationReport {
        let mut report = ValidationReport::default();

        if !(self.c0 >= 0.0) {
            report.push("c0", self.c0, ViolationKind::BadConstant);
        }
        if !(self.c1 > 0.0) {
            report.push("c1", self.c1, ViolationKind::BadConstant);
        }
        if !(self.c2 >= self.c1) {
            report.push("c2", self.c2, ViolationKind::BadConstant);
        }
        if !(self.c3 > 0.0) {
            report.push("c3", self.c3, ViolationKind::BadConstant);
        }

        let activations: [(&str, &PiecewiseLinear); 4] = [
            ("tau1", &self.tau1),
            ("tau2", &self.tau2),
            ("sigma1", &self.sigma1),
            ("sigma2", &self.sigma2),
        ];
        let viscous: [(&str, &PiecewiseLinear); 3] = [
            ("nu", &self.nu),
            ("gamma", &self.gamma),
            ("kappa", &self.kappa),
        ];

        // Exact range certification at breakpoints.
        for (name, f) in activations.iter() {
            for (&x, &y) in f.breakpoints().iter().zip(f.values()) {
                if !(0.0 <= y && y <= self.c0) {
                    report.push_at(name, x, y, ViolationKind::ActivationRange);
                }
            }
        }
        for (name, f) in viscous.iter() {
            for (&x, &y) in f.breakpoints().iter().zip(f.values()) {
                if !(self.c1 <= y && y <= self.c2) {
                    report.push_at(name, x, y, ViolationKind::ViscousRange);
                }
            }
        }

        // Deterministic random spot checks across the union of all breakpoint
        // spans (belt and braces; for these tables the breakpoint check is
        // already exhaustive).
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (_, f) in activations.iter().chain(viscous.iter()) {
            lo = lo.min(f.breakpoints()[0]);
            hi = hi.max(*f.breakpoints().last().unwrap());
        }
        let span = (hi - lo).max(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0ef);
        for _ in 0..sample_count {
            let e = rng.gen_range((lo - span)..(hi + span));
            for (name, f) in activations.iter() {
                let y = f.eval(e);
                if !(0.0 <= y && y <= self.c0) {
                    report.push_at(name, e, y, ViolationKind::ActivationRange);
                }
            }
            for (name, f) in viscous.iter() {
                let y = f.eval(e);
                if !(self.c1 <= y && y <= self.c2) {
                    report.push_at(name, e, y, ViolationKind::ViscousRange);
                }
            }
        }

        // Product conditions: the supports of the paired thresholds must not
        // overlap anywhere.
        check_disjoint_supports("tau1*tau2", &self.tau1, &self.tau2, &mut report);
        check_disjoint_supports("sigma1*sigma2", &self.sigma1, &self.sigma2, &mut report);

        report
    }
}

/// Exact structural check that two nonnegative piecewise-linear functions
/// are never simultaneously positive. On each elementary interval of the
/// merged breakpoint grid both functions are linear, and a nonnegative
/// linear piece is positive somewhere on a closed interval iff it is
/// positive at an endpoint; the two constant extension rays are handled the
/// same way.
fn check_disjoint_supports(
    pair: &'static str,
    f: &PiecewiseLinear,
    g: &PiecewiseLinear,
    report: &mut ValidationReport,
) {
    let mut grid: Vec<f64> = f
        .breakpoints()
        .iter()
        .chain(g.breakpoints())
        .cloned()
        .collect();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();

    let positive_somewhere = |h: &PiecewiseLinear, a: f64, b: f64| -> bool {
        h.eval(a) > 0.0 || h.eval(b) > 0.0
    };

    // Elementary intervals, plus the two extension rays (where both
    // functions are constant, so the endpoint value decides).
    let first = grid[0];
    let last = *grid.last().unwrap();
    if f.eval(first) > 0.0 && g.eval(first) > 0.0 {
        report.push_at(pair, first, f.eval(first) * g.eval(first), ViolationKind::ProductOverlap);
    }
    if f.eval(last) > 0.0 && g.eval(last) > 0.0 {
        report.push_at(pair, last, f.eval(last) * g.eval(last), ViolationKind::ProductOverlap);
    }
    for w in grid.windows(2) {
        let (a, b) = (w[0], w[1]);
        if positive_somewhere(f, a, b) && positive_somewhere(g, a, b) {
            let mid = 0.5 * (a + b);
            report.push_at(pair, mid, f.eval(mid) * g.eval(mid), ViolationKind::ProductOverlap);
        }
    }
}

/// What an admissibility violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Activation threshold outside `[0, c0]`.
    ActivationRange,
    /// Viscosity-like function outside `[c1, c2]`.
    ViscousRange,
    /// Paired thresholds simultaneously positive.
    ProductOverlap,
    /// The constants themselves are inconsistent (`c1 <= 0`, `c2 < c1`, ...).
    BadConstant,
}

/// One admissibility violation with a witness argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub function: &'static str,
    pub argument: f64,
    pub value: f64,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::ActivationRange => write!(
                f,
                "{}({}) = {} outside [0, c0]",
                self.function, self.argument, self.value
            ),
            ViolationKind::ViscousRange => write!(
                f,
                "{}({}) = {} outside [c1, c2]",
                self.function, self.argument, self.value
            ),
            ViolationKind::ProductOverlap => write!(
                f,
                "{} > 0 near e = {} (product condition violated)",
                self.function, self.argument
            ),
            ViolationKind::BadConstant => {
                write!(f, "constant {} = {} is inadmissible", self.function, self.value)
            }
        }
    }
}

/// Outcome of [`CoefficientSet::validate`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, function: &'static str, value: f64, kind: ViolationKind) {
        self.violations.push(Violation {
            function,
            argument: f64::NAN,
            value,
            kind,
        });
    }

    fn push_at(&mut self, function: &'static str, argument: f64, value: f64, kind: ViolationKind) {
        // Keep the report readable: one witness per (function, kind) pair.
        if self
            .violations
            .iter()
            .any(|v| v.function == function && v.kind == kind)
        {
            return;
        }
        self.violations.push(Violation {
            function,
            argument,
            value,
            kind,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            write!(f, "coefficient set admissible")
        } else {
            writeln!(f, "coefficient set inadmissible:")?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_family_matches_closed_form() {
        let cs = CoefficientSet::activated_example();
        // tau1 = max(0, min(1, e - 1)), tau2 = max(0, min(1, 1 - e)).
        for &(e, t1, t2) in &[
            (-3.0, 0.0, 1.0),
            (0.0, 0.0, 1.0),
            (0.5, 0.0, 0.5),
            (1.0, 0.0, 0.0),
            (1.25, 0.25, 0.0),
            (2.0, 1.0, 0.0),
            (7.0, 1.0, 0.0),
        ] {
            assert_eq!(cs.tau1.eval(e), t1, "tau1({e})");
            assert_eq!(cs.tau2.eval(e), t2, "tau2({e})");
        }
    }

    #[test]
    fn constant_extension_beyond_breakpoints() {
        let f = PiecewiseLinear::new(vec![0.0, 1.0, 3.0], vec![2.0, 0.5, 1.5]).unwrap();
        assert_eq!(f.eval(-10.0), 2.0);
        assert_eq!(f.eval(10.0), 1.5);
        assert!((f.eval(0.5) - 1.25).abs() < 1e-15);
        assert!((f.eval(2.0) - 1.0).abs() < 1e-15);
        // Continuity across breakpoints.
        assert!((f.eval(1.0 - 1e-12) - f.eval(1.0)).abs() < 1e-10);
        assert!((f.eval(1.0 + 1e-12) - f.eval(1.0)).abs() < 1e-10);
    }

    #[test]
    fn rejects_unsorted_breakpoints() {
        assert!(PiecewiseLinear::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(PiecewiseLinear::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(PiecewiseLinear::new(vec![], vec![]).is_err());
        assert!(PiecewiseLinear::new(vec![0.0], vec![f64::NAN]).is_err());
    }

    #[test]
    fn example_family_is_admissible() {
        let report = CoefficientSet::activated_example().validate(1000);
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn all_presets_are_admissible() {
        for name in CoefficientSet::preset_names() {
            let cs = CoefficientSet::preset(name).unwrap();
            let report = cs.validate(500);
            assert!(report.is_valid(), "preset {name}: {report}");
        }
    }

    #[test]
    fn simultaneous_thresholds_violate_product_condition() {
        let mut cs = CoefficientSet::newtonian();
        cs.tau1 = PiecewiseLinear::constant(0.5);
        cs.tau2 = PiecewiseLinear::constant(0.5);
        let report = cs.validate(100);
        assert!(!report.is_valid());
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::ProductOverlap && v.function == "tau1*tau2"));
    }

    #[test]
    fn overlapping_ramps_violate_product_condition() {
        // Supports (0.5, inf) and (-inf, 1.0) overlap on (0.5, 1.0) even
        // though no single breakpoint carries two positive values.
        let mut cs = CoefficientSet::newtonian();
        cs.sigma1 = PiecewiseLinear::ramp_up(0.5, 1.5, 1.0);
        cs.sigma2 = PiecewiseLinear::ramp_down(0.0, 1.0, 1.0);
        let report = cs.validate(100);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::ProductOverlap && v.function == "sigma1*sigma2"));
    }

    #[test]
    fn touching_ramps_satisfy_product_condition() {
        // Supports (-inf, 1) and (1, inf) share only the breakpoint e = 1
        // where both vanish; that is admissible.
        let mut cs = CoefficientSet::newtonian();
        cs.sigma1 = PiecewiseLinear::ramp_up(1.0, 2.0, 1.0);
        cs.sigma2 = PiecewiseLinear::ramp_down(0.0, 1.0, 1.0);
        let report = cs.validate(100);
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn vanishing_viscosity_reports_lower_bound() {
        let mut cs = CoefficientSet::newtonian();
        cs.nu = PiecewiseLinear::constant(0.0);
        let report = cs.validate(100);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::ViscousRange && v.function == "nu"));
    }

    #[test]
    fn oversized_threshold_reports_upper_bound() {
        let mut cs = CoefficientSet::newtonian();
        cs.tau2 = PiecewiseLinear::constant(1.5); // c0 = 1
        let report = cs.validate(100);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::ActivationRange && v.function == "tau2"));
    }

    #[test]
    fn bad_constants_are_reported() {
        let mut cs = CoefficientSet::newtonian();
        cs.c1 = 0.0;
        let report = cs.validate(10);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::BadConstant && v.function == "c1"));
    }

    #[test]
    fn evaluate_bundles_all_seven_functions() {
        let cs = CoefficientSet::activated_example();
        let c = cs.evaluate(0.5);
        assert_eq!(c.nu, 1.0);
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.kappa, 1.0);
        assert_eq!(c.tau1, 0.0);
        assert_eq!(c.tau2, 0.5);
        assert_eq!(c.sigma1, 0.0);
        assert_eq!(c.sigma2, 0.0);
    }
}
