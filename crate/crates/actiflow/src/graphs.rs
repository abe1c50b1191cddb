//! Constitutive graphs for the activated fluid: the bulk graph couples the
//! deviatoric stress `S` with the symmetric velocity gradient `D`, the wall
//! graph couples the tangential traction `s` with the slip velocity `v_t`.
//!
//! Both graphs have the same radial form. With a slope function `mu(e)`
//! (equal to `2 nu(e)` in the bulk and `gamma(e)` on the wall), a rate
//! threshold `t1(e)` (`tau1`/`sigma1`) and a force threshold `t2(e)`
//! (`tau2`/`sigma2`), a pair `(X, Y)` of (rate-like, force-like) variables
//! belongs to the graph iff
//!
//! ```text
//!     mu(e) (|X| - t1)^+ X / |X|  =  (|Y| - t2)^+ Y / |Y|
//! ```
//!
//! with the convention that either side is zero when its argument vanishes.
//! The admissibility product condition `t1(e) * t2(e) = 0` makes the graph
//! maximal monotone for every `e`. Because the relation is radial, every
//! operation in this module reduces to scalar work on magnitudes plus a
//! shared direction, and one generic code path serves both symmetric
//! tensors (bulk) and vectors (wall) in two and three dimensions.
//!
//! The Lipschitz regularization at level `k` replaces the multivalued graph
//! by the single-valued map
//!
//! ```text
//!     Y = min{ k + mu(e), (mu(e) (|X| - t1)^+ + t2) / |X| } X
//! ```
//!
//! whose steep branch (slope `k + mu`) carries the pre-activation states.
//! `project` moves a regularized point back onto the exact graph; the
//! correction only touches points with `|Y| < t2 (1 + mu/k)` and displaces
//! the rate variable by at most `t2(e)/(k + mu(e)) <= 2 t2(e)/k`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coefficients::CoefficientSet;

/// Magnitudes below this are treated as exact zeros when normalizing a
/// direction; guards every division by `|X|` or `|Y|`.
pub const ZERO_NORM_GUARD: f64 = 1e-30;

/// Default membership tolerance, applied relative to `max(1, |X|, |Y|)`.
pub const DEFAULT_MEMBERSHIP_TOL: f64 = 1e-9;

/// Regularization level `k >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegularizationLevel(u32);

impl RegularizationLevel {
    pub fn new(k: u32) -> Result<Self, GraphError> {
        if k == 0 {
            Err(GraphError::InvalidLevel)
        } else {
            Ok(RegularizationLevel(k))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }
}

impl fmt::Display for RegularizationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Errors raised by graph operations.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// Asked to invert the multivalued side of the graph away from the
    /// zero-selection convention (rate from a nonzero force while the rate
    /// threshold is active).
    BranchUnavailable,
    /// The input pair does not lie on the regularized graph.
    NotOnApproximateGraph { residual: f64 },
    /// Regularization level must be a positive integer.
    InvalidLevel,
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::BranchUnavailable => {
                write!(f, "graph branch is multivalued here; only the zero selection is defined")
            }
            GraphError::NotOnApproximateGraph { residual } => {
                write!(f, "pair is not on the regularized graph (residual {residual:.3e})")
            }
            GraphError::InvalidLevel => write!(f, "regularization level must be >= 1"),
        }
    }
}

impl std::error::Error for GraphError {}

/// Minimal algebra shared by the tensor (bulk) and vector (wall) variables.
pub trait Radial: Copy {
    fn zero() -> Self;
    fn norm(self) -> f64;
    fn scale(self, a: f64) -> Self;
    fn sub(self, other: Self) -> Self;
    fn dot(self, other: Self) -> f64;
}

/// Symmetric 2x2 tensor stored as (xx, yy, xy). The Frobenius norm counts
/// the off-diagonal entry twice: `|T|^2 = xx^2 + yy^2 + 2 xy^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor2 {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
}

impl SymTensor2 {
    pub fn new(xx: f64, yy: f64, xy: f64) -> Self {
        SymTensor2 { xx, yy, xy }
    }

    /// Pure shear with unit Frobenius norm.
    pub fn unit_shear() -> Self {
        SymTensor2::new(0.0, 0.0, 1.0 / std::f64::consts::SQRT_2)
    }

    pub fn trace(self) -> f64 {
        self.xx + self.yy
    }
}

impl Radial for SymTensor2 {
    fn zero() -> Self {
        SymTensor2::new(0.0, 0.0, 0.0)
    }

    fn norm(self) -> f64 {
        (self.xx * self.xx + self.yy * self.yy + 2.0 * self.xy * self.xy).sqrt()
    }

    fn scale(self, a: f64) -> Self {
        SymTensor2::new(a * self.xx, a * self.yy, a * self.xy)
    }

    fn sub(self, o: Self) -> Self {
        SymTensor2::new(self.xx - o.xx, self.yy - o.yy, self.xy - o.xy)
    }

    fn dot(self, o: Self) -> f64 {
        self.xx * o.xx + self.yy * o.yy + 2.0 * self.xy * o.xy
    }
}

/// Symmetric 3x3 tensor stored as (xx, yy, zz, xy, xz, yz); off-diagonal
/// entries count twice in norms and inner products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymTensor3 {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
    pub xz: f64,
    pub yz: f64,
}

impl SymTensor3 {
    pub fn new(xx: f64, yy: f64, zz: f64, xy: f64, xz: f64, yz: f64) -> Self {
        SymTensor3 { xx, yy, zz, xy, xz, yz }
    }

    pub fn trace(self) -> f64 {
        self.xx + self.yy + self.zz
    }
}

impl Radial for SymTensor3 {
    fn zero() -> Self {
        SymTensor3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    fn norm(self) -> f64 {
        (self.xx * self.xx
            + self.yy * self.yy
            + self.zz * self.zz
            + 2.0 * (self.xy * self.xy + self.xz * self.xz + self.yz * self.yz))
            .sqrt()
    }

    fn scale(self, a: f64) -> Self {
        SymTensor3::new(
            a * self.xx,
            a * self.yy,
            a * self.zz,
            a * self.xy,
            a * self.xz,
            a * self.yz,
        )
    }

    fn sub(self, o: Self) -> Self {
        SymTensor3::new(
            self.xx - o.xx,
            self.yy - o.yy,
            self.zz - o.zz,
            self.xy - o.xy,
            self.xz - o.xz,
            self.yz - o.yz,
        )
    }

    fn dot(self, o: Self) -> f64 {
        self.xx * o.xx
            + self.yy * o.yy
            + self.zz * o.zz
            + 2.0 * (self.xy * o.xy + self.xz * o.xz + self.yz * o.yz)
    }
}

/// Planar vector (wall quantities on a 2d domain).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }
}

impl Radial for Vec2 {
    fn zero() -> Self {
        Vec2::new(0.0, 0.0)
    }

    fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    fn scale(self, a: f64) -> Self {
        Vec2::new(a * self.x, a * self.y)
    }

    fn sub(self, o: Self) -> Self {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }
}

/// Spatial vector (wall quantities on a 3d domain).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }
}

impl Radial for Vec3 {
    fn zero() -> Self {
        Vec3::new(0.0, 0.0, 0.0)
    }

    fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn scale(self, a: f64) -> Self {
        Vec3::new(a * self.x, a * self.y, a * self.z)
    }

    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
}

/// Scalar data of one graph at one temperature: slope and the two
/// activation thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    /// `2 nu(e)` for the bulk graph, `gamma(e)` for the wall graph.
    pub slope: f64,
    /// Rate-side threshold: `tau1(e)` / `sigma1(e)`.
    pub t_rate: f64,
    /// Force-side threshold: `tau2(e)` / `sigma2(e)`.
    pub t_force: f64,
}

impl GraphParams {
    /// Bulk graph data at internal energy `e`.
    pub fn bulk(cs: &CoefficientSet, e: f64) -> Self {
        GraphParams {
            slope: 2.0 * cs.nu.eval(e),
            t_rate: cs.tau1.eval(e),
            t_force: cs.tau2.eval(e),
        }
    }

    /// Wall graph data at internal energy `e`.
    pub fn wall(cs: &CoefficientSet, e: f64) -> Self {
        GraphParams {
            slope: cs.gamma.eval(e),
            t_rate: cs.sigma1.eval(e),
            t_force: cs.sigma2.eval(e),
        }
    }
}

/// Which side of the graph is requested from [`resolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolveDirection {
    /// Compute the force-like partner (stress / traction) from the
    /// rate-like variable. Total: the zero selection applies below the
    /// rate threshold.
    ForceFromRate,
    /// Compute the rate-like partner (shear rate / slip) from the
    /// force-like variable. Only single-valued while the rate threshold is
    /// inactive (`t1(e) = 0`).
    RateFromForce,
}

/// Scalar factor of the regularized graph: `Y = factor * X` with
/// `factor = min{ k + mu, (mu (|X| - t1)^+ + t2) / |X| }`, extended by its
/// steep-branch limit at `X = 0`. Always in `[0, k + mu]`.
pub fn regularized_factor(x_norm: f64, p: GraphParams, k: RegularizationLevel) -> f64 {
    debug_assert!(x_norm >= 0.0);
    let steep = k.as_f64() + p.slope;
    if x_norm <= ZERO_NORM_GUARD {
        return steep;
    }
    let flat = (p.slope * (x_norm - p.t_rate).max(0.0) + p.t_force) / x_norm;
    steep.min(flat)
}

/// Magnitude of the exact-graph force for a given rate magnitude, using the
/// zero selection on the multivalued set: below the rate threshold the
/// force is 0, above it `mu (|X| - t1)^+ + t2`.
pub fn exact_force_norm(x_norm: f64, p: GraphParams) -> f64 {
    let g = p.slope * (x_norm - p.t_rate).max(0.0);
    if g > 0.0 {
        g + p.t_force
    } else {
        0.0
    }
}

/// Regularized single-valued image `Y = factor(|X|) X`.
pub fn regularized_image<T: Radial>(x: T, p: GraphParams, k: RegularizationLevel) -> T {
    let n = x.norm();
    if n <= ZERO_NORM_GUARD {
        return T::zero();
    }
    x.scale(regularized_factor(n, p, k))
}

/// Frobenius distance between the two sides of the graph relation; zero
/// exactly on the graph.
pub fn membership_residual<T: Radial>(force: T, rate: T, p: GraphParams) -> f64 {
    let xn = rate.norm();
    let yn = force.norm();
    let lhs = if xn <= ZERO_NORM_GUARD {
        T::zero()
    } else {
        rate.scale(p.slope * (xn - p.t_rate).max(0.0) / xn)
    };
    let rhs = if yn <= ZERO_NORM_GUARD {
        T::zero()
    } else {
        force.scale((yn - p.t_force).max(0.0) / yn)
    };
    lhs.sub(rhs).norm()
}

/// Graph membership up to `tol`, measured relative to `max(1, |X|, |Y|)`.
pub fn graph_contains<T: Radial>(force: T, rate: T, p: GraphParams, tol: f64) -> bool {
    let scale = 1.0_f64.max(rate.norm()).max(force.norm());
    membership_residual(force, rate, p) <= tol * scale
}

/// Exact-graph partner of `known` in the requested direction.
///
/// `ForceFromRate` is total: for a nonzero rate the partner is uniquely
/// determined, and at zero rate the zero selection is returned.
/// `RateFromForce` is available whenever the rate threshold is off
/// (`t1(e) = 0`); with an active rate threshold only the zero selection at
/// zero force is defined and any other force reports
/// [`GraphError::BranchUnavailable`].
pub fn resolve<T: Radial>(
    known: T,
    p: GraphParams,
    direction: ResolveDirection,
) -> Result<T, GraphError> {
    match direction {
        ResolveDirection::ForceFromRate => {
            let n = known.norm();
            if n <= ZERO_NORM_GUARD {
                return Ok(T::zero());
            }
            let y = exact_force_norm(n, p);
            Ok(known.scale(y / n))
        }
        ResolveDirection::RateFromForce => {
            let n = known.norm();
            if p.t_rate > 0.0 {
                if n <= ZERO_NORM_GUARD {
                    return Ok(T::zero());
                }
                return Err(GraphError::BranchUnavailable);
            }
            if n <= ZERO_NORM_GUARD {
                return Ok(T::zero());
            }
            Ok(known.scale((n - p.t_force).max(0.0) / (p.slope * n)))
        }
    }
}

/// Result of projecting a regularized point onto the exact graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T: Radial> {
    pub force: T,
    pub rate: T,
    /// Norm of the rate correction; bounded by `t2(e) / (k + mu(e))`.
    pub displacement: f64,
}

/// Moves a point of the regularized graph onto the exact graph.
///
/// The force variable is kept; if its magnitude lies below the steep-branch
/// cap `t2 (1 + mu/k)` the rate is replaced by the exact-graph partner
/// `(|Y| - t2)^+ Y / (mu |Y|)`, otherwise the point is already exact and
/// passes through unchanged. Errors if `(force, rate)` is not on the
/// regularized graph to within `tol` (relative to `max(1, |X|, |Y|)`).
pub fn project<T: Radial>(
    force: T,
    rate: T,
    p: GraphParams,
    k: RegularizationLevel,
    tol: f64,
) -> Result<Projection<T>, GraphError> {
    let predicted = regularized_image(rate, p, k);
    let residual = force.sub(predicted).norm();
    let scale = 1.0_f64.max(rate.norm()).max(force.norm());
    if residual > tol * scale {
        return Err(GraphError::NotOnApproximateGraph { residual });
    }

    let yn = force.norm();
    let cap = p.t_force * (1.0 + p.slope / k.as_f64());
    if yn < cap {
        let new_rate = if yn <= ZERO_NORM_GUARD {
            T::zero()
        } else {
            force.scale((yn - p.t_force).max(0.0) / (p.slope * yn))
        };
        let displacement = new_rate.sub(rate).norm();
        Ok(Projection {
            force,
            rate: new_rate,
            displacement,
        })
    } else {
        Ok(Projection {
            force,
            rate,
            displacement: 0.0,
        })
    }
}

// ---------------------------------------------------------------------------
// Bulk / wall wrappers
// ---------------------------------------------------------------------------

/// A stress/rate pair at one temperature (bulk graph state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BulkTriplet<T: Radial> {
    pub stress: T,
    pub rate: T,
    pub energy: f64,
}

impl<T: Radial> BulkTriplet<T> {
    pub fn is_member(&self, cs: &CoefficientSet, tol: f64) -> bool {
        graph_contains(self.stress, self.rate, GraphParams::bulk(cs, self.energy), tol)
    }
}

/// A traction/slip pair at one temperature (wall graph state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallTriplet<V: Radial> {
    pub traction: V,
    pub slip: V,
    pub energy: f64,
}

impl<V: Radial> WallTriplet<V> {
    pub fn is_member(&self, cs: &CoefficientSet, tol: f64) -> bool {
        graph_contains(self.traction, self.slip, GraphParams::wall(cs, self.energy), tol)
    }
}

/// Regularized bulk stress `S^k(D, e)`.
pub fn bulk_stress_regularized<T: Radial>(
    rate: T,
    e: f64,
    k: RegularizationLevel,
    cs: &CoefficientSet,
) -> T {
    regularized_image(rate, GraphParams::bulk(cs, e), k)
}

/// Regularized wall traction `s^k(v_t, e)`.
pub fn wall_traction_regularized<V: Radial>(
    slip: V,
    e: f64,
    k: RegularizationLevel,
    cs: &CoefficientSet,
) -> V {
    regularized_image(slip, GraphParams::wall(cs, e), k)
}

/// Membership test for the exact bulk graph.
pub fn bulk_membership<T: Radial>(stress: T, rate: T, e: f64, cs: &CoefficientSet, tol: f64) -> bool {
    graph_contains(stress, rate, GraphParams::bulk(cs, e), tol)
}

/// Membership test for the exact wall graph.
pub fn wall_membership<V: Radial>(traction: V, slip: V, e: f64, cs: &CoefficientSet, tol: f64) -> bool {
    graph_contains(traction, slip, GraphParams::wall(cs, e), tol)
}

/// Exact bulk partner (see [`resolve`] for the branch rules).
pub fn resolve_bulk<T: Radial>(
    known: T,
    e: f64,
    direction: ResolveDirection,
    cs: &CoefficientSet,
) -> Result<T, GraphError> {
    resolve(known, GraphParams::bulk(cs, e), direction)
}

/// Exact wall partner (see [`resolve`] for the branch rules).
pub fn resolve_wall<V: Radial>(
    known: V,
    e: f64,
    direction: ResolveDirection,
    cs: &CoefficientSet,
) -> Result<V, GraphError> {
    resolve(known, GraphParams::wall(cs, e), direction)
}

/// Projects a regularized bulk point onto the exact bulk graph.
pub fn project_bulk<T: Radial>(
    stress: T,
    rate: T,
    e: f64,
    k: RegularizationLevel,
    cs: &CoefficientSet,
    tol: f64,
) -> Result<Projection<T>, GraphError> {
    project(stress, rate, GraphParams::bulk(cs, e), k, tol)
}

/// Projects a regularized wall point onto the exact wall graph.
pub fn project_wall<V: Radial>(
    traction: V,
    slip: V,
    e: f64,
    k: RegularizationLevel,
    cs: &CoefficientSet,
    tol: f64,
) -> Result<Projection<V>, GraphError> {
    project(traction, slip, GraphParams::wall(cs, e), k, tol)
}

/// Coercivity constants certified for the bulk graph:
/// `S : D >= alpha (|S|^2 + |D|^2) - beta` with
/// `alpha = min(1/(16 c2), c1)` and `beta = c0^2 / (4 c2)`.
pub fn bulk_coercivity_constants(cs: &CoefficientSet) -> (f64, f64) {
    let alpha = (1.0 / (16.0 * cs.c2)).min(cs.c1);
    let beta = cs.c0 * cs.c0 / (4.0 * cs.c2);
    (alpha, beta)
}

/// Coercivity constants for the wall graph (same pattern, adjusted for the
/// slope being `gamma` rather than `2 nu`):
/// `alpha = min(1/(8 c2), c1/2)`, `beta = c0^2 / (2 c2)`.
pub fn wall_coercivity_constants(cs: &CoefficientSet) -> (f64, f64) {
    let alpha = (1.0 / (8.0 * cs.c2)).min(0.5 * cs.c1);
    let beta = cs.c0 * cs.c0 / (2.0 * cs.c2);
    (alpha, beta)
}

// ---------------------------------------------------------------------------
// Sampling and property verification
// ---------------------------------------------------------------------------

/// Types that can draw a random unit direction (used by the property
/// suites; tensors are drawn traceless).
pub trait SampleDirection: Radial {
    fn sample_direction(rng: &mut ChaCha8Rng) -> Self;
}

fn nonzero<T: Radial>(t: T) -> Option<T> {
    let n = t.norm();
    if n > 1e-3 {
        Some(t.scale(1.0 / n))
    } else {
        None
    }
}

impl SampleDirection for SymTensor2 {
    fn sample_direction(rng: &mut ChaCha8Rng) -> Self {
        loop {
            let a = rng.gen_range(-1.0..1.0);
            let b = rng.gen_range(-1.0..1.0);
            if let Some(t) = nonzero(SymTensor2::new(a, -a, b)) {
                return t;
            }
        }
    }
}

impl SampleDirection for SymTensor3 {
    fn sample_direction(rng: &mut ChaCha8Rng) -> Self {
        loop {
            let d: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let m = (d[0] + d[1] + d[2]) / 3.0;
            let t = SymTensor3::new(
                d[0] - m,
                d[1] - m,
                d[2] - m,
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if let Some(t) = nonzero(t) {
                return t;
            }
        }
    }
}

impl SampleDirection for Vec2 {
    fn sample_direction(rng: &mut ChaCha8Rng) -> Self {
        loop {
            let v = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if let Some(v) = nonzero(v) {
                return v;
            }
        }
    }
}

impl SampleDirection for Vec3 {
    fn sample_direction(rng: &mut ChaCha8Rng) -> Self {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if let Some(v) = nonzero(v) {
                return v;
            }
        }
    }
}

/// Draws a (force, rate) pair lying exactly on the graph: the flowing
/// branch through a random rate, or a point inside one of the activation
/// sets (force ball at zero rate / rate ball at zero force).
pub fn sample_exact_point<T: SampleDirection>(
    rng: &mut ChaCha8Rng,
    p: GraphParams,
    ball: f64,
) -> (T, T) {
    let pick: f64 = rng.gen();
    if pick < 0.15 && p.t_force > 0.0 {
        // Multivalued force set at zero rate.
        let dir = T::sample_direction(rng);
        let mag = rng.gen_range(0.0..=1.0) * p.t_force;
        return (dir.scale(mag), T::zero());
    }
    if pick < 0.3 && p.t_rate > 0.0 {
        // Multivalued rate set at zero force.
        let dir = T::sample_direction(rng);
        let mag = rng.gen_range(0.0..=1.0) * p.t_rate;
        return (T::zero(), dir.scale(mag));
    }
    if pick < 0.35 {
        return (T::zero(), T::zero());
    }
    let dir = T::sample_direction(rng);
    let mag = rng.gen_range(0.0..ball);
    let rate = dir.scale(mag);
    let force = dir.scale(exact_force_norm(mag, p));
    (force, rate)
}

/// Draws a (force, rate) pair on the regularized graph.
pub fn sample_regularized_point<T: SampleDirection>(
    rng: &mut ChaCha8Rng,
    p: GraphParams,
    k: RegularizationLevel,
    ball: f64,
) -> (T, T) {
    if rng.gen::<f64>() < 0.05 {
        return (T::zero(), T::zero());
    }
    let dir = T::sample_direction(rng);
    // Mix linear and logarithmic magnitudes so the steep branch
    // (|X| of order t2/k) is well represented.
    let mag = if rng.gen::<f64>() < 0.5 {
        rng.gen_range(0.0..ball)
    } else {
        ball * 10f64.powf(rng.gen_range(-12.0..0.0))
    };
    let rate = dir.scale(mag);
    (regularized_image(rate, p, k), rate)
}

/// One verified property with its worst observed margin.
#[derive(Debug, Clone)]
pub struct PropertyCheck {
    pub name: String,
    pub pass: bool,
    /// Worst observed value of the slack (negative means violation).
    pub worst_slack: f64,
    /// Slack values below this fail the check.
    pub tolerance: f64,
    pub samples: usize,
}

impl fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<44} {}  worst slack {:+.3e} (tol {:+.1e}, {} samples)",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.worst_slack,
            self.tolerance,
            self.samples
        )
    }
}

/// Report of [`run_property_suite`].
#[derive(Debug, Clone, Default)]
pub struct PropertySuiteReport {
    pub checks: Vec<PropertyCheck>,
}

impl PropertySuiteReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Options for the randomized property suite.
#[derive(Debug, Clone)]
pub struct PropertyOptions {
    /// Sample pairs per individual check.
    pub samples: usize,
    /// Regularization levels to exercise.
    pub k_list: Vec<u32>,
    pub seed: u64,
    /// Radius of the sampled rate/force balls.
    pub ball: f64,
}

impl Default for PropertyOptions {
    fn default() -> Self {
        PropertyOptions {
            samples: 100_000,
            k_list: vec![1, 8, 64],
            seed: 42,
            ball: 10.0,
        }
    }
}

struct SlackTracker {
    worst: f64,
    count: usize,
}

impl SlackTracker {
    fn new() -> Self {
        SlackTracker {
            worst: f64::INFINITY,
            count: 0,
        }
    }

    fn record(&mut self, slack: f64) {
        self.worst = self.worst.min(slack);
        self.count += 1;
    }

    fn into_check(self, name: String, tolerance: f64) -> PropertyCheck {
        PropertyCheck {
            pass: self.worst >= tolerance && self.count > 0,
            name,
            worst_slack: self.worst,
            tolerance,
            samples: self.count,
        }
    }
}

fn random_energy(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-0.5..3.0)
}

/// Monotonicity, coercivity, collinearity, dissipation, and projection
/// consistency, verified on seeded random samples of the exact and
/// regularized graphs for both the bulk (tensor) and wall (vector)
/// variables, in two and three dimensions.
pub fn run_property_suite(cs: &CoefficientSet, opts: &PropertyOptions) -> PropertySuiteReport {
    let mut report = PropertySuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (alpha_b, beta_b) = bulk_coercivity_constants(cs);
    let (alpha_w, beta_w) = wall_coercivity_constants(cs);

    // Exact-graph checks, bulk (2d and 3d tensors) and wall (2d/3d vectors).
    bulk_exact_checks::<SymTensor2>(cs, opts, &mut rng, alpha_b, beta_b, "bulk 2d", &mut report);
    bulk_exact_checks::<SymTensor3>(cs, opts, &mut rng, alpha_b, beta_b, "bulk 3d", &mut report);
    wall_exact_checks::<Vec2>(cs, opts, &mut rng, alpha_w, beta_w, "wall 2d", &mut report);
    wall_exact_checks::<Vec3>(cs, opts, &mut rng, alpha_w, beta_w, "wall 3d", &mut report);

    // Regularized-graph checks per level.
    for &kk in &opts.k_list {
        let k = RegularizationLevel::new(kk).expect("k >= 1");
        regularized_checks::<SymTensor3>(cs, opts, &mut rng, k, alpha_b, beta_b, &mut report);
    }

    report
}

fn bulk_exact_checks<T: SampleDirection>(
    cs: &CoefficientSet,
    opts: &PropertyOptions,
    rng: &mut ChaCha8Rng,
    alpha: f64,
    beta: f64,
    label: &str,
    report: &mut PropertySuiteReport,
) {
    let mut mono = SlackTracker::new();
    let mut coer = SlackTracker::new();
    let mut diss = SlackTracker::new();
    let mut coll = SlackTracker::new();
    let mut memb = SlackTracker::new();
    for _ in 0..opts.samples {
        let e = random_energy(rng);
        let p = GraphParams::bulk(cs, e);
        let (s1, d1) = sample_exact_point::<T>(rng, p, opts.ball);
        let (s2, d2) = sample_exact_point::<T>(rng, p, opts.ball);
        mono.record(s1.sub(s2).dot(d1.sub(d2)));
        let sd = s1.dot(d1);
        coer.record(sd - alpha * (s1.dot(s1) + d1.dot(d1)) + beta);
        diss.record(sd);
        // Collinearity: |D| S = |S| D whenever both are nonzero.
        coll.record(-(s1.scale(d1.norm()).sub(d1.scale(s1.norm()))).norm());
        memb.record(-membership_residual(s1, d1, p));
    }
    report.checks.push(mono.into_check(format!("{label} exact monotonicity"), -1e-12));
    report.checks.push(coer.into_check(format!("{label} exact coercivity"), -1e-9));
    report.checks.push(diss.into_check(format!("{label} exact dissipation >= 0"), -1e-13));
    report.checks.push(coll.into_check(format!("{label} exact collinearity"), -1e-10));
    report.checks.push(memb.into_check(format!("{label} exact membership"), -1e-10));
}

fn wall_exact_checks<V: SampleDirection>(
    cs: &CoefficientSet,
    opts: &PropertyOptions,
    rng: &mut ChaCha8Rng,
    alpha: f64,
    beta: f64,
    label: &str,
    report: &mut PropertySuiteReport,
) {
    let mut mono = SlackTracker::new();
    let mut coer = SlackTracker::new();
    let mut diss = SlackTracker::new();
    for _ in 0..opts.samples {
        let e = random_energy(rng);
        let p = GraphParams::wall(cs, e);
        let (s1, v1) = sample_exact_point::<V>(rng, p, opts.ball);
        let (s2, v2) = sample_exact_point::<V>(rng, p, opts.ball);
        mono.record(s1.sub(s2).dot(v1.sub(v2)));
        coer.record(s1.dot(v1) - alpha * (s1.dot(s1) + v1.dot(v1)) + beta);
        diss.record(s1.dot(v1));
    }
    report.checks.push(mono.into_check(format!("{label} exact monotonicity"), -1e-12));
    report.checks.push(coer.into_check(format!("{label} exact coercivity"), -1e-9));
    report.checks.push(diss.into_check(format!("{label} exact dissipation >= 0"), -1e-13));
}

fn regularized_checks<T: SampleDirection>(
    cs: &CoefficientSet,
    opts: &PropertyOptions,
    rng: &mut ChaCha8Rng,
    k: RegularizationLevel,
    alpha: f64,
    beta: f64,
    report: &mut PropertySuiteReport,
) {
    let mut mono = SlackTracker::new();
    let mut coer = SlackTracker::new();
    let mut lip = SlackTracker::new();
    let mut cons = SlackTracker::new();
    let mut disp = SlackTracker::new();
    for _ in 0..opts.samples {
        let e = random_energy(rng);
        let p = GraphParams::bulk(cs, e);
        let (s1, d1) = sample_regularized_point::<T>(rng, p, k, opts.ball);
        let (s2, d2) = sample_regularized_point::<T>(rng, p, k, opts.ball);
        mono.record(s1.sub(s2).dot(d1.sub(d2)));
        coer.record(s1.dot(d1) - alpha * (s1.dot(s1) + d1.dot(d1)) + beta);
        // Sharp Lipschitz bound for a radial monotone map: both the radial
        // slope and the secant factor stay below k + mu.
        let denom = d1.sub(d2).norm();
        if denom > 1e-12 {
            let lhs = s1.sub(s2).norm();
            lip.record((k.as_f64() + p.slope) * denom * (1.0 + 1e-12) - lhs);
        }
        // Projection consistency: landing point is on the exact graph, and
        // the displacement respects the per-temperature bound.
        let proj = project(s1, d1, p, k, 1e-8).expect("sampled on the regularized graph");
        cons.record(-membership_residual(proj.force, proj.rate, p));
        disp.record(2.0 * p.t_force / k.as_f64() - proj.displacement + 1e-15);
    }
    let kk = k.get();
    report.checks.push(mono.into_check(format!("bulk k={kk} monotonicity"), -1e-12));
    report.checks.push(coer.into_check(format!("bulk k={kk} coercivity"), -1e-9));
    report.checks.push(lip.into_check(format!("bulk k={kk} Lipschitz envelope"), -1e-9));
    report.checks.push(cons.into_check(format!("bulk k={kk} projection lands on graph"), -1e-10));
    report.checks.push(disp.into_check(format!("bulk k={kk} projection displacement bound"), 0.0));
}

/// One row of the graph-distance study.
#[derive(Debug, Clone, Copy)]
pub struct DistanceRow {
    pub k: u32,
    /// Largest rate displacement needed to land on the exact graph.
    pub max_displacement: f64,
    /// A priori bound `2 c0 / k`.
    pub bound: f64,
}

/// Measures how far the regularized bulk graph sits from the exact one.
///
/// For each level `k`, points of the regularized graph are sampled over the
/// given temperatures with rate magnitudes spanning the steep branch and
/// force magnitudes capped by `ball_radius`; the reported distance is the
/// largest projection displacement. Analytically the maximum is
/// `max_e tau2(e) / (k + 2 nu(e))`, so successive `k` doublings shrink it
/// by a factor close to (but slightly below) 2.
pub fn graph_distance_study(
    cs: &CoefficientSet,
    e_samples: &[f64],
    ball_radius: f64,
    k_list: &[u32],
) -> Vec<DistanceRow> {
    let mut rows = Vec::with_capacity(k_list.len());
    for &kk in k_list {
        let k = RegularizationLevel::new(kk).expect("k >= 1");
        let mut max_disp: f64 = 0.0;
        for &e in e_samples {
            let p = GraphParams::bulk(cs, e);
            if p.t_force <= 0.0 {
                continue;
            }
            // The displacement peaks at |S| = t2, i.e. |D| = t2/(k + mu);
            // sweep the whole trigger zone |D| <= t2/k densely plus a tail.
            let d_star = p.t_force / k.as_f64();
            let samples = 400;
            for i in 0..=samples {
                let d = d_star * 1.5 * (i as f64) / (samples as f64);
                let rate = SymTensor2::unit_shear().scale(d);
                let force = regularized_image(rate, p, k);
                if force.norm() > ball_radius {
                    break;
                }
                let proj = project(force, rate, p, k, 1e-8).expect("on graph by construction");
                max_disp = max_disp.max(proj.displacement);
            }
        }
        rows.push(DistanceRow {
            k: kk,
            max_displacement: max_disp,
            bound: 2.0 * cs.c0 / (kk as f64),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::PiecewiseLinear;

    const TOL: f64 = 1e-12;

    fn bingham_unit() -> CoefficientSet {
        // nu = 1, tau2 = 1, tau1 = 0: the cold state of the example family.
        let mut cs = CoefficientSet::newtonian();
        cs.tau2 = PiecewiseLinear::constant(1.0);
        cs
    }

    fn euler_unit() -> CoefficientSet {
        // nu = 1, tau1 = 1, tau2 = 0: rate-activated (hot) state.
        let mut cs = CoefficientSet::newtonian();
        cs.tau1 = PiecewiseLinear::constant(1.0);
        cs
    }

    fn shear2(mag: f64) -> SymTensor2 {
        SymTensor2::unit_shear().scale(mag)
    }

    #[test]
    fn regularized_steep_branch_example() {
        // nu = 1, tau2 = 1, k = 10, |D| = 0.05: the flat branch would give
        // factor (2*0.05 + 1)/0.05 = 22, the steep branch caps it at
        // k + 2 nu = 12, so S = 12 D and |S| = 0.6.
        let cs = bingham_unit();
        let k = RegularizationLevel::new(10).unwrap();
        let d = shear2(0.05);
        let s = bulk_stress_regularized(d, 0.0, k, &cs);
        assert!((s.norm() - 0.6).abs() < TOL);
        assert!(s.sub(d.scale(12.0)).norm() < TOL);
    }

    #[test]
    fn regularized_matches_exact_past_activation() {
        // tau1 = 1, |D| = 3: regularized and exact agree, |S| = 2(3-1) = 4.
        let cs = euler_unit();
        let k = RegularizationLevel::new(10).unwrap();
        let d = shear2(3.0);
        let s = bulk_stress_regularized(d, 0.0, k, &cs);
        assert!((s.norm() - 4.0).abs() < TOL);
        let s_exact = resolve_bulk(d, 0.0, ResolveDirection::ForceFromRate, &cs).unwrap();
        assert!(s.sub(s_exact).norm() < TOL);
    }

    #[test]
    fn regularized_vanishes_below_rate_threshold_without_regularization_excess() {
        // tau1 = 1, |D| = 0.5 < tau1 and tau2 = 0: the flat branch gives 0,
        // which beats the steep branch.
        let cs = euler_unit();
        let k = RegularizationLevel::new(10).unwrap();
        let s = bulk_stress_regularized(shear2(0.5), 0.0, k, &cs);
        assert_eq!(s.norm(), 0.0);
    }

    #[test]
    fn regularized_zero_rate_gives_zero_stress() {
        let cs = bingham_unit();
        let k = RegularizationLevel::new(7).unwrap();
        let s = bulk_stress_regularized(SymTensor2::zero(), 0.0, k, &cs);
        assert_eq!(s.norm(), 0.0);
    }

    #[test]
    fn wall_regularized_steep_branch_example() {
        // sigma2 = 1, sigma1 = 0, gamma = 1, k = 10, |v| = 0.05:
        // flat branch (0.05 + 1)/0.05 = 21 vs steep k + gamma = 11.
        let mut cs = CoefficientSet::stick_slip();
        cs.sigma2 = PiecewiseLinear::constant(1.0);
        let k = RegularizationLevel::new(10).unwrap();
        let v = Vec2::new(0.05, 0.0);
        let s = wall_traction_regularized(v, 0.0, k, &cs);
        assert!((s.norm() - 0.55).abs() < TOL);
        assert!((s.x - 11.0 * v.x).abs() < TOL);
    }

    #[test]
    fn membership_newtonian_examples() {
        let cs = CoefficientSet::newtonian();
        let d = shear2(1.0);
        assert!(bulk_membership(d.scale(2.0), d, 0.5, &cs, DEFAULT_MEMBERSHIP_TOL));
        // S = 2.1 D misses by 0.1 |D|, far above the tolerance.
        assert!(!bulk_membership(d.scale(2.1), d, 0.5, &cs, DEFAULT_MEMBERSHIP_TOL));
    }

    #[test]
    fn membership_inside_stress_activation_ball() {
        // tau2 = 1: any |S| <= 1 pairs with D = 0.
        let cs = bingham_unit();
        let s = shear2(0.5);
        assert!(bulk_membership(s, SymTensor2::zero(), 0.0, &cs, DEFAULT_MEMBERSHIP_TOL));
        let s = shear2(1.0);
        assert!(bulk_membership(s, SymTensor2::zero(), 0.0, &cs, DEFAULT_MEMBERSHIP_TOL));
        let s = shear2(1.01);
        assert!(!bulk_membership(s, SymTensor2::zero(), 0.0, &cs, DEFAULT_MEMBERSHIP_TOL));
    }

    #[test]
    fn resolve_rate_from_stress_below_threshold() {
        // tau2 = 1, |S| = 0.5 -> D = 0.
        let cs = bingham_unit();
        let d = resolve_bulk(shear2(0.5), 0.0, ResolveDirection::RateFromForce, &cs).unwrap();
        assert_eq!(d.norm(), 0.0);
    }

    #[test]
    fn resolve_rate_from_stress_above_threshold() {
        // tau2 = 1, nu = 1, |S| = 3 -> |D| = (3 - 1)/2 = 1, collinear.
        let cs = bingham_unit();
        let s = shear2(3.0);
        let d = resolve_bulk(s, 0.0, ResolveDirection::RateFromForce, &cs).unwrap();
        assert!((d.norm() - 1.0).abs() < TOL);
        assert!(d.sub(s.scale(1.0 / 3.0)).norm() < TOL);
    }

    #[test]
    fn resolve_stress_from_rate_examples() {
        // tau1 = 1, nu = 1, |D| = 3 -> |S| = 2 (3 - 1) = 4.
        let cs = euler_unit();
        let s = resolve_bulk(shear2(3.0), 0.0, ResolveDirection::ForceFromRate, &cs).unwrap();
        assert!((s.norm() - 4.0).abs() < TOL);
        // Zero selection at D = 0 even with an active stress threshold.
        let cs = bingham_unit();
        let s =
            resolve_bulk(SymTensor2::zero(), 0.0, ResolveDirection::ForceFromRate, &cs).unwrap();
        assert_eq!(s.norm(), 0.0);
        // Bingham flowing branch: |D| = 0.5 -> |S| = 2*0.5 + 1 = 2.
        let s = resolve_bulk(shear2(0.5), 0.0, ResolveDirection::ForceFromRate, &cs).unwrap();
        assert!((s.norm() - 2.0).abs() < TOL);
    }

    #[test]
    fn resolve_reports_unavailable_branch() {
        // tau1 = 1: S -> D is multivalued off the origin.
        let cs = euler_unit();
        let err = resolve_bulk(shear2(0.5), 0.0, ResolveDirection::RateFromForce, &cs);
        assert_eq!(err.unwrap_err(), GraphError::BranchUnavailable);
        // ... but the zero selection at S = 0 is defined.
        let d =
            resolve_bulk(SymTensor2::zero(), 0.0, ResolveDirection::RateFromForce, &cs).unwrap();
        assert_eq!(d.norm(), 0.0);
    }

    #[test]
    fn projection_example() {
        // nu = 1, tau2 = 1, k = 10. The regularized point with |S| = 1.05
        // has |D| = 1.05/12 = 0.0875 on the steep branch; projecting keeps S
        // and moves D to (1.05 - 1)/2 = 0.025, a displacement of 0.0625,
        // well under the bound 2 tau2 / k = 0.2.
        let cs = bingham_unit();
        let k = RegularizationLevel::new(10).unwrap();
        let d = shear2(1.05 / 12.0);
        let s = bulk_stress_regularized(d, 0.0, k, &cs);
        assert!((s.norm() - 1.05).abs() < TOL);
        let proj = project_bulk(s, d, 0.0, k, &cs, 1e-9).unwrap();
        assert!((proj.rate.norm() - 0.025).abs() < TOL);
        assert!((proj.displacement - 0.0625).abs() < TOL);
        assert!(proj.displacement <= 0.2);
        assert!(bulk_membership(proj.force, proj.rate, 0.0, &cs, 1e-10));
    }

    #[test]
    fn projection_is_identity_without_stress_activation() {
        // Newtonian temperature: tau2 = 0, nothing to correct.
        let cs = CoefficientSet::newtonian();
        let k = RegularizationLevel::new(10).unwrap();
        let d = shear2(0.3);
        let s = bulk_stress_regularized(d, 1.0, k, &cs);
        let proj = project_bulk(s, d, 1.0, k, &cs, 1e-9).unwrap();
        assert_eq!(proj.displacement, 0.0);
        assert!(proj.rate.sub(d).norm() == 0.0);
    }

    #[test]
    fn projection_rejects_points_off_the_regularized_graph() {
        let cs = bingham_unit();
        let k = RegularizationLevel::new(10).unwrap();
        let d = shear2(0.05);
        let bogus = d.scale(20.0); // true factor is 12
        match project_bulk(bogus, d, 0.0, k, &cs, 1e-9) {
            Err(GraphError::NotOnApproximateGraph { residual }) => assert!(residual > 0.1),
            other => panic!("expected NotOnApproximateGraph, got {other:?}"),
        }
    }

    #[test]
    fn property_suite_passes_on_example_family() {
        let cs = CoefficientSet::activated_example();
        let opts = PropertyOptions {
            samples: 8_000,
            k_list: vec![1, 8, 64],
            seed: 7,
            ball: 10.0,
        };
        let report = run_property_suite(&cs, &opts);
        for check in &report.checks {
            assert!(check.pass, "{check}");
        }
    }

    #[test]
    fn property_suite_flags_corrupted_viscosity() {
        // Injecting nu < 0 breaks monotonicity/dissipation; the suite must
        // say so rather than silently pass.
        let mut cs = CoefficientSet::activated_example();
        cs.nu = PiecewiseLinear::constant(-1.0);
        let opts = PropertyOptions {
            samples: 2_000,
            k_list: vec![8],
            seed: 11,
            ball: 4.0,
        };
        let report = run_property_suite(&cs, &opts);
        assert!(!report.pass());
    }

    #[test]
    fn distance_study_tracks_inverse_k() {
        let cs = CoefficientSet::activated_example();
        let es: Vec<f64> = (0..=60).map(|i| -0.5 + 3.5 * (i as f64) / 60.0).collect();
        let rows = graph_distance_study(&cs, &es, 50.0, &[10, 20]);
        // Analytic maximum: max_e tau2(e)/(k + 2 nu(e)) = 1/(k + 2).
        assert!((rows[0].max_displacement - 1.0 / 12.0).abs() < 2e-3);
        assert!((rows[1].max_displacement - 1.0 / 22.0).abs() < 2e-3);
        let ratio = rows[0].max_displacement / rows[1].max_displacement;
        assert!((ratio - 22.0 / 12.0).abs() < 0.05, "ratio {ratio}");
        // Both sit under the a priori bound 2 c0 / k.
        assert!(rows[0].max_displacement <= rows[0].bound);
        assert!(rows[1].max_displacement <= rows[1].bound);
    }

    #[test]
    fn coercivity_constants_match_definition() {
        let cs = CoefficientSet::newtonian(); // c1 = 0.5, c2 = 2, c0 = 1
        let (alpha, beta) = bulk_coercivity_constants(&cs);
        assert_eq!(alpha, 1.0 / 32.0);
        assert_eq!(beta, 0.125);
    }

    #[test]
    fn tensor3_algebra_counts_off_diagonals_twice() {
        let t = SymTensor3::new(1.0, -1.0, 0.0, 2.0, 0.0, 0.0);
        assert!((t.norm() - (1.0f64 + 1.0 + 8.0).sqrt()).abs() < TOL);
        assert_eq!(t.trace(), 0.0);
    }
}
