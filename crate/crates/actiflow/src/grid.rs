//! Staggered rectangular grid, discrete fields, and the discrete
//! differential operators used by the flow solver.
//!
//! Layout (MAC staggering):
//!
//! * scalars (pressure, internal energy) live at cell centers
//!   `((i+1/2) hx, (j+1/2) hy)`, `nx x ny` values;
//! * `u` (x-velocity) lives on vertical faces `(i hx, (j+1/2) hy)` —
//!   `nx` columns when x is periodic, `nx+1` when x has walls;
//! * `v` (y-velocity) lives on horizontal faces `((i+1/2) hx, j hy)` —
//!   `ny` rows when y is periodic, `ny+1` when y has walls;
//! * node quantities (the shear component of the rate tensor) live at cell
//!   corners `(i hx, j hy)`, aligned with u-columns x v-rows.
//!
//! Wall faces carry exactly zero normal velocity (impermeability). The
//! discrete operators are built as summation-by-parts pairs: `divergence`
//! telescopes over faces, `pressure_gradient` is its negative adjoint under
//! the natural volume weights, and the Neumann Laplacian is *literally* the
//! composition `div(grad(.))`, which the pressure solve and the energy
//! budgets rely on.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

/// Boundary treatment of one axis: both sides periodic or both sides walls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SidePair {
    Periodic,
    Walls,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridError {
    TooCoarse { nx: usize, ny: usize },
    BadExtent { lx: f64, ly: f64 },
}

impl fmt::Display for GridError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridError::TooCoarse { nx, ny } => {
                write!(f, "grid must be at least 4x4 cells, got {nx}x{ny}")
            }
            GridError::BadExtent { lx, ly } => {
                write!(f, "domain extents must be positive, got {lx} x {ly}")
            }
        }
    }
}

impl std::error::Error for GridError {}

/// Rectangular staggered grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub bc_x: SidePair,
    pub bc_y: SidePair,
}

impl Grid {
    pub fn new(
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
        bc_x: SidePair,
        bc_y: SidePair,
    ) -> Result<Grid, GridError> {
        if nx < 4 || ny < 4 {
            return Err(GridError::TooCoarse { nx, ny });
        }
        if !(lx > 0.0) || !(ly > 0.0) {
            return Err(GridError::BadExtent { lx, ly });
        }
        Ok(Grid { nx, ny, lx, ly, bc_x, bc_y })
    }

    /// Canonical channel: periodic in x, walls at y = 0 and y = Ly.
    pub fn channel(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Grid, GridError> {
        Grid::new(nx, ny, lx, ly, SidePair::Periodic, SidePair::Walls)
    }

    /// Fully periodic torus (manufactured-solution studies).
    pub fn periodic(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Grid, GridError> {
        Grid::new(nx, ny, lx, ly, SidePair::Periodic, SidePair::Periodic)
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.hx() * self.hy()
    }

    pub fn center_dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// (columns, rows) of the u-field.
    pub fn u_dims(&self) -> (usize, usize) {
        let cols = match self.bc_x {
            SidePair::Periodic => self.nx,
            SidePair::Walls => self.nx + 1,
        };
        (cols, self.ny)
    }

    /// (columns, rows) of the v-field.
    pub fn v_dims(&self) -> (usize, usize) {
        let rows = match self.bc_y {
            SidePair::Periodic => self.ny,
            SidePair::Walls => self.ny + 1,
        };
        (self.nx, rows)
    }

    /// (columns, rows) of node-centered fields (cell corners).
    pub fn node_dims(&self) -> (usize, usize) {
        (self.u_dims().0, self.v_dims().1)
    }

    /// x-coordinate of the center of cell column i.
    pub fn xc(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.hx()
    }

    /// y-coordinate of the center of cell row j.
    pub fn yc(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.hy()
    }

    /// u-column of the east face of cell column i.
    #[inline]
    pub fn east(&self, i: usize) -> usize {
        match self.bc_x {
            SidePair::Periodic => (i + 1) % self.nx,
            SidePair::Walls => i + 1,
        }
    }

    /// v-row of the north face of cell row j.
    #[inline]
    pub fn north(&self, j: usize) -> usize {
        match self.bc_y {
            SidePair::Periodic => (j + 1) % self.ny,
            SidePair::Walls => j + 1,
        }
    }

    /// Cell column to the west of u-column i (periodic wrap; only called
    /// on interior columns when x has walls).
    #[inline]
    pub fn west_cell(&self, i: usize) -> usize {
        match self.bc_x {
            SidePair::Periodic => (i + self.nx - 1) % self.nx,
            SidePair::Walls => i - 1,
        }
    }

    /// Cell row to the south of v-row j (periodic wrap; only called on
    /// interior rows when y has walls).
    #[inline]
    pub fn south_cell(&self, j: usize) -> usize {
        match self.bc_y {
            SidePair::Periodic => (j + self.ny - 1) % self.ny,
            SidePair::Walls => j - 1,
        }
    }

    pub fn zero_state(&self) -> FlowState {
        let (ux, uy) = self.u_dims();
        let (vx, vy) = self.v_dims();
        FlowState {
            u: Field2::new(ux, uy),
            v: Field2::new(vx, vy),
            p: Field2::new(self.nx, self.ny),
            e: Field2::new(self.nx, self.ny),
            t: 0.0,
        }
    }
}

/// Dense row-major rectangular array of doubles; used for every staggered
/// layout (centers, faces, nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct Field2 {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl Field2 {
    pub fn new(nx: usize, ny: usize) -> Field2 {
        Field2 { nx, ny, data: vec![0.0; nx * ny] }
    }

    pub fn from_fn(nx: usize, ny: usize, mut f: impl FnMut(usize, usize) -> f64) -> Field2 {
        let mut out = Field2::new(nx, ny);
        for j in 0..ny {
            for i in 0..nx {
                out.data[j * nx + i] = f(i, j);
            }
        }
        out
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.nx && j < self.ny);
        self.data[j * self.nx + i]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i < self.nx && j < self.ny);
        &mut self.data[j * self.nx + i]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Subtracts the mean in place (projection onto zero-mean fields).
    pub fn project_zero_mean(&mut self) {
        let m = self.mean();
        for x in &mut self.data {
            *x -= m;
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Unweighted Euclidean inner product.
    pub fn dot(&self, other: &Field2) -> f64 {
        debug_assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Field2) {
        debug_assert_eq!(self.dims(), other.dims());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }
}

/// Velocity, pressure, and internal energy at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub u: Field2,
    pub v: Field2,
    pub p: Field2,
    pub e: Field2,
    pub t: f64,
}

impl FlowState {
    /// Zeroes the wall-normal faces (u on x-walls, v on y-walls), making
    /// the state impermeable exactly.
    pub fn enforce_impermeability(&mut self, g: &Grid) {
        if g.bc_x == SidePair::Walls {
            let (ux, uy) = self.u.dims();
            for j in 0..uy {
                *self.u.at_mut(0, j) = 0.0;
                *self.u.at_mut(ux - 1, j) = 0.0;
            }
        }
        if g.bc_y == SidePair::Walls {
            let (vx, vy) = self.v.dims();
            for i in 0..vx {
                *self.v.at_mut(i, 0) = 0.0;
                *self.v.at_mut(i, vy - 1) = 0.0;
            }
        }
    }

    pub fn assert_compatible(&self, g: &Grid) {
        assert_eq!(self.u.dims(), g.u_dims(), "u layout mismatch");
        assert_eq!(self.v.dims(), g.v_dims(), "v layout mismatch");
        assert_eq!(self.p.dims(), g.center_dims(), "p layout mismatch");
        assert_eq!(self.e.dims(), g.center_dims(), "e layout mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.p.is_finite() && self.e.is_finite()
    }
}

/// Symmetric 2x2 rate/stress field at cell centers; the shear component is
/// the average of the four surrounding corner values.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub d11: Field2,
    pub d22: Field2,
    pub d12: Field2,
}

/// The symmetric gradient in its native staggered layout: normal
/// components at centers, shear component at nodes.
#[derive(Debug, Clone)]
pub struct StaggeredRate {
    pub d11: Field2,
    pub d22: Field2,
    pub d12_nodes: Field2,
}

/// Conservative face-difference divergence at cell centers.
pub fn divergence_of(u: &Field2, v: &Field2, g: &Grid) -> Field2 {
    let hx = g.hx();
    let hy = g.hy();
    Field2::from_fn(g.nx, g.ny, |i, j| {
        let du = (u.at(g.east(i), j) - u.at(i, j)) / hx;
        let dv = (v.at(i, g.north(j)) - v.at(i, j)) / hy;
        du + dv
    })
}

pub fn divergence(state: &FlowState, g: &Grid) -> Field2 {
    divergence_of(&state.u, &state.v, g)
}

/// Face-centered gradient of a cell field. Wall faces get zero (the
/// Neumann ghost-cell closure), so the pair (divergence, -gradient) is
/// adjoint under the uniform volume weight.
pub fn pressure_gradient(p: &Field2, g: &Grid) -> (Field2, Field2) {
    let hx = g.hx();
    let hy = g.hy();
    let (ux, uy) = g.u_dims();
    let (vx, vy) = g.v_dims();
    let gu = Field2::from_fn(ux, uy, |i, j| match g.bc_x {
        SidePair::Walls if i == 0 || i == ux - 1 => 0.0,
        _ => (p.at(i % g.nx, j) - p.at(g.west_cell(i), j)) / hx,
    });
    let gv = Field2::from_fn(vx, vy, |i, j| match g.bc_y {
        SidePair::Walls if j == 0 || j == vy - 1 => 0.0,
        _ => (p.at(i, j % g.ny) - p.at(i, g.south_cell(j))) / hy,
    });
    (gu, gv)
}

/// 5-point Laplacian with zero-flux closure on wall sides and periodic
/// wrap elsewhere, computed exactly as `div(grad f)` so that every
/// identity the pressure correction relies on holds to machine precision.
pub fn neumann_laplacian_apply(f: &Field2, g: &Grid) -> Field2 {
    let (gu, gv) = pressure_gradient(f, g);
    divergence_of(&gu, &gv, g)
}

/// Symmetric gradient in staggered layout. The shear component at wall
/// node rows/columns uses the nearest interior one-sided difference (a
/// copy closure, exact for affine velocity fields); the momentum operator
/// does not consume those values — wall physics enters through the slip
/// law instead.
pub fn sym_gradient_staggered(state: &FlowState, g: &Grid) -> StaggeredRate {
    sym_gradient_staggered_uv(&state.u, &state.v, g)
}

/// [`sym_gradient_staggered`] on a raw face-velocity pair.
pub fn sym_gradient_staggered_uv(u: &Field2, v: &Field2, g: &Grid) -> StaggeredRate {
    let hx = g.hx();
    let hy = g.hy();
    let d11 = Field2::from_fn(g.nx, g.ny, |i, j| (u.at(g.east(i), j) - u.at(i, j)) / hx);
    let d22 = Field2::from_fn(g.nx, g.ny, |i, j| (v.at(i, g.north(j)) - v.at(i, j)) / hy);

    let (mx, my) = g.node_dims();
    let (_, uy) = u.dims();
    let (vx, _) = v.dims();
    let d12_nodes = Field2::from_fn(mx, my, |i, j| {
        // du/dy across node row j (u rows j-1, j), one-sided at y-walls.
        let du_dy = match g.bc_y {
            SidePair::Periodic => (u.at(i, j) - u.at(i, (j + uy - 1) % uy)) / hy,
            SidePair::Walls => {
                if j == 0 {
                    (u.at(i, 1) - u.at(i, 0)) / hy
                } else if j == my - 1 {
                    (u.at(i, uy - 1) - u.at(i, uy - 2)) / hy
                } else {
                    (u.at(i, j) - u.at(i, j - 1)) / hy
                }
            }
        };
        // dv/dx across node column i (v columns i-1, i), one-sided at
        // x-walls.
        let dv_dx = match g.bc_x {
            SidePair::Periodic => (v.at(i, j) - v.at((i + vx - 1) % vx, j)) / hx,
            SidePair::Walls => {
                if i == 0 {
                    (v.at(1, j) - v.at(0, j)) / hx
                } else if i == mx - 1 {
                    (v.at(vx - 1, j) - v.at(vx - 2, j)) / hx
                } else {
                    (v.at(i, j) - v.at(i - 1, j)) / hx
                }
            }
        };
        0.5 * (du_dy + dv_dx)
    });

    StaggeredRate { d11, d22, d12_nodes }
}

/// Cell-centered symmetric gradient; the shear component averages the four
/// surrounding corners. Exact for affine velocity fields.
pub fn sym_gradient(state: &FlowState, g: &Grid) -> TensorField {
    let st = sym_gradient_staggered(state, g);
    let nodes = &st.d12_nodes;
    let d12 = Field2::from_fn(g.nx, g.ny, |i, j| {
        // Node columns/rows line up with u-columns/v-rows, so the east and
        // north helpers index them directly in both boundary modes.
        let ie = g.east(i);
        let jn = g.north(j);
        0.25 * (nodes.at(i, j) + nodes.at(ie, j) + nodes.at(i, jn) + nodes.at(ie, jn))
    });
    TensorField { d11: st.d11, d22: st.d22, d12 }
}

/// Volume-weighted L2 norm of a cell field.
pub fn l2_norm_centers(f: &Field2, g: &Grid) -> f64 {
    (f.dot(f) * g.cell_volume()).sqrt()
}

/// Volume-weighted L2 norm of a staggered velocity pair.
pub fn l2_norm_faces(u: &Field2, v: &Field2, g: &Grid) -> f64 {
    ((u.dot(u) + v.dot(v)) * g.cell_volume()).sqrt()
}

/// Volume-weighted inner product of two staggered velocity pairs.
pub fn inner_faces(u1: &Field2, v1: &Field2, u2: &Field2, v2: &Field2, g: &Grid) -> f64 {
    (u1.dot(u2) + v1.dot(v2)) * g.cell_volume()
}

// ---------------------------------------------------------------------------
// Snapshot serialization
// ---------------------------------------------------------------------------

const SNAPSHOT_MAGIC: &[u8; 8] = b"ACTF0001";

fn write_f64s(w: &mut impl IoWrite, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl IoRead, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

fn side_tag(s: SidePair) -> u8 {
    match s {
        SidePair::Periodic => 0,
        SidePair::Walls => 1,
    }
}

fn side_from_tag(t: u8) -> std::io::Result<SidePair> {
    match t {
        0 => Ok(SidePair::Periodic),
        1 => Ok(SidePair::Walls),
        _ => Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unknown boundary tag {t}"),
        )),
    }
}

/// Writes a binary snapshot: magic, grid header, then the u, v, p, e
/// arrays row-major in little-endian doubles. Bit-exact round trip.
pub fn write_snapshot(path: &Path, state: &FlowState, g: &Grid) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&(g.nx as u64).to_le_bytes())?;
    w.write_all(&(g.ny as u64).to_le_bytes())?;
    w.write_all(&[side_tag(g.bc_x), side_tag(g.bc_y)])?;
    write_f64s(&mut w, &[g.lx, g.ly, state.t])?;
    write_f64s(&mut w, state.u.as_slice())?;
    write_f64s(&mut w, state.v.as_slice())?;
    write_f64s(&mut w, state.p.as_slice())?;
    write_f64s(&mut w, state.e.as_slice())?;
    w.flush()
}

/// Reads a snapshot written by [`write_snapshot`].
pub fn read_snapshot(path: &Path) -> std::io::Result<(Grid, FlowState)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "not a flow snapshot (bad magic)",
        ));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let nx = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let ny = u64::from_le_bytes(b8) as usize;
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    let bc_x = side_from_tag(tags[0])?;
    let bc_y = side_from_tag(tags[1])?;
    let header = read_f64s(&mut r, 3)?;
    let g = Grid::new(nx, ny, header[0], header[1], bc_x, bc_y)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let mut state = g.zero_state();
    state.t = header[2];
    let (ux, uy) = g.u_dims();
    let (vx, vy) = g.v_dims();
    state.u.as_mut_slice().copy_from_slice(&read_f64s(&mut r, ux * uy)?);
    state.v.as_mut_slice().copy_from_slice(&read_f64s(&mut r, vx * vy)?);
    state.p.as_mut_slice().copy_from_slice(&read_f64s(&mut r, nx * ny)?);
    state.e.as_mut_slice().copy_from_slice(&read_f64s(&mut r, nx * ny)?);
    Ok((g, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn channel(n: usize) -> Grid {
        Grid::channel(n, n, 1.0, 1.0).unwrap()
    }

    fn torus(n: usize) -> Grid {
        Grid::periodic(n, n, 1.0, 1.0).unwrap()
    }

    fn random_state(g: &Grid, rng: &mut ChaCha8Rng) -> FlowState {
        let mut s = g.zero_state();
        for x in s.u.as_mut_slice() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for x in s.v.as_mut_slice() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for x in s.p.as_mut_slice() {
            *x = rng.gen_range(-1.0..1.0);
        }
        for x in s.e.as_mut_slice() {
            *x = rng.gen_range(0.1..1.0);
        }
        s.enforce_impermeability(g);
        s
    }

    /// Divergence-free face field from a random stream function at nodes:
    /// u = dpsi/dy, v = -dpsi/dx differenced over the faces they flank.
    fn stream_function_state(g: &Grid, rng: &mut ChaCha8Rng) -> FlowState {
        let (mx, my) = g.node_dims();
        let psi = Field2::from_fn(mx, my, |_, _| rng.gen_range(-1.0..1.0));
        stream_state_from(g, &psi)
    }

    fn stream_state_from(g: &Grid, psi: &Field2) -> FlowState {
        let (mx, my) = psi.dims();
        let mut s = g.zero_state();
        let (ux, uy) = g.u_dims();
        let (vx, vy) = g.v_dims();
        for j in 0..uy {
            for i in 0..ux {
                let jn = (j + 1) % my;
                *s.u.at_mut(i, j) = (psi.at(i, jn) - psi.at(i, j)) / g.hy();
            }
        }
        for j in 0..vy {
            for i in 0..vx {
                let ie = (i + 1) % mx;
                *s.v.at_mut(i, j) = -(psi.at(ie, j) - psi.at(i, j)) / g.hx();
            }
        }
        s
    }

    #[test]
    fn divergence_of_uniform_flow_is_zero() {
        let g = channel(8);
        let mut s = g.zero_state();
        s.u.fill(3.0);
        // v stays zero (wall rows must anyway).
        let d = divergence(&s, &g);
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn divergence_of_linear_u_is_one() {
        // u(x) = x on faces: du/dx differences to exactly 1 in every cell.
        let g = torus(8);
        let mut s = g.zero_state();
        let (ux, uy) = g.u_dims();
        for j in 0..uy {
            for i in 0..ux {
                *s.u.at_mut(i, j) = i as f64 * g.hx();
            }
        }
        let d = divergence(&s, &g);
        // Interior columns see exactly 1; the wrap column sees the jump.
        for j in 0..g.ny {
            for i in 0..g.nx - 1 {
                assert!((d.at(i, j) - 1.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stream_function_fields_are_divergence_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [torus(16), channel(16)] {
            let s = stream_function_state(&g, &mut rng);
            let d = divergence(&s, &g);
            assert!(d.max_abs() < 1e-13, "max |div| = {:.3e}", d.max_abs());
        }
    }

    #[test]
    fn sym_gradient_of_constants_vanishes() {
        let g = channel(8);
        let mut s = g.zero_state();
        s.u.fill(2.0);
        let t = sym_gradient(&s, &g);
        assert_eq!(t.d11.max_abs(), 0.0);
        assert_eq!(t.d22.max_abs(), 0.0);
        assert_eq!(t.d12.max_abs(), 0.0);
    }

    #[test]
    fn sym_gradient_of_linear_shear_is_exact() {
        // u = y, v = 0: D12 = 1/2 everywhere, including wall rows thanks to
        // the one-sided closure, D11 = D22 = 0.
        let g = channel(8);
        let mut s = g.zero_state();
        let (ux, uy) = g.u_dims();
        for j in 0..uy {
            for i in 0..ux {
                *s.u.at_mut(i, j) = g.yc(j);
            }
        }
        let t = sym_gradient(&s, &g);
        assert!(t.d11.max_abs() < 1e-14);
        assert!(t.d22.max_abs() < 1e-14);
        for j in 0..g.ny {
            for i in 0..g.nx {
                assert!((t.d12.at(i, j) - 0.5).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn sym_gradient_second_order_refinement() {
        // u = sin(2 pi x): D11 error at centers shrinks ~4x per halving.
        let err = |n: usize| -> f64 {
            let g = torus(n);
            let mut s = g.zero_state();
            let (ux, uy) = g.u_dims();
            for j in 0..uy {
                for i in 0..ux {
                    *s.u.at_mut(i, j) = (2.0 * std::f64::consts::PI * i as f64 * g.hx()).sin();
                }
            }
            let t = sym_gradient(&s, &g);
            let mut worst = 0.0_f64;
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let exact = 2.0 * std::f64::consts::PI
                        * (2.0 * std::f64::consts::PI * g.xc(i)).cos();
                    worst = worst.max((t.d11.at(i, j) - exact).abs());
                }
            }
            worst
        };
        let e32 = err(32);
        let e64 = err(64);
        let ratio = e32 / e64;
        assert!((3.5..4.5).contains(&ratio), "refinement ratio {ratio}");
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        for g in [channel(8), torus(8)] {
            let f = Field2::from_fn(g.nx, g.ny, |_, _| 5.5);
            let lap = neumann_laplacian_apply(&f, &g);
            assert_eq!(lap.max_abs(), 0.0);
        }
    }

    #[test]
    fn laplacian_matches_fourier_symbol() {
        let g = torus(64);
        let k = 2.0 * std::f64::consts::PI / g.lx;
        let f = Field2::from_fn(g.nx, g.ny, |i, _| (k * g.xc(i)).cos());
        let lap = neumann_laplacian_apply(&f, &g);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let expect = -k * k * f.at(i, j);
                assert!(
                    (lap.at(i, j) - expect).abs() <= 1e-2 * k * k,
                    "cell ({i},{j}): {} vs {}",
                    lap.at(i, j),
                    expect
                );
            }
        }
    }

    #[test]
    fn laplacian_output_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for g in [channel(12), torus(12)] {
            let f = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
            let lap = neumann_laplacian_apply(&f, &g);
            let total: f64 = lap.as_slice().iter().sum();
            assert!(total.abs() < 1e-12, "conservation defect {total:.3e}");
        }
    }

    #[test]
    fn divergence_and_gradient_are_adjoint() {
        // <div v, q> = -<v, grad q> for impermeable v, uniform weights.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for g in [channel(10), torus(10)] {
            let s = random_state(&g, &mut rng);
            let q = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
            let div = divergence(&s, &g);
            let (gu, gv) = pressure_gradient(&q, &g);
            let lhs = div.dot(&q);
            let rhs = -(s.u.dot(&gu) + s.v.dot(&gv));
            assert!(
                (lhs - rhs).abs() < 1e-11 * lhs.abs().max(1.0),
                "pairing defect: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn operators_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = channel(8);
        let a = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
        let b = Field2::from_fn(g.nx, g.ny, |_, _| rng.gen_range(-1.0..1.0));
        let mut sum = a.clone();
        sum.axpy(1.0, &b);
        let mut lhs = neumann_laplacian_apply(&sum, &g);
        let la = neumann_laplacian_apply(&a, &g);
        let lb = neumann_laplacian_apply(&b, &g);
        lhs.axpy(-1.0, &la);
        lhs.axpy(-1.0, &lb);
        assert!(lhs.max_abs() < 1e-12);
    }

    #[test]
    fn impermeability_zeroes_wall_faces() {
        let g = channel(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_state(&g, &mut rng);
        let (vx, vy) = s.v.dims();
        for i in 0..vx {
            assert_eq!(s.v.at(i, 0), 0.0);
            assert_eq!(s.v.at(i, vy - 1), 0.0);
        }
    }

    #[test]
    fn snapshot_round_trips_bit_exactly() {
        let g = channel(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = random_state(&g, &mut rng);
        s.t = 0.375;
        let dir = std::env::temp_dir().join("actiflow_grid_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("snap.bin");
        write_snapshot(&path, &s, &g).unwrap();
        let (g2, s2) = read_snapshot(&path).unwrap();
        assert_eq!(g, g2);
        assert_eq!(s, s2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_tiny_grids() {
        assert!(Grid::channel(2, 8, 1.0, 1.0).is_err());
        assert!(Grid::channel(8, 8, 0.0, 1.0).is_err());
    }
}
