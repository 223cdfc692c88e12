//! Discretization primitives: the space-time grid, multilinear interpolation,
//! the intervention operator M, the penalty operator K^n, and the discrete
//! generator L.
//!
//! Every operator here is a pure nodewise function of an immutable slice;
//! outputs are independent of evaluation order.

use thiserror::Error;

use crate::model::{CoeffError, ProblemSpec};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
}

/// Uniform tensor grid on [-box_radius, box_radius]^d with `time_steps`
/// backward Euler steps on [0, horizon].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub box_radius: f64,
    pub nodes_per_axis: usize,
    pub time_steps: usize,
    pub dim: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(
        box_radius: f64,
        nodes_per_axis: usize,
        time_steps: usize,
        dim: usize,
        horizon: f64,
    ) -> Result<Grid, GridError> {
        if !box_radius.is_finite() || box_radius <= 0.0 {
            return Err(GridError::Invalid("box_radius must be positive".into()));
        }
        if nodes_per_axis < 3 {
            return Err(GridError::Invalid("nodes_per_axis must be >= 3".into()));
        }
        if time_steps < 1 {
            return Err(GridError::Invalid("time_steps must be >= 1".into()));
        }
        if dim != 1 && dim != 2 {
            return Err(GridError::Invalid("dim must be 1 or 2".into()));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(GridError::Invalid("horizon must be positive".into()));
        }
        Ok(Grid {
            box_radius,
            nodes_per_axis,
            time_steps,
            dim,
            horizon,
        })
    }

    /// Checks the grid against a problem: dimensions match and the ball of
    /// radius K_gamma is interior to the box.
    pub fn check_compatible(&self, spec: &ProblemSpec) -> Result<(), GridError> {
        if self.dim != spec.dim {
            return Err(GridError::Invalid(format!(
                "grid dimension {} does not match model dimension {}",
                self.dim, spec.dim
            )));
        }
        if self.box_radius <= spec.k_gamma {
            return Err(GridError::Invalid(format!(
                "box_radius {} must exceed K_gamma {}",
                self.box_radius, spec.k_gamma
            )));
        }
        if (self.horizon - spec.horizon).abs() > 0.0 {
            return Err(GridError::Invalid(
                "grid horizon must equal the model horizon".into(),
            ));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.box_radius / (self.nodes_per_axis - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.time_steps as f64
    }

    /// Coordinate of node `i` along one axis; reproduces the corners exactly.
    pub fn coord(&self, i: usize) -> f64 {
        let n = (self.nodes_per_axis - 1) as f64;
        let l = self.box_radius;
        (-l * (n - i as f64) + l * i as f64) / n
    }

    /// Time of slice `k`; reproduces t = 0 and t = horizon exactly.
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.time_steps as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    /// Writes the coordinates of flat node index `idx` (x1 fastest).
    pub fn position(&self, idx: usize, out: &mut [f64]) {
        let n = self.nodes_per_axis;
        match self.dim {
            1 => out[0] = self.coord(idx),
            2 => {
                out[0] = self.coord(idx % n);
                out[1] = self.coord(idx / n);
            }
            _ => unreachable!(),
        }
    }

    /// Per-axis cell index and local weight for `x`; weights outside [0, 1]
    /// realize linear extrapolation beyond the box.
    fn locate(&self, x: f64) -> (usize, f64) {
        let dx = self.dx();
        let pos = (x + self.box_radius) / dx;
        let mut c = pos.floor() as i64;
        let max_c = (self.nodes_per_axis - 2) as i64;
        if c < 0 {
            c = 0;
        } else if c > max_c {
            c = max_c;
        }
        let c = c as usize;
        // snap to exact node coordinates so interpolation is exact at nodes
        if x == self.coord(c) {
            return (c, 0.0);
        }
        if x == self.coord(c + 1) {
            return (c, 1.0);
        }
        (c, (x - self.coord(c)) / dx)
    }

    fn flat(&self, i: usize, j: usize) -> usize {
        i + self.nodes_per_axis * j
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let n = self.nodes_per_axis;
        match self.dim {
            1 => idx == 0 || idx == n - 1,
            2 => {
                let i = idx % n;
                let j = idx / n;
                i == 0 || i == n - 1 || j == 0 || j == n - 1
            }
            _ => unreachable!(),
        }
    }
}

/// Values over grid nodes at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub values: Vec<f64>,
    pub t: f64,
}

impl Slice {
    pub fn constant(grid: &Grid, c: f64, t: f64) -> Slice {
        Slice {
            values: vec![c; grid.num_nodes()],
            t,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// The numerical value function: one slice per time step, 0..=time_steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: Grid,
    pub slices: Vec<Slice>,
}

impl ValueField {
    pub fn zero(grid: &Grid) -> ValueField {
        let slices = (0..=grid.time_steps)
            .map(|k| Slice::constant(grid, 0.0, grid.time(k)))
            .collect();
        ValueField {
            grid: grid.clone(),
            slices,
        }
    }

    pub fn slice(&self, k: usize) -> &Slice {
        &self.slices[k]
    }

    /// Interpolated value at (t, x): linear in time between bracketing
    /// slices, multilinear in space.
    pub fn value_at(&self, t: f64, x: &[f64]) -> f64 {
        let (k, wt) = self.time_locate(t);
        let v0 = interpolate(&self.grid, &self.slices[k].values, x);
        if wt == 0.0 {
            return v0;
        }
        let v1 = interpolate(&self.grid, &self.slices[k + 1].values, x);
        (1.0 - wt) * v0 + wt * v1
    }

    pub fn time_locate(&self, t: f64) -> (usize, f64) {
        let dt = self.grid.dt();
        let pos = t / dt;
        let mut k = pos.floor() as i64;
        let max_k = (self.grid.time_steps - 1) as i64;
        if k < 0 {
            k = 0;
        } else if k > max_k {
            k = max_k;
        }
        let k = k as usize;
        if t == self.grid.time(k) {
            return (k, 0.0);
        }
        if t == self.grid.time(k + 1) {
            return (k, 1.0);
        }
        (k, ((t - self.grid.time(k)) / dt).clamp(0.0, 1.0))
    }

    pub fn sup_norm(&self) -> f64 {
        self.slices
            .iter()
            .flat_map(|s| s.values.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sup_diff(&self, other: &ValueField) -> f64 {
        assert_eq!(self.grid, other.grid, "fields live on different grids");
        let mut m = 0.0f64;
        for (a, b) in self.slices.iter().zip(&other.slices) {
            for (x, y) in a.values.iter().zip(&b.values) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.slices.iter().all(|s| s.all_finite())
    }

    /// Growth constant C = max |v| / (1 + |x|^rho) over all nodes and times.
    pub fn growth_constant(&self, rho: f64) -> f64 {
        let mut c = 0.0f64;
        let mut x = vec![0.0; self.grid.dim];
        for s in &self.slices {
            for (idx, v) in s.values.iter().enumerate() {
                self.grid.position(idx, &mut x);
                let r = x.iter().map(|a| a * a).sum::<f64>().sqrt();
                c = c.max(v.abs() / (1.0 + r.powf(rho)));
            }
        }
        c
    }

    /// CSV rendering: `t,x1[,x2],v`, row-major by time then node index,
    /// full double precision.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim;
        let mut out = String::new();
        out.push_str(if d == 1 { "t,x1,v\n" } else { "t,x1,x2,v\n" });
        let mut x = vec![0.0; d];
        for s in &self.slices {
            for (idx, v) in s.values.iter().enumerate() {
                self.grid.position(idx, &mut x);
                out.push_str(&crate::fmt_f64(s.t));
                for c in &x {
                    out.push(',');
                    out.push_str(&crate::fmt_f64(*c));
                }
                out.push(',');
                out.push_str(&crate::fmt_f64(*v));
                out.push('\n');
            }
        }
        out
    }
}

/// Multilinear interpolation inside the box, linear extrapolation along each
/// axis outside it, exact at nodes.
pub fn interpolate(grid: &Grid, values: &[f64], x: &[f64]) -> f64 {
    // lerp form v0 + w (v1 - v0): exact on constants even when extrapolating
    match grid.dim {
        1 => {
            let (c, w) = grid.locate(x[0]);
            values[c] + w * (values[c + 1] - values[c])
        }
        2 => {
            let (c1, w1) = grid.locate(x[0]);
            let (c2, w2) = grid.locate(x[1]);
            let v00 = values[grid.flat(c1, c2)];
            let v10 = values[grid.flat(c1 + 1, c2)];
            let v01 = values[grid.flat(c1, c2 + 1)];
            let v11 = values[grid.flat(c1 + 1, c2 + 1)];
            let a = v00 + w1 * (v10 - v00);
            let b = v01 + w1 * (v11 - v01);
            a + w2 * (b - a)
        }
        _ => unreachable!(),
    }
}

/// Intervention operator: at every node x, the best one-impulse value
/// min over marks of v(x + gamma(t, x, e)) + chi(t, x, e).
pub fn apply_m(
    grid: &Grid,
    values: &[f64],
    t: f64,
    spec: &ProblemSpec,
) -> Result<Vec<f64>, CoeffError> {
    let d = grid.dim;
    let co = &spec.coefficients;
    let mut out = vec![0.0; grid.num_nodes()];
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut shifted = vec![0.0; d];
    for idx in 0..grid.num_nodes() {
        grid.position(idx, &mut x);
        let mut best = f64::INFINITY;
        for (e, _) in spec.marks.iter() {
            co.jump_at(t, &x, e, &mut g)?;
            for i in 0..d {
                shifted[i] = x[i] + g[i];
            }
            let cand = interpolate(grid, values, &shifted) + co.cost_at(t, &x, e)?;
            if cand < best {
                best = cand;
            }
        }
        out[idx] = best;
    }
    Ok(out)
}

/// Penalty operator K^n as a weighted sum over the mark nodes:
/// n * sum_i lambda_i * (v(x + gamma(t,x,e_i)) + chi(t,x,e_i) - v(x))^-.
pub fn penalty(
    grid: &Grid,
    values: &[f64],
    t: f64,
    n: f64,
    spec: &ProblemSpec,
) -> Result<Vec<f64>, CoeffError> {
    let d = grid.dim;
    let co = &spec.coefficients;
    let mut out = vec![0.0; grid.num_nodes()];
    if n == 0.0 {
        return Ok(out);
    }
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut shifted = vec![0.0; d];
    for idx in 0..grid.num_nodes() {
        grid.position(idx, &mut x);
        let here = values[idx];
        let mut acc = 0.0;
        for (e, weight) in spec.marks.iter() {
            co.jump_at(t, &x, e, &mut g)?;
            for i in 0..d {
                shifted[i] = x[i] + g[i];
            }
            let gap = interpolate(grid, values, &shifted) + co.cost_at(t, &x, e)? - here;
            if gap < 0.0 {
                acc += weight * (-gap);
            }
        }
        out[idx] = n * acc;
    }
    Ok(out)
}

/// One-axis stencil application helper. `stride` walks the axis, `i` is the
/// position along it (0..n).
#[inline]
fn second_diff(values: &[f64], base: usize, stride: usize, i: usize, n: usize, dx: f64) -> f64 {
    let v = |k: usize| values[base + k * stride];
    let dx2 = dx * dx;
    if i == 0 {
        if n >= 4 {
            (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)) / dx2
        } else {
            (v(0) - 2.0 * v(1) + v(2)) / dx2
        }
    } else if i == n - 1 {
        if n >= 4 {
            (2.0 * v(n - 1) - 5.0 * v(n - 2) + 4.0 * v(n - 3) - v(n - 4)) / dx2
        } else {
            (v(n - 1) - 2.0 * v(n - 2) + v(n - 3)) / dx2
        }
    } else {
        (v(i + 1) - 2.0 * v(i) + v(i - 1)) / dx2
    }
}

/// Upwind first difference interior (direction by drift sign, central when
/// the drift vanishes), one-sided second-order at the boundary.
#[inline]
fn first_diff(
    values: &[f64],
    base: usize,
    stride: usize,
    i: usize,
    n: usize,
    dx: f64,
    drift: f64,
) -> f64 {
    let v = |k: usize| values[base + k * stride];
    if i == 0 {
        (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * dx)
    } else if i == n - 1 {
        (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * dx)
    } else if drift > 0.0 {
        (v(i + 1) - v(i)) / dx
    } else if drift < 0.0 {
        (v(i) - v(i - 1)) / dx
    } else {
        (v(i + 1) - v(i - 1)) / (2.0 * dx)
    }
}

/// Second-order first difference used inside the mixed-derivative
/// composition: central interior, one-sided at the boundary.
#[inline]
fn central_diff(values: &[f64], base: usize, stride: usize, i: usize, n: usize, dx: f64) -> f64 {
    let v = |k: usize| values[base + k * stride];
    if i == 0 {
        (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * dx)
    } else if i == n - 1 {
        (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * dx)
    } else {
        (v(i + 1) - v(i - 1)) / (2.0 * dx)
    }
}

/// Discrete generator L applied to a slice: upwind drift, central second
/// differences for the diffusion, one-sided second-order stencils at the
/// boundary; the 2D mixed derivative is a composition of per-axis
/// differences.
pub fn generator_apply(
    grid: &Grid,
    values: &[f64],
    t: f64,
    spec: &ProblemSpec,
) -> Result<Vec<f64>, CoeffError> {
    let d = grid.dim;
    let n = grid.nodes_per_axis;
    let dx = grid.dx();
    let co = &spec.coefficients;
    let mut out = vec![0.0; grid.num_nodes()];
    let mut x = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut sig = vec![0.0; d * d];

    match d {
        1 => {
            for i in 0..n {
                grid.position(i, &mut x);
                co.drift_at(t, &x, &mut a)?;
                co.sigma_at(t, &x, &mut sig)?;
                let c = 0.5 * sig[0] * sig[0];
                out[i] = a[0] * first_diff(values, 0, 1, i, n, dx, a[0])
                    + c * second_diff(values, 0, 1, i, n, dx);
            }
        }
        2 => {
            // d2/dx2 of v along axis 2 (for the mixed term), composed below
            let mut g2 = vec![0.0; grid.num_nodes()];
            for j in 0..n {
                for i in 0..n {
                    g2[grid.flat(i, j)] = central_diff(values, i, n, j, n, dx);
                }
            }
            for j in 0..n {
                for i in 0..n {
                    let idx = grid.flat(i, j);
                    grid.position(idx, &mut x);
                    co.drift_at(t, &x, &mut a)?;
                    co.sigma_at(t, &x, &mut sig)?;
                    // diffusion matrix sigma sigma^T
                    let s11 = sig[0] * sig[0] + sig[1] * sig[1];
                    let s12 = sig[0] * sig[2] + sig[1] * sig[3];
                    let s22 = sig[2] * sig[2] + sig[3] * sig[3];
                    let drift_term = a[0] * first_diff(values, j * n, 1, i, n, dx, a[0])
                        + a[1] * first_diff(values, i, n, j, n, dx, a[1]);
                    let mixed = central_diff(&g2, j * n, 1, i, n, dx);
                    let diff_term = 0.5 * s11 * second_diff(values, j * n, 1, i, n, dx)
                        + 0.5 * s22 * second_diff(values, i, n, j, n, dx)
                        + s12 * mixed;
                    out[idx] = drift_term + diff_term;
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// The gradient used for the z-argument of drivers inside the solver: the
/// same upwind/central rule as the drift term of [`generator_apply`].
pub fn drift_gradient(
    grid: &Grid,
    values: &[f64],
    t: f64,
    spec: &ProblemSpec,
) -> Result<Vec<f64>, CoeffError> {
    let d = grid.dim;
    let n = grid.nodes_per_axis;
    let dx = grid.dx();
    let co = &spec.coefficients;
    let mut out = vec![0.0; grid.num_nodes() * d];
    let mut x = vec![0.0; d];
    let mut a = vec![0.0; d];
    match d {
        1 => {
            for i in 0..n {
                grid.position(i, &mut x);
                co.drift_at(t, &x, &mut a)?;
                out[i] = first_diff(values, 0, 1, i, n, dx, a[0]);
            }
        }
        2 => {
            for j in 0..n {
                for i in 0..n {
                    let idx = grid.flat(i, j);
                    grid.position(idx, &mut x);
                    co.drift_at(t, &x, &mut a)?;
                    out[idx * 2] = first_diff(values, j * n, 1, i, n, dx, a[0]);
                    out[idx * 2 + 1] = first_diff(values, i, n, j, n, dx, a[1]);
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Central-difference nodal gradient (one-sided second order at the
/// boundary); this is the gradient read along Monte Carlo paths.
pub fn central_gradient(grid: &Grid, values: &[f64]) -> Vec<f64> {
    let d = grid.dim;
    let n = grid.nodes_per_axis;
    let dx = grid.dx();
    let mut out = vec![0.0; grid.num_nodes() * d];
    match d {
        1 => {
            for i in 0..n {
                out[i] = central_diff(values, 0, 1, i, n, dx);
            }
        }
        2 => {
            for j in 0..n {
                for i in 0..n {
                    let idx = grid.flat(i, j);
                    out[idx * 2] = central_diff(values, j * n, 1, i, n, dx);
                    out[idx * 2 + 1] = central_diff(values, i, n, j, n, dx);
                }
            }
        }
        _ => unreachable!(),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        const_ts, const_tse, const_x, CoefficientSet, MarkSpace,
    };
    use std::sync::Arc;

    fn grid_1d(n: usize) -> Grid {
        Grid::new(2.0, n, 10, 1, 1.0).unwrap()
    }

    fn spec_with(
        jump: crate::model::TimeStateMarkFn,
        cost: crate::model::TimeStateMarkFn,
        marks: MarkSpace,
    ) -> ProblemSpec {
        ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.0)],
                sigma: vec![const_ts(0.0)],
                jump: vec![jump],
                cost,
                obstacle: const_ts(-1e6),
                terminal: const_x(0.0),
            },
            marks,
            k_gamma: 1.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        }
    }

    fn linear_slice(grid: &Grid) -> Vec<f64> {
        (0..grid.num_nodes()).map(|i| grid.coord(i)).collect()
    }

    #[test]
    fn grid_corners_exact() {
        let g = Grid::new(1.7, 23, 5, 1, 1.0).unwrap();
        assert_eq!(g.coord(0), -1.7);
        assert_eq!(g.coord(22), 1.7);
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(5), 1.0);
    }

    #[test]
    fn interpolate_constant() {
        let g = grid_1d(11);
        let v = vec![7.0; 11];
        for x in [-3.0, -2.0, -0.31, 0.0, 0.77, 2.0, 5.0] {
            assert_eq!(interpolate(&g, &v, &[x]), 7.0);
        }
    }

    #[test]
    fn interpolate_reproduces_linear_data() {
        let g = grid_1d(11);
        let v = linear_slice(&g);
        let got = interpolate(&g, &v, &[0.31]);
        assert!((got - 0.31).abs() < 1e-14);
        // extrapolation of linear data stays exact
        let got = interpolate(&g, &v, &[2.9]);
        assert!((got - 2.9).abs() < 1e-13);
    }

    #[test]
    fn interpolate_quadratic_chord() {
        // nodes at spacing 0.5; midway between 0 and 0.5 the chord of x^2 is
        // (0 + 0.25)/2 = 0.125
        let g = Grid::new(2.0, 9, 10, 1, 1.0).unwrap();
        assert!((g.dx() - 0.5).abs() < 1e-15);
        let v: Vec<f64> = (0..9).map(|i| g.coord(i) * g.coord(i)).collect();
        let got = interpolate(&g, &v, &[0.25]);
        assert!((got - 0.125).abs() < 1e-14);
    }

    #[test]
    fn interpolate_exact_at_nodes() {
        let g = grid_1d(17);
        let v: Vec<f64> = (0..17).map(|i| (i as f64).sin()).collect();
        for i in 0..17 {
            assert_eq!(interpolate(&g, &v, &[g.coord(i)]), v[i]);
        }
    }

    #[test]
    fn interpolate_bilinear_2d() {
        let g = Grid::new(1.0, 5, 4, 2, 1.0).unwrap();
        // affine data is reproduced exactly inside the box
        let mut v = vec![0.0; g.num_nodes()];
        let mut x = vec![0.0; 2];
        for idx in 0..g.num_nodes() {
            g.position(idx, &mut x);
            v[idx] = 2.0 * x[0] - 3.0 * x[1] + 0.5;
        }
        for probe in [[0.1, 0.2], [-0.7, 0.9], [0.33, -0.41]] {
            let want = 2.0 * probe[0] - 3.0 * probe[1] + 0.5;
            assert!((interpolate(&g, &v, &probe) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn apply_m_constant_slice_adds_cost() {
        let g = grid_1d(9);
        let marks = MarkSpace::new(vec![vec![0.5]], vec![2.0]).unwrap();
        let spec = spec_with(
            Arc::new(|_t: f64, _x: &[f64], e: &[f64]| Ok(e[0])),
            const_tse(0.3),
            marks,
        );
        let v = vec![4.0; g.num_nodes()];
        let m = apply_m(&g, &v, 0.2, &spec).unwrap();
        for val in m {
            assert!((val - 4.3).abs() < 1e-14);
        }
    }

    #[test]
    fn apply_m_identity_intervention() {
        let g = grid_1d(9);
        let marks = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let spec = spec_with(const_tse(0.0), const_tse(0.0), marks);
        let v = linear_slice(&g);
        let m = apply_m(&g, &v, 0.0, &spec).unwrap();
        for (a, b) in m.iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn apply_m_two_marks_hand_value() {
        // v(x) = x; marks: gamma = -1 with chi = 0.2, gamma = +1 with chi = 0.1
        // at x = 0: min(-1 + 0.2, 1 + 0.1) = -0.8
        let g = grid_1d(9);
        let marks = MarkSpace::new(vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0]).unwrap();
        let spec = spec_with(
            Arc::new(|_t: f64, _x: &[f64], e: &[f64]| Ok(e[0])),
            Arc::new(|_t: f64, _x: &[f64], e: &[f64]| {
                Ok(if e[0] < 0.0 { 0.2 } else { 0.1 })
            }),
            marks,
        );
        let v = linear_slice(&g);
        let m = apply_m(&g, &v, 0.0, &spec).unwrap();
        let center = g.num_nodes() / 2;
        assert_eq!(g.coord(center), 0.0);
        assert!((m[center] - (-0.8)).abs() < 1e-13);
    }

    #[test]
    fn penalty_zero_when_slice_below_m() {
        let g = grid_1d(9);
        let marks = MarkSpace::new(vec![vec![0.5]], vec![1.0]).unwrap();
        let spec = spec_with(const_tse(0.0), const_tse(1.0), marks);
        let v = linear_slice(&g);
        // M v = v + 1 >= v, so the negative part vanishes
        let p = penalty(&g, &v, 0.0, 8.0, &spec).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn penalty_hand_value() {
        // v(x) = x, single mark gamma = -1, chi = 0.5, lambda = 2, n = 3:
        // (v(x-1) + 0.5 - v(x))^- = 0.5, result 3 * 2 * 0.5 = 3
        let g = grid_1d(41);
        let marks = MarkSpace::new(vec![vec![0.0]], vec![2.0]).unwrap();
        let spec = spec_with(const_tse(-1.0), const_tse(0.5), marks);
        let v = linear_slice(&g);
        let p = penalty(&g, &v, 0.0, 3.0, &spec).unwrap();
        for i in 1..g.num_nodes() - 1 {
            assert!((p[i] - 3.0).abs() < 1e-12, "node {i}: {}", p[i]);
        }
    }

    #[test]
    fn penalty_zero_multiplier() {
        let g = grid_1d(9);
        let marks = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let spec = spec_with(const_tse(-1.0), const_tse(0.0), marks);
        let v = linear_slice(&g);
        let p = penalty(&g, &v, 0.0, 0.0, &spec).unwrap();
        assert!(p.iter().all(|&x| x == 0.0));
    }

    fn spec_drift_sigma(a: f64, s: f64) -> ProblemSpec {
        let marks = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(a)],
                sigma: vec![const_ts(s)],
                jump: vec![const_tse(0.0)],
                cost: const_tse(1.0),
                obstacle: const_ts(-1e6),
                terminal: const_x(0.0),
            },
            marks,
            k_gamma: 1.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        }
    }

    #[test]
    fn generator_annihilates_constants() {
        let g = grid_1d(11);
        let spec = spec_drift_sigma(1.3, 0.7);
        let v = vec![5.5; g.num_nodes()];
        let l = generator_apply(&g, &v, 0.5, &spec).unwrap();
        assert!(l.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn generator_first_derivative_of_identity() {
        let g = grid_1d(11);
        let spec = spec_drift_sigma(2.0, 0.0);
        let v = linear_slice(&g);
        let l = generator_apply(&g, &v, 0.5, &spec).unwrap();
        for i in 0..g.num_nodes() {
            assert!((l[i] - 2.0).abs() < 1e-12, "node {i}: {}", l[i]);
        }
    }

    #[test]
    fn generator_second_derivative_of_quadratic() {
        let g = grid_1d(11);
        let spec = spec_drift_sigma(0.0, 1.0);
        let v: Vec<f64> = (0..11).map(|i| g.coord(i) * g.coord(i)).collect();
        let l = generator_apply(&g, &v, 0.5, &spec).unwrap();
        for i in 1..10 {
            assert!((l[i] - 1.0).abs() < 1e-12, "node {i}: {}", l[i]);
        }
        // the one-sided second-order boundary stencil is exact on quadratics
        assert!((l[0] - 1.0).abs() < 1e-11);
        assert!((l[10] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn generator_2d_quadratic_with_mixed_term() {
        let g = Grid::new(1.0, 9, 4, 2, 1.0).unwrap();
        let marks = MarkSpace::new(vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        // sigma = [[1, 0], [0.5, 1]] constant: sigma sigma^T = [[1, .5], [.5, 1.25]]
        let spec = ProblemSpec {
            horizon: 1.0,
            dim: 2,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.5), const_ts(-0.25)],
                sigma: vec![const_ts(1.0), const_ts(0.0), const_ts(0.5), const_ts(1.0)],
                jump: vec![const_tse(0.0), const_tse(0.0)],
                cost: const_tse(1.0),
                obstacle: const_ts(-1e6),
                terminal: const_x(0.0),
            },
            marks,
            k_gamma: 0.5,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        };
        // v = x1^2 + 2 x1 x2 + 3 x2^2 + x1 - x2
        let mut v = vec![0.0; g.num_nodes()];
        let mut x = vec![0.0; 2];
        for idx in 0..g.num_nodes() {
            g.position(idx, &mut x);
            v[idx] =
                x[0] * x[0] + 2.0 * x[0] * x[1] + 3.0 * x[1] * x[1] + x[0] - x[1];
        }
        let l = generator_apply(&g, &v, 0.0, &spec).unwrap();
        let n = g.nodes_per_axis;
        let dx = g.dx();
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let idx = i + n * j;
                g.position(idx, &mut x);
                // L v = a1 D1 v + a2 D2 v + .5*1*2 + .5*1.25*6 + .5*2, where
                // the upwind first difference on a quadratic carries the bias
                // derivative + (dx/2) * second derivative (sign by direction):
                // a1 = 0.5 > 0 uses forward, a2 = -0.25 < 0 uses backward
                let dv1 = 2.0 * x[0] + 2.0 * x[1] + 1.0 + dx / 2.0 * 2.0;
                let dv2 = 2.0 * x[0] + 6.0 * x[1] - 1.0 - dx / 2.0 * 6.0;
                let want = 0.5 * dv1 - 0.25 * dv2 + 1.0 + 3.75 + 1.0;
                assert!(
                    (l[idx] - want).abs() < 1e-10,
                    "node ({i},{j}): {} vs {want}",
                    l[idx]
                );
            }
        }
    }

    // --- randomized operator properties -------------------------------------

    fn random_slice(grid: &Grid, rng: &mut impl rand::Rng) -> Vec<f64> {
        (0..grid.num_nodes())
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect()
    }

    fn jump_spec() -> (Grid, ProblemSpec) {
        let g = Grid::new(3.0, 31, 10, 1, 1.0).unwrap();
        let marks = MarkSpace::new(vec![vec![1.0], vec![-1.0]], vec![0.25, 0.25]).unwrap();
        let spec = ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.1)],
                sigma: vec![const_ts(0.3)],
                jump: vec![Arc::new(|_t: f64, x: &[f64], e: &[f64]| {
                    Ok(0.5 * (e[0] - x[0]))
                })],
                cost: Arc::new(|_t: f64, x: &[f64], _e: &[f64]| Ok(0.2 + 0.05 * x[0] * x[0])),
                obstacle: const_ts(-1e6),
                terminal: const_x(0.0),
            },
            marks,
            k_gamma: 1.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 0.5,
            lip_a_sigma: 0.5,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        };
        (g, spec)
    }

    #[test]
    fn m_monotone_and_translation_on_random_slices() {
        use rand::Rng;
        use rand::SeedableRng;
        let (g, spec) = jump_spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let v1 = random_slice(&g, &mut rng);
            let bump: Vec<f64> = (0..g.num_nodes())
                .map(|_| rng.gen_range(0.0..2.0))
                .collect();
            let v2: Vec<f64> = v1.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let m1 = apply_m(&g, &v1, 0.3, &spec).unwrap();
            let m2 = apply_m(&g, &v2, 0.3, &spec).unwrap();
            for (a, b) in m1.iter().zip(&m2) {
                assert!(a <= &(b + 1e-12), "monotonicity violated");
            }
            let c = rng.gen_range(-3.0..3.0);
            let vc: Vec<f64> = v1.iter().map(|a| a + c).collect();
            let mc = apply_m(&g, &vc, 0.3, &spec).unwrap();
            for (a, b) in mc.iter().zip(&m1) {
                assert!((a - (b + c)).abs() < 1e-12, "translation violated");
            }
        }
    }

    #[test]
    fn penalty_complementarity_and_linearity() {
        use rand::SeedableRng;
        let (g, spec) = jump_spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let v = random_slice(&g, &mut rng);
            let m = apply_m(&g, &v, 0.4, &spec).unwrap();
            let p1 = penalty(&g, &v, 0.4, 3.0, &spec).unwrap();
            let p2 = penalty(&g, &v, 0.4, 6.0, &spec).unwrap();
            for i in 0..g.num_nodes() {
                // complementarity: zero penalty iff v <= M v
                if v[i] <= m[i] {
                    assert_eq!(p1[i], 0.0);
                } else {
                    assert!(p1[i] > 0.0);
                }
                // linear scaling in n
                assert!((p2[i] - 2.0 * p1[i]).abs() <= 1e-12 * p1[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn generator_linear_in_slice() {
        use rand::Rng;
        use rand::SeedableRng;
        let (g, spec) = jump_spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let u = random_slice(&g, &mut rng);
            let v = random_slice(&g, &mut rng);
            let alpha: f64 = rng.gen_range(-2.0..2.0);
            let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + b).collect();
            let lu = generator_apply(&g, &u, 0.2, &spec).unwrap();
            let lv = generator_apply(&g, &v, 0.2, &spec).unwrap();
            let lc = generator_apply(&g, &combo, 0.2, &spec).unwrap();
            for i in 0..g.num_nodes() {
                let want = alpha * lu[i] + lv[i];
                assert!(
                    (lc[i] - want).abs() <= 1e-9 * (1.0 + want.abs()),
                    "linearity violated at {i}"
                );
            }
        }
    }

    #[test]
    fn interpolate_monotone_inside_box() {
        use rand::Rng;
        use rand::SeedableRng;
        let g = grid_1d(15);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let v1 = random_slice(&g, &mut rng);
            let v2: Vec<f64> = v1.iter().map(|a| a + rng.gen_range(0.0..1.0)).collect();
            let x = rng.gen_range(-2.0..2.0);
            assert!(interpolate(&g, &v1, &[x]) <= interpolate(&g, &v2, &[x]) + 1e-12);
        }
    }

    #[test]
    fn value_field_csv_shape() {
        let g = Grid::new(1.0, 3, 2, 1, 1.0).unwrap();
        let f = ValueField::zero(&g);
        let csv = f.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,v");
        assert_eq!(lines.len(), 1 + 3 * 3);
    }

    #[test]
    fn value_field_time_interpolation() {
        let g = Grid::new(1.0, 5, 4, 1, 1.0).unwrap();
        let mut f = ValueField::zero(&g);
        for (k, s) in f.slices.iter_mut().enumerate() {
            for v in s.values.iter_mut() {
                *v = k as f64;
            }
        }
        assert_eq!(f.value_at(0.25, &[0.0]), 1.0);
        assert!((f.value_at(0.375, &[0.3]) - 1.5).abs() < 1e-13);
        assert_eq!(f.value_at(1.0, &[0.0]), 4.0);
    }
}
