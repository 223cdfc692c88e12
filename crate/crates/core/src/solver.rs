//! Backward-in-time solvers for the penalized problem and the direct
//! double-obstacle problem with a local (or frozen) driver, plus residual
//! and comparison diagnostics.
//!
//! Each backward step is a theta-scheme: the drift (upwind) and diffusion
//! (central) parts of the generator sit in a banded matrix factored once per
//! step; the nonlinear driver and the penalty are lagged in a damped inner
//! iteration. Boundary rows of the stepping matrix carry the one-sided
//! drift only (zero-curvature closure); the full one-sided second-order
//! stencils live in `operators::generator_apply`, which the residual
//! diagnostics use at interior nodes.

use thiserror::Error;

use crate::model::{CoeffError, DriverMode, DriverSpec, ProblemSpec};
use crate::operators::{
    apply_m, drift_gradient, generator_apply, penalty, Grid, GridError, Slice, ValueField,
};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Eval(#[from] CoeffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("inner iteration at t = {t} stalled: diff {last_diff} > tol {tol} after {iters} iterations{hint}")]
    InnerIteration {
        t: f64,
        last_diff: f64,
        tol: f64,
        iters: usize,
        hint: String,
    },
    #[error("driver mode {0} is not supported by this solver; freeze the field first")]
    NonLocalDriver(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("linear step matrix is numerically singular at t = {t}")]
    SingularMatrix { t: f64 },
}

/// Time-stepping parameters. `penalty_n` is the penalty level of the
/// penalized scheme; the double-obstacle scheme ignores it.
#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    /// Implicitness of the diffusion step, in [0, 1].
    pub theta: f64,
    pub inner_tol: f64,
    pub inner_max: usize,
    /// Damping of the inner iteration, in (0, 1].
    pub damping: f64,
    pub penalty_n: f64,
}

impl SolveConfig {
    /// Defaults scaled to the penalty stiffness: the lagged penalty has
    /// Lipschitz constant of order dt * n * lambda(E), so the damping shrinks
    /// with it and the iteration budget grows with it.
    pub fn auto(penalty_n: f64, grid: &Grid, spec: &ProblemSpec) -> SolveConfig {
        let stiffness = 1.0 + 2.0 * grid.dt() * penalty_n * spec.marks.total();
        SolveConfig {
            theta: 1.0,
            inner_tol: 1e-10,
            inner_max: 200 + (80.0 * stiffness) as usize,
            damping: 1.0 / stiffness,
            penalty_n,
        }
    }
}

// ---------------------------------------------------------------------------
// banded linear algebra
// ---------------------------------------------------------------------------

/// Band matrix with `kl` sub- and `ku` super-diagonals, row-major band rows.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>, // n rows of width kl + ku + 1; entry (i, j) at offset j - i + kl
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> BandMatrix {
        BandMatrix {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku);
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += self.data[self.idx(i, j)] * x[j];
            }
            out[i] = acc;
        }
    }

    /// LU factorization with partial pivoting. Fill from row swaps extends
    /// the upper bandwidth to kl + ku. Returns None on a singular matrix.
    pub fn factor(&self) -> Option<BandLu> {
        let n = self.n;
        let kl = self.kl;
        let kw = 2 * kl + self.ku + 1; // working row width
        let mut w = vec![0.0f64; n * kw];
        // working entry (i, j) at row i, offset j - i + kl; valid j in [i-kl, i+kl+ku]
        let off = |i: usize, j: usize| -> usize { i * kw + (j + kl - i) };
        for i in 0..n {
            let lo = i.saturating_sub(kl);
            let hi = (i + self.ku).min(n - 1);
            for j in lo..=hi {
                w[off(i, j)] = self.data[self.idx(i, j)];
            }
        }
        let mut ipiv = vec![0usize; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut pmax = w[off(k, k)].abs();
            for r in (k + 1)..=last {
                let v = w[off(r, k)].abs();
                if v > pmax {
                    pmax = v;
                    p = r;
                }
            }
            if pmax < 1e-300 {
                return None;
            }
            ipiv[k] = p;
            if p != k {
                // rows k and p both cover columns [k, k + kl + ku]
                let jhi = (k + kl + self.ku).min(n - 1);
                for j in k..=jhi {
                    w.swap(off(k, j), off(p, j));
                }
            }
            let pivot = w[off(k, k)];
            let jhi = (k + kl + self.ku).min(n - 1);
            for i in (k + 1)..=last {
                let m = w[off(i, k)] / pivot;
                w[off(i, k)] = m;
                if m != 0.0 {
                    for j in (k + 1)..=jhi {
                        let t = w[off(k, j)];
                        if t != 0.0 {
                            w[off(i, j)] -= m * t;
                        }
                    }
                }
            }
        }
        Some(BandLu {
            n,
            kl,
            ku_ext: kl + self.ku,
            w,
            kw,
            ipiv,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku_ext: usize,
    w: Vec<f64>,
    kw: usize,
    ipiv: Vec<usize>,
}

impl BandLu {
    /// Solves A x = b in place.
    pub fn solve_into(&self, b: &mut [f64]) {
        let n = self.n;
        let kl = self.kl;
        let off = |i: usize, j: usize| -> usize { i * self.kw + (j + kl - i) };
        for k in 0..n {
            let p = self.ipiv[k];
            if p != k {
                b.swap(k, p);
            }
            let last = (k + kl).min(n - 1);
            let bk = b[k];
            if bk != 0.0 {
                for i in (k + 1)..=last {
                    b[i] -= self.w[off(i, k)] * bk;
                }
            }
        }
        for i in (0..n).rev() {
            let jhi = (i + self.ku_ext).min(n - 1);
            let mut acc = b[i];
            for j in (i + 1)..=jhi {
                acc -= self.w[off(i, j)] * b[j];
            }
            b[i] = acc / self.w[off(i, i)];
        }
    }
}

// ---------------------------------------------------------------------------
// step matrix assembly
// ---------------------------------------------------------------------------

/// Assembles the stepping generator as a band matrix: upwind drift and
/// central diffusion (with the 2D mixed term) at interior nodes, one-sided
/// two-point drift only at boundary rows.
fn assemble_generator(grid: &Grid, spec: &ProblemSpec, t: f64) -> Result<BandMatrix, CoeffError> {
    let d = grid.dim;
    let n = grid.nodes_per_axis;
    let dx = grid.dx();
    let dx2 = dx * dx;
    let co = &spec.coefficients;
    let band = if d == 1 { 1 } else { n + 1 };
    let mut b = BandMatrix::zeros(grid.num_nodes(), band, band);
    let mut x = vec![0.0; d];
    let mut a = vec![0.0; d];
    let mut sig = vec![0.0; d * d];

    #[allow(clippy::too_many_arguments)]
    fn axis_terms(
        b: &mut BandMatrix,
        n: usize,
        dx: f64,
        dx2: f64,
        row: usize,
        i: usize,
        stride: usize,
        drift: f64,
        diff: f64,
    ) {
        if i == 0 {
            b.add(row, row, -drift / dx);
            b.add(row, row + stride, drift / dx);
        } else if i == n - 1 {
            b.add(row, row, drift / dx);
            b.add(row, row - stride, -drift / dx);
        } else {
            if drift > 0.0 {
                b.add(row, row + stride, drift / dx);
                b.add(row, row, -drift / dx);
            } else if drift < 0.0 {
                b.add(row, row, drift / dx);
                b.add(row, row - stride, -drift / dx);
            }
            b.add(row, row - stride, diff / dx2);
            b.add(row, row, -2.0 * diff / dx2);
            b.add(row, row + stride, diff / dx2);
        }
    }

    match d {
        1 => {
            for i in 0..n {
                grid.position(i, &mut x);
                co.drift_at(t, &x, &mut a)?;
                co.sigma_at(t, &x, &mut sig)?;
                axis_terms(&mut b, n, dx, dx2, i, i, 1, a[0], 0.5 * sig[0] * sig[0]);
            }
        }
        2 => {
            for j in 0..n {
                for i in 0..n {
                    let row = i + n * j;
                    grid.position(row, &mut x);
                    co.drift_at(t, &x, &mut a)?;
                    co.sigma_at(t, &x, &mut sig)?;
                    let s11 = sig[0] * sig[0] + sig[1] * sig[1];
                    let s12 = sig[0] * sig[2] + sig[1] * sig[3];
                    let s22 = sig[2] * sig[2] + sig[3] * sig[3];
                    axis_terms(&mut b, n, dx, dx2, row, i, 1, a[0], 0.5 * s11);
                    axis_terms(&mut b, n, dx, dx2, row, j, n, a[1], 0.5 * s22);
                    if i > 0 && i < n - 1 && j > 0 && j < n - 1 && s12 != 0.0 {
                        let c = s12 / (4.0 * dx2);
                        b.add(row, row + 1 + n, c);
                        b.add(row, row - 1 - n, c);
                        b.add(row, row + 1 - n, -c);
                        b.add(row, row - 1 + n, -c);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(b)
}

/// The per-step driver: the local part reads the live inner iterate, the
/// non-local part is a per-step source (frozen field) when present.
struct StepDriver<'a> {
    spec: &'a ProblemSpec,
    driver: &'a DriverSpec,
    /// Precomputed k * (M g)(t, node) for the frozen mode, else None.
    source: Option<Vec<f64>>,
}

impl<'a> StepDriver<'a> {
    fn for_step(
        spec: &'a ProblemSpec,
        driver: &'a DriverSpec,
        grid: &Grid,
        step_index: usize,
        t: f64,
    ) -> Result<StepDriver<'a>, SolveError> {
        let source = match &driver.mode {
            DriverMode::Local => None,
            DriverMode::LocalPlusKM { .. } => {
                return Err(SolveError::NonLocalDriver("LocalPlusKM".into()))
            }
            DriverMode::Frozen { field, k_nl } => {
                if *k_nl == 0.0 {
                    None
                } else {
                    let m = apply_m(grid, &field.slices[step_index].values, t, spec)?;
                    Some(m.into_iter().map(|v| k_nl * v).collect())
                }
            }
        };
        Ok(StepDriver {
            spec,
            driver,
            source,
        })
    }

    /// Evaluates f at every node for the iterate `w`, writing into `out`.
    fn eval(&self, grid: &Grid, t: f64, w: &[f64], out: &mut [f64]) -> Result<(), CoeffError> {
        let d = grid.dim;
        let grad = drift_gradient(grid, w, t, self.spec)?;
        let mut x = vec![0.0; d];
        let mut sig = vec![0.0; d * d];
        let mut z = vec![0.0; d];
        for idx in 0..grid.num_nodes() {
            grid.position(idx, &mut x);
            self.spec.coefficients.sigma_at(t, &x, &mut sig)?;
            // z = sigma^T grad
            for c in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += sig[r * d + c] * grad[idx * d + r];
                }
                z[c] = acc;
            }
            let mut f = (self.driver.f_tilde)(t, &x, w[idx], &z)?;
            if let Some(src) = &self.source {
                f += src[idx];
            }
            out[idx] = f;
        }
        Ok(())
    }
}

fn obstacle_slice(grid: &Grid, spec: &ProblemSpec, t: f64) -> Result<Vec<f64>, CoeffError> {
    let mut x = vec![0.0; grid.dim];
    let mut out = vec![0.0; grid.num_nodes()];
    for idx in 0..grid.num_nodes() {
        grid.position(idx, &mut x);
        out[idx] = spec.coefficients.obstacle_at(t, &x)?;
    }
    Ok(out)
}

/// Shared skeleton of one backward step. `penalized` selects the scheme:
/// penalty term inside the linear solve loop versus min/max projection with
/// the intervention operator.
#[allow(clippy::too_many_arguments)]
fn step_impl(
    next: &Slice,
    t: f64,
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &SolveConfig,
    driver: &DriverSpec,
    step_index: usize,
    penalized: bool,
) -> Result<Slice, SolveError> {
    let dt = grid.dt();
    let nn = grid.num_nodes();
    let gen = assemble_generator(grid, spec, t)?;
    // A = I - theta dt L
    let mut a = gen.clone();
    for v in a.data.iter_mut() {
        *v *= -cfg.theta * dt;
    }
    for i in 0..nn {
        a.add(i, i, 1.0);
    }
    let lu = a.factor().ok_or(SolveError::SingularMatrix { t })?;

    // explicit part: next + (1 - theta) dt L next
    let mut base = next.values.clone();
    if cfg.theta < 1.0 {
        let mut lnext = vec![0.0; nn];
        gen.matvec(&next.values, &mut lnext);
        for i in 0..nn {
            base[i] += (1.0 - cfg.theta) * dt * lnext[i];
        }
    }

    let sd = StepDriver::for_step(spec, driver, grid, step_index, t)?;
    let h = obstacle_slice(grid, spec, t)?;

    let mut w = next.values.clone();
    let mut f_buf = vec![0.0; nn];
    let mut rhs = vec![0.0; nn];
    let mut converged = false;
    let mut last_diff = f64::INFINITY;
    for _m in 0..cfg.inner_max {
        sd.eval(grid, t, &w, &mut f_buf)?;
        if penalized {
            let pen = penalty(grid, &w, t, cfg.penalty_n, spec)?;
            for i in 0..nn {
                rhs[i] = base[i] + dt * (f_buf[i] - pen[i]);
            }
            lu.solve_into(&mut rhs);
        } else {
            for i in 0..nn {
                rhs[i] = base[i] + dt * f_buf[i];
            }
            lu.solve_into(&mut rhs);
            let m_slice = apply_m(grid, &w, t, spec)?;
            for i in 0..nn {
                rhs[i] = h[i].max(m_slice[i].min(rhs[i]));
            }
        }
        let mut diff = 0.0f64;
        for i in 0..nn {
            let updated = w[i] + cfg.damping * (rhs[i] - w[i]);
            diff = diff.max((updated - w[i]).abs());
            w[i] = updated;
        }
        last_diff = diff;
        if diff <= cfg.inner_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let hint = if penalized {
            String::new()
        } else {
            "; a cycling intervention fixed point usually means the model violates \
             the no-free-loop condition, run check_no_free_loop"
                .to_string()
        };
        return Err(SolveError::InnerIteration {
            t,
            last_diff,
            tol: cfg.inner_tol,
            iters: cfg.inner_max,
            hint,
        });
    }

    // lower reflection is the last operation of every step
    for i in 0..nn {
        if w[i] < h[i] {
            w[i] = h[i];
        }
    }
    Ok(Slice { values: w, t })
}

/// One backward step of the penalized scheme.
pub fn step_penalized(
    next: &Slice,
    t: f64,
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &SolveConfig,
    driver: &DriverSpec,
    step_index: usize,
) -> Result<Slice, SolveError> {
    step_impl(next, t, spec, grid, cfg, driver, step_index, true)
}

/// One backward step of the double-obstacle scheme: inner fixed point
/// w <- max(h, min(M w, pde_step(w))).
pub fn step_double(
    next: &Slice,
    t: f64,
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &SolveConfig,
    driver: &DriverSpec,
    step_index: usize,
) -> Result<Slice, SolveError> {
    step_impl(next, t, spec, grid, cfg, driver, step_index, false)
}

fn terminal_slice(grid: &Grid, spec: &ProblemSpec) -> Result<Slice, SolveError> {
    let mut x = vec![0.0; grid.dim];
    let mut v = vec![0.0; grid.num_nodes()];
    for idx in 0..grid.num_nodes() {
        grid.position(idx, &mut x);
        v[idx] = spec.coefficients.terminal_at(&x)?;
    }
    Ok(Slice {
        values: v,
        t: grid.horizon,
    })
}

fn solve_impl(
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &SolveConfig,
    driver: &DriverSpec,
    penalized: bool,
) -> Result<ValueField, SolveError> {
    grid.check_compatible(spec)?;
    let nt = grid.time_steps;
    let mut slices = vec![
        Slice {
            values: Vec::new(),
            t: 0.0
        };
        nt + 1
    ];
    slices[nt] = terminal_slice(grid, spec)?;
    for k in (0..nt).rev() {
        let t = grid.time(k);
        let next = slices[k + 1].clone();
        slices[k] = step_impl(&next, t, spec, grid, cfg, driver, k, penalized)?;
    }
    Ok(ValueField {
        grid: grid.clone(),
        slices,
    })
}

/// Backward solve of the penalized problem at level `n`.
pub fn solve_penalized(
    spec: &ProblemSpec,
    grid: &Grid,
    n: f64,
    driver: &DriverSpec,
) -> Result<ValueField, SolveError> {
    let cfg = SolveConfig::auto(n, grid, spec);
    solve_impl(spec, grid, &cfg, driver, true)
}

/// As [`solve_penalized`] with explicit configuration.
pub fn solve_penalized_cfg(
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &SolveConfig,
    driver: &DriverSpec,
) -> Result<ValueField, SolveError> {
    solve_impl(spec, grid, cfg, driver, true)
}

/// Backward solve of the double-obstacle problem.
pub fn solve_double(
    spec: &ProblemSpec,
    grid: &Grid,
    driver: &DriverSpec,
) -> Result<ValueField, SolveError> {
    let cfg = SolveConfig::auto(0.0, grid, spec);
    solve_impl(spec, grid, &cfg, driver, false)
}

/// As [`solve_double`] with explicit configuration.
pub fn solve_double_cfg(
    spec: &ProblemSpec,
    grid: &Grid,
    cfg: &SolveConfig,
    driver: &DriverSpec,
) -> Result<ValueField, SolveError> {
    solve_impl(spec, grid, cfg, driver, false)
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

/// Discrete residual of the min-max form at interior nodes.
#[derive(Debug, Clone)]
pub struct Residuals {
    pub grid: Grid,
    /// One slice per time step 0..time_steps; boundary entries are zero.
    pub values: Vec<Slice>,
    pub sup: f64,
    pub l2: f64,
}

impl Residuals {
    /// CSV rendering `t,x1[,x2],residual`, interior nodes only.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dim;
        let mut out = String::new();
        out.push_str(if d == 1 {
            "t,x1,residual\n"
        } else {
            "t,x1,x2,residual\n"
        });
        let mut x = vec![0.0; d];
        for s in &self.values {
            for (idx, v) in s.values.iter().enumerate() {
                if self.grid.is_boundary(idx) {
                    continue;
                }
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

/// Evaluates the driver for diagnostics, with the field itself as the frozen
/// argument of any non-local part.
fn residual_driver_values(
    spec: &ProblemSpec,
    driver: &DriverSpec,
    grid: &Grid,
    values: &[f64],
    m_slice: &[f64],
    t: f64,
) -> Result<Vec<f64>, SolveError> {
    let d = grid.dim;
    let grad = drift_gradient(grid, values, t, spec)?;
    let mut out = vec![0.0; grid.num_nodes()];
    let mut x = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut z = vec![0.0; d];
    let k_nl = match &driver.mode {
        DriverMode::Local => 0.0,
        DriverMode::LocalPlusKM { k_nl } => *k_nl,
        DriverMode::Frozen { k_nl, .. } => *k_nl,
    };
    for idx in 0..grid.num_nodes() {
        grid.position(idx, &mut x);
        spec.coefficients.sigma_at(t, &x, &mut sig)?;
        for c in 0..d {
            let mut acc = 0.0;
            for r in 0..d {
                acc += sig[r * d + c] * grad[idx * d + r];
            }
            z[c] = acc;
        }
        let mut f = (driver.f_tilde)(t, &x, values[idx], &z)?;
        if k_nl != 0.0 {
            f += k_nl * m_slice[idx];
        }
        out[idx] = f;
    }
    Ok(out)
}

/// Discrete min-max residual of a complete field:
/// min(v - h, max(v - M v, -dv/dt - L v - f)) at every interior node and
/// time step, using a backward time difference.
pub fn residual_qvi(
    field: &ValueField,
    spec: &ProblemSpec,
    grid: &Grid,
    driver: &DriverSpec,
) -> Result<Residuals, SolveError> {
    grid.check_compatible(spec)?;
    let dt = grid.dt();
    let nn = grid.num_nodes();
    let mut slices = Vec::with_capacity(grid.time_steps);
    let mut sup = 0.0f64;
    let mut sq = 0.0f64;
    let mut count = 0usize;
    for k in 0..grid.time_steps {
        let t = grid.time(k);
        let v = &field.slices[k].values;
        let v_next = &field.slices[k + 1].values;
        let lv = generator_apply(grid, v, t, spec)?;
        let mv = apply_m(grid, v, t, spec)?;
        let fv = residual_driver_values(spec, driver, grid, v, &mv, t)?;
        let h = obstacle_slice(grid, spec, t)?;
        let mut r = vec![0.0; nn];
        for idx in 0..nn {
            if grid.is_boundary(idx) {
                continue;
            }
            let dtv = (v_next[idx] - v[idx]) / dt;
            let pde = -dtv - lv[idx] - fv[idx];
            let res = (v[idx] - h[idx]).min((v[idx] - mv[idx]).max(pde));
            r[idx] = res;
            sup = sup.max(res.abs());
            sq += res * res;
            count += 1;
        }
        slices.push(Slice { values: r, t });
    }
    Ok(Residuals {
        grid: grid.clone(),
        values: slices,
        sup,
        l2: if count > 0 {
            (sq / count as f64).sqrt()
        } else {
            0.0
        },
    })
}

/// Adds the barrier-localized perturbation
/// theta_p * exp(-varpi t) (1 + ((|x| - K_gamma)^+)^(2 varrho + 2))
/// to the field and checks that the discrete supersolution residual stays
/// above -tol with tol = 10 (dt + dx^2). Returns (pass, minimum residual).
#[allow(clippy::too_many_arguments)]
pub fn perturbed_supersolution_check(
    field: &ValueField,
    theta_p: f64,
    varpi: f64,
    varrho: f64,
    spec: &ProblemSpec,
    grid: &Grid,
    driver: &DriverSpec,
) -> Result<(bool, f64), SolveError> {
    let mut perturbed = field.clone();
    let mut x = vec![0.0; grid.dim];
    let p = 2.0 * varrho + 2.0;
    for s in perturbed.slices.iter_mut() {
        let scale = theta_p * (-varpi * s.t).exp();
        for (idx, v) in s.values.iter_mut().enumerate() {
            grid.position(idx, &mut x);
            let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            let excess = (r - spec.k_gamma).max(0.0);
            *v += scale * (1.0 + excess.powf(p));
        }
    }
    let res = residual_qvi(&perturbed, spec, grid, driver)?;
    let tol = 10.0 * (grid.dt() + grid.dx() * grid.dx());
    let mut min_res = f64::INFINITY;
    for s in &res.values {
        for (idx, v) in s.values.iter().enumerate() {
            if !grid.is_boundary(idx) {
                min_res = min_res.min(*v);
            }
        }
    }
    Ok((min_res >= -tol, min_res))
}

/// Nodewise ordering statistics between two fields on the same grid.
#[derive(Debug, Clone, Copy)]
pub struct CompareStats {
    /// max over nodes and times of field1 - field2
    pub max_diff: f64,
    /// fraction of nodes violating field1 <= field2 + 1e-8
    pub violation_fraction: f64,
}

pub fn compare_fields(f1: &ValueField, f2: &ValueField) -> Result<CompareStats, SolveError> {
    if f1.grid != f2.grid || f1.slices.len() != f2.slices.len() {
        return Err(SolveError::GridMismatch);
    }
    let mut max_diff = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut total = 0usize;
    for (a, b) in f1.slices.iter().zip(&f2.slices) {
        for (x, y) in a.values.iter().zip(&b.values) {
            let d = x - y;
            if d > max_diff {
                max_diff = d;
            }
            if d > 1e-8 {
                violations += 1;
            }
            total += 1;
        }
    }
    Ok(CompareStats {
        max_diff,
        violation_fraction: violations as f64 / total.max(1) as f64,
    })
}
