//! Probabilistic verification: forward jump-diffusion simulation, moment
//! bounds, pathwise consistency of the penalized value field with its
//! backward representation, penalized-value tables against the
//! double-obstacle value, a coupled dominating reflected process, and a
//! binomial-tree pricing oracle.
//!
//! Every estimator draws from a counter-based stream per path (stream index
//! = path index), so bundles are bitwise reproducible from (seed, config)
//! and independent of scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::{CoeffError, DriverSpec, ProblemSpec};
use crate::operators::{central_gradient, interpolate, Grid, ValueField};
use crate::solver::{solve_double, solve_penalized, SolveError};

#[derive(Debug, Error)]
pub enum McError {
    #[error(transparent)]
    Eval(#[from] CoeffError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid monte carlo setup: {0}")]
    Invalid(String),
}

/// A jump event on a path: at entry `step` the state moved from `before` by
/// the jump map at mark `mark`.
#[derive(Debug, Clone)]
pub struct PathJump {
    pub step: usize,
    pub mark: usize,
    pub before: Vec<f64>,
}

/// One simulated trajectory on the union of the uniform step grid and the
/// jump times. `states` holds the post-jump value at jump entries.
#[derive(Debug, Clone)]
pub struct Path {
    pub times: Vec<f64>,
    /// row-major: entry k occupies states[k*d .. (k+1)*d]
    pub states: Vec<f64>,
    /// Brownian increment leading into each entry (zeros at entry 0)
    pub dw: Vec<f64>,
    pub jumps: Vec<PathJump>,
}

impl Path {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize, d: usize) -> &[f64] {
        &self.states[k * d..(k + 1) * d]
    }
}

/// Simulated forward paths with their driving noise.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub start_time: f64,
    pub start_state: Vec<f64>,
    pub dt_sim: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub dim: usize,
    pub horizon: f64,
    pub paths: Vec<Path>,
}

/// Mean/standard-error estimate with its provenance.
#[derive(Debug, Clone)]
pub struct EstimateCI {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// fraction of paths excluded (left the grid box before stopping)
    pub excluded_fraction: f64,
}

impl EstimateCI {
    pub fn csv_row(&self, name: &str) -> String {
        format!(
            "{},{},{},{},{}\n",
            name,
            crate::fmt_f64(self.mean),
            crate::fmt_f64(self.std_error),
            self.n_paths,
            self.seed
        )
    }
}

fn mean_std_error(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Euler-Maruyama between jumps; jump times by exponential inter-arrivals at
/// the total intensity, marks drawn proportionally to their weights; the
/// trajectory is recorded on the union of the uniform step grid and the
/// jump times. Deterministic given (seed, n_paths, dt_sim).
pub fn simulate_forward(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    dt_sim: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, McError> {
    if !dt_sim.is_finite() || dt_sim <= 0.0 {
        return Err(McError::Invalid("dt_sim must be positive".into()));
    }
    if n_paths < 1 {
        return Err(McError::Invalid("n_paths must be at least 1".into()));
    }
    if x.len() != spec.dim {
        return Err(McError::Invalid("start state has wrong dimension".into()));
    }
    let d = spec.dim;
    let horizon = spec.horizon;
    let lambda_total = spec.marks.total();
    let co = &spec.coefficients;

    // cumulative weights for mark selection
    let mut cum = Vec::with_capacity(spec.marks.len());
    let mut acc = 0.0;
    for i in 0..spec.marks.len() {
        acc += spec.marks.weight(i);
        cum.push(acc);
    }

    let n_uniform = ((horizon - t) / dt_sim).ceil() as usize;
    let mut paths = Vec::with_capacity(n_paths);
    let mut a_buf = vec![0.0; d];
    let mut s_buf = vec![0.0; d * d];
    let mut g_buf = vec![0.0; d];

    for p in 0..n_paths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);

        // jump schedule first, then the diffusion walk
        let mut jump_times: Vec<(f64, usize)> = Vec::new();
        let mut s = t;
        loop {
            let u: f64 = rng.gen();
            s += -(1.0 - u).ln() / lambda_total;
            if s >= horizon {
                break;
            }
            let pick: f64 = rng.gen::<f64>() * lambda_total;
            let mark = cum.iter().position(|c| pick < *c).unwrap_or(cum.len() - 1);
            jump_times.push((s, mark));
        }

        // union of uniform grid times and jump times
        let mut events: Vec<(f64, Option<usize>)> = Vec::with_capacity(n_uniform + jump_times.len());
        for k in 1..=n_uniform {
            let tk = (t + k as f64 * dt_sim).min(horizon);
            events.push((tk, None));
            if tk >= horizon {
                break;
            }
        }
        for (tj, mark) in &jump_times {
            events.push((*tj, Some(*mark)));
        }
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        let cap = events.len() + 1;
        let mut path = Path {
            times: Vec::with_capacity(cap),
            states: Vec::with_capacity(cap * d),
            dw: Vec::with_capacity(cap * d),
            jumps: Vec::new(),
        };
        let mut state = x.to_vec();
        let mut now = t;
        path.times.push(now);
        path.states.extend_from_slice(&state);
        path.dw.extend(std::iter::repeat_n(0.0, d));

        for (time, mark) in events {
            let delta = time - now;
            let sqrt_delta = delta.max(0.0).sqrt();
            co.drift_at(now, &state, &mut a_buf)?;
            co.sigma_at(now, &state, &mut s_buf)?;
            let mut dw = vec![0.0; d];
            for w in dw.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = sqrt_delta * z;
            }
            for i in 0..d {
                let mut incr = a_buf[i] * delta;
                for j in 0..d {
                    incr += s_buf[i * d + j] * dw[j];
                }
                state[i] += incr;
            }
            now = time;
            if let Some(mk) = mark {
                let before = state.clone();
                co.jump_at(now, &before, spec.marks.node(mk), &mut g_buf)?;
                for i in 0..d {
                    state[i] += g_buf[i];
                }
                path.jumps.push(PathJump {
                    step: path.times.len(),
                    mark: mk,
                    before,
                });
            }
            path.times.push(now);
            path.states.extend_from_slice(&state);
            path.dw.extend_from_slice(&dw);
        }
        paths.push(path);
    }

    Ok(PathBundle {
        start_time: t,
        start_state: x.to_vec(),
        dt_sim,
        n_paths,
        seed,
        dim: d,
        horizon,
        paths,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// Estimates E[sup_s |X_s|^p] over the bundle.
pub fn moment_check(bundle: &PathBundle, p: f64) -> EstimateCI {
    let d = bundle.dim;
    let samples: Vec<f64> = bundle
        .paths
        .iter()
        .map(|path| {
            let mut sup = 0.0f64;
            for k in 0..path.len() {
                sup = sup.max(norm(path.state(k, d)));
            }
            sup.powf(p)
        })
        .collect();
    let (mean, std_error) = mean_std_error(&samples);
    EstimateCI {
        mean,
        std_error,
        n_paths: bundle.n_paths,
        seed: bundle.seed,
        excluded_fraction: 0.0,
    }
}

/// Ratio table E[sup |X|^p] / (1 + |x|^p) across starting points; the
/// max/min factor is the sampled surrogate for a uniform moment constant.
pub struct MomentStability {
    pub rows: Vec<(Vec<f64>, f64, f64)>, // (start, estimate, ratio)
    pub factor: f64,
}

impl MomentStability {
    pub fn within_factor(&self, limit: f64) -> bool {
        self.factor < limit
    }
}

pub fn moment_stability(
    spec: &ProblemSpec,
    t: f64,
    starts: &[Vec<f64>],
    p: f64,
    dt_sim: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MomentStability, McError> {
    let mut rows = Vec::with_capacity(starts.len());
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    for x in starts {
        let bundle = simulate_forward(spec, t, x, dt_sim, n_paths, seed)?;
        let est = moment_check(&bundle, p);
        let ratio = est.mean / (1.0 + norm(x).powf(p));
        min_ratio = min_ratio.min(ratio);
        max_ratio = max_ratio.max(ratio);
        rows.push((x.clone(), est.mean, ratio));
    }
    Ok(MomentStability {
        rows,
        factor: max_ratio / min_ratio,
    })
}

/// Stopping rule of the pathwise estimator.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    /// Stop at the first recorded time where the field sits within `eps` of
    /// the lower obstacle.
    HitObstacle { eps: f64 },
    /// Run to the horizon.
    FixedHorizon,
}

/// Precomputed per-slice central gradients of a field.
struct FieldGradients {
    /// per slice, per component: nodal gradient values
    grads: Vec<Vec<Vec<f64>>>,
}

impl FieldGradients {
    fn new(field: &ValueField) -> FieldGradients {
        let d = field.grid.dim;
        let nn = field.grid.num_nodes();
        let grads = field
            .slices
            .iter()
            .map(|s| {
                let packed = central_gradient(&field.grid, &s.values);
                (0..d)
                    .map(|c| (0..nn).map(|idx| packed[idx * d + c]).collect())
                    .collect()
            })
            .collect();
        FieldGradients { grads }
    }

    /// Interpolated gradient at (t, x), linear in time.
    fn at(&self, field: &ValueField, t: f64, x: &[f64], out: &mut [f64]) {
        let d = field.grid.dim;
        let (k, wt) = field.time_locate(t);
        for c in 0..d {
            let g0 = interpolate(&field.grid, &self.grads[k][c], x);
            out[c] = if wt == 0.0 {
                g0
            } else {
                let g1 = interpolate(&field.grid, &self.grads[k + 1][c], x);
                g0 + wt * (g1 - g0)
            };
        }
    }
}

/// Pathwise estimator of the penalized value: payoff at the stopping time
/// plus the integrated penalized driver (the local part reads the field,
/// z reads its interpolated central-difference gradient) minus the
/// compensator of the jump component. The estimate reports the fraction of
/// paths excluded for leaving the grid box before stopping.
pub fn pathwise_consistency(
    field: &ValueField,
    n: f64,
    spec: &ProblemSpec,
    driver: &DriverSpec,
    bundle: &PathBundle,
    stop_rule: StopRule,
) -> Result<EstimateCI, McError> {
    let d = spec.dim;
    let grid = &field.grid;
    let co = &spec.coefficients;
    let grads = FieldGradients::new(field);
    let m = spec.marks.len();
    let box_l = grid.box_radius;

    let mut samples = Vec::with_capacity(bundle.n_paths);
    let mut excluded = 0usize;

    let mut sig = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut gamma = vec![0.0; d];
    let mut shifted = vec![0.0; d];

    'paths: for path in &bundle.paths {
        let last = path.len() - 1;
        let stop_idx = match stop_rule {
            StopRule::FixedHorizon => last,
            StopRule::HitObstacle { eps } => {
                let mut found = last;
                for k in 0..=last {
                    let s = path.times[k];
                    let xs = path.state(k, d);
                    if s >= spec.horizon {
                        break;
                    }
                    let y = field.value_at(s, xs);
                    let h = co.obstacle_at(s, xs)?;
                    if y <= h + eps {
                        found = k;
                        break;
                    }
                }
                found
            }
        };

        for k in 0..=stop_idx {
            let xs = path.state(k, d);
            if xs.iter().any(|c| c.abs() > box_l) {
                excluded += 1;
                continue 'paths;
            }
        }

        let tau = path.times[stop_idx];
        let x_tau = path.state(stop_idx, d);
        let payoff = if tau < spec.horizon {
            co.obstacle_at(tau, x_tau)?
        } else {
            co.terminal_at(x_tau)?
        };

        let mut acc = payoff;

        for k in 0..stop_idx {
            let s = path.times[k];
            let delta = path.times[k + 1] - s;
            if delta <= 0.0 {
                continue;
            }
            let xs = path.state(k, d);
            let y = field.value_at(s, xs);
            co.sigma_at(s, xs, &mut sig)?;
            grads.at(field, s, xs, &mut grad);
            for c in 0..d {
                let mut zc = 0.0;
                for r in 0..d {
                    zc += sig[r * d + c] * grad[r];
                }
                z[c] = zc;
            }
            let f_loc = (driver.f_tilde)(s, xs, y, &z)?;
            let mut pen = 0.0;
            let mut comp = 0.0;
            for i in 0..m {
                let e = spec.marks.node(i);
                let w = spec.marks.weight(i);
                co.jump_at(s, xs, e, &mut gamma)?;
                for c in 0..d {
                    shifted[c] = xs[c] + gamma[c];
                }
                let v_e = field.value_at(s, &shifted) - y;
                let chi = co.cost_at(s, xs, e)?;
                let neg = -(v_e + chi);
                if neg > 0.0 {
                    pen += w * neg;
                }
                comp += w * v_e;
            }
            // the raw Poisson integral of V in the backward equation has
            // mean equal to its compensator, so the estimator subtracts
            // integral of sum_i lambda_i V(e_i) dr and omits the realized
            // jump sum (their difference is a mean-zero martingale)
            acc += delta * (f_loc - n * pen - comp);
        }

        samples.push(acc);
    }

    let (mean, std_error) = mean_std_error(&samples);
    Ok(EstimateCI {
        mean,
        std_error,
        n_paths: samples.len(),
        seed: bundle.seed,
        excluded_fraction: excluded as f64 / bundle.n_paths as f64,
    })
}

/// Penalized values at a probe point for an increasing list of penalty
/// levels, next to the double-obstacle value they approximate from above.
#[derive(Debug, Clone)]
pub struct DualGapTable {
    pub rows: Vec<(f64, f64)>,
    pub double_value: f64,
    pub probe_t: f64,
    pub probe_x: Vec<f64>,
}

impl DualGapTable {
    pub fn non_increasing(&self, tol: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].1 <= w[0].1 + tol)
    }

    pub fn bounded_below_by_double(&self, tol: f64) -> bool {
        self.rows.iter().all(|(_, v)| *v >= self.double_value - tol)
    }

    pub fn final_gap(&self) -> f64 {
        self.rows
            .last()
            .map(|(_, v)| (v - self.double_value).abs())
            .unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,value\n");
        for (n, v) in &self.rows {
            out.push_str(&format!("{},{}\n", crate::fmt_f64(*n), crate::fmt_f64(*v)));
        }
        out.push_str(&format!("double,{}\n", crate::fmt_f64(self.double_value)));
        out
    }
}

/// Solves the penalized problem at each level of `n_list` (strictly
/// increasing) and probes the fields at (t, x), together with the
/// double-obstacle solve.
pub fn dual_gap(
    spec: &ProblemSpec,
    grid: &Grid,
    driver: &DriverSpec,
    n_list: &[f64],
    t: f64,
    x: &[f64],
) -> Result<DualGapTable, McError> {
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(McError::Invalid("n_list must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let field = solve_penalized(spec, grid, n, driver)?;
        rows.push((n, field.value_at(t, x)));
    }
    let double = solve_double(spec, grid, driver)?;
    Ok(DualGapTable {
        rows,
        double_value: double.value_at(t, x),
        probe_t: t,
        probe_x: x.to_vec(),
    })
}

/// Per-path trace of the dominating reflected process.
#[derive(Debug, Clone)]
pub struct DominationTrace {
    pub upsilon: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub violated: bool,
}

#[derive(Debug, Clone)]
pub struct DominationViolation {
    pub path: usize,
    pub time: f64,
    pub x_abs: f64,
    pub r: f64,
}

#[derive(Debug, Clone)]
pub struct DominationReport {
    pub floor: f64,
    pub c_a_sigma: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub violations: Vec<DominationViolation>,
    /// fraction of steps where the control had to be clamped into [-1, 1]
    pub clamp_fraction: f64,
    /// max over paths of sum (Upsilon - floor) dTheta (zero by construction
    /// of the discrete reflection)
    pub complementarity_max: f64,
    pub traces: Vec<DominationTrace>,
}

impl DominationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// CSV `path,first_violation_time,X,R` with one row per violating path.
    pub fn violations_csv(&self) -> String {
        let mut out = String::from("path,first_violation_time,X,R\n");
        let mut seen = std::collections::HashSet::new();
        for v in &self.violations {
            if seen.insert(v.path) {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    v.path,
                    crate::fmt_f64(v.time),
                    crate::fmt_f64(v.x_abs),
                    crate::fmt_f64(v.r)
                ));
            }
        }
        out
    }
}

/// Fits the affine growth envelope |a| + |sigma| <= C (1 + |x|) on a box
/// around the start.
fn fit_growth_constant(spec: &ProblemSpec, t: f64, x: &[f64]) -> Result<f64, McError> {
    let radius = 4.0 * spec.k_gamma.max(norm(x)).max(1.0);
    let co = &spec.coefficients;
    let mut c: f64 = 0.0;
    let mut a = vec![0.0; 1];
    let mut s = vec![0.0; 1];
    for ti in 0..=10 {
        let tt = t + (spec.horizon - t) * ti as f64 / 10.0;
        for k in 0..=200 {
            let xx = -radius + 2.0 * radius * k as f64 / 200.0;
            co.drift_at(tt, &[xx], &mut a)?;
            co.sigma_at(tt, &[xx], &mut s)?;
            c = c.max((a[0].abs() + s[0].abs()) / (1.0 + xx.abs()));
        }
    }
    Ok(c * 1.01)
}

/// Couples the scalar forward process with its dominating reflected
/// process: same Brownian increments, control from the squared-state
/// identity clamped to [-1, 1], reflection at |x|^2 v K_gamma^2. Checks
/// |X_s| <= sqrt(Upsilon_s) + 1e-8 at every recorded time on every path.
pub fn domination_check(
    spec: &ProblemSpec,
    t: f64,
    x: f64,
    dt_sim: f64,
    n_paths: usize,
    seed: u64,
    c_a_sigma: Option<f64>,
) -> Result<DominationReport, McError> {
    if spec.dim != 1 {
        return Err(McError::Invalid(
            "the coupled domination construction is implemented for scalar state".into(),
        ));
    }
    let c = match c_a_sigma {
        Some(v) => v,
        None => fit_growth_constant(spec, t, &[x])?,
    };
    let bundle = simulate_forward(spec, t, &[x], dt_sim, n_paths, seed)?;
    let floor = (x * x).max(spec.k_gamma * spec.k_gamma);
    let drift_coef = 4.0 * c + 2.0 * c * c;
    let vol_coef = 4.0 * c;
    let co = &spec.coefficients;

    let mut violations = Vec::new();
    let mut traces = Vec::with_capacity(n_paths);
    let mut clamped = 0usize;
    let mut steps_total = 0usize;
    let mut comp_max = 0.0f64;
    let mut sig = vec![0.0; 1];

    for (pidx, path) in bundle.paths.iter().enumerate() {
        let mut upsilon = floor;
        let mut theta = 0.0;
        let mut trace = DominationTrace {
            upsilon: Vec::with_capacity(path.len()),
            theta: Vec::with_capacity(path.len()),
            alpha: Vec::with_capacity(path.len()),
            violated: false,
        };
        trace.upsilon.push(upsilon);
        trace.theta.push(theta);
        trace.alpha.push(0.0);
        let mut comp_sum = 0.0;
        for k in 1..path.len() {
            let s_prev = path.times[k - 1];
            let delta = path.times[k] - s_prev;
            let x_prev = path.state(k - 1, 1)[0];
            co.sigma_at(s_prev, &[x_prev], &mut sig)?;
            let raw_alpha = x_prev * sig[0] / (2.0 * c * (1.0 + upsilon));
            let alpha = raw_alpha.clamp(-1.0, 1.0);
            if raw_alpha != alpha {
                clamped += 1;
            }
            steps_total += 1;
            let dw = path.dw[k];
            let unreflected =
                upsilon + drift_coef * (1.0 + upsilon) * delta + vol_coef * (1.0 + upsilon) * alpha * dw;
            let deficit = (floor - unreflected).max(0.0);
            theta += deficit;
            upsilon = unreflected.max(floor);
            comp_sum += (upsilon - floor) * deficit;
            trace.upsilon.push(upsilon);
            trace.theta.push(theta);
            trace.alpha.push(alpha);

            let x_now = path.state(k, 1)[0].abs();
            let r = upsilon.sqrt();
            if x_now > r + 1e-8 {
                trace.violated = true;
                violations.push(DominationViolation {
                    path: pidx,
                    time: path.times[k],
                    x_abs: x_now,
                    r,
                });
            }
        }
        comp_max = comp_max.max(comp_sum);
        traces.push(trace);
    }

    Ok(DominationReport {
        floor,
        c_a_sigma: c,
        n_paths,
        seed,
        violations,
        clamp_fraction: if steps_total > 0 {
            clamped as f64 / steps_total as f64
        } else {
            0.0
        },
        complementarity_max: comp_max,
        traces,
    })
}

/// Cox-Ross-Rubinstein binomial price of the American put with strike `k`,
/// rate `r`, volatility `s`, maturity `horizon`, priced at spot = strike.
pub fn binomial_oracle(r: f64, s: f64, k: f64, horizon: f64, steps: usize) -> f64 {
    assert!(steps >= 1, "steps must be at least 1");
    let spot = k;
    let dt = horizon / steps as f64;
    let u = (s * dt.sqrt()).exp();
    let d = 1.0 / u;
    let disc = (-r * dt).exp();
    let p = if u - d < 1e-14 {
        0.5
    } else {
        ((r * dt).exp() - d) / (u - d)
    };
    let mut values: Vec<f64> = (0..=steps)
        .map(|j| {
            let st = spot * u.powi(j as i32) * d.powi((steps - j) as i32);
            (k - st).max(0.0)
        })
        .collect();
    for i in (0..steps).rev() {
        for j in 0..=i {
            let st = spot * u.powi(j as i32) * d.powi((i - j) as i32);
            let cont = disc * (p * values[j + 1] + (1.0 - p) * values[j]);
            values[j] = (k - st).max(0.0).max(cont);
        }
    }
    values[0]
}
