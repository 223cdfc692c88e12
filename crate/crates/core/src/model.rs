//! Problem data: coefficients, mark space, structural constants, and the
//! validators that check the structural assumptions on a user-supplied model.
//!
//! All checks run on finite sample clouds; inequalities evaluated in floating
//! point carry a relative tolerance of 1e-9 so that boundary cases (for
//! example a cost function that is identically zero at an equality) do not
//! flip on rounding.

use std::sync::Arc;
use thiserror::Error;

use crate::operators::ValueField;

/// Relative tolerance applied to exact inequalities checked in floating point.
pub const CHECK_REL_TOL: f64 = 1e-9;

/// Budget cap for the no-free-loop chain enumeration.
pub const LOOP_CHAIN_BUDGET: u64 = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("coefficient evaluation failed: {message}")]
pub struct CoeffError {
    pub message: String,
}

impl CoeffError {
    pub fn new(message: impl Into<String>) -> Self {
        CoeffError {
            message: message.into(),
        }
    }
}

pub type CoeffResult = Result<f64, CoeffError>;

/// Scalar function of (t, x).
pub type TimeStateFn = Arc<dyn Fn(f64, &[f64]) -> CoeffResult + Send + Sync>;
/// Scalar function of (t, x, e).
pub type TimeStateMarkFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> CoeffResult + Send + Sync>;
/// Scalar function of x alone.
pub type StateFn = Arc<dyn Fn(&[f64]) -> CoeffResult + Send + Sync>;
/// Local driver: (t, x, y, z) -> value.
pub type LocalDriverFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> CoeffResult + Send + Sync>;

/// Wraps a constant as a (t, x) coefficient.
pub fn const_ts(c: f64) -> TimeStateFn {
    Arc::new(move |_, _| Ok(c))
}

/// Wraps a constant as a (t, x, e) coefficient.
pub fn const_tse(c: f64) -> TimeStateMarkFn {
    Arc::new(move |_, _, _| Ok(c))
}

/// Wraps a constant as a terminal coefficient.
pub fn const_x(c: f64) -> StateFn {
    Arc::new(move |_| Ok(c))
}

/// Wraps a constant as a driver.
pub fn const_driver(c: f64) -> LocalDriverFn {
    Arc::new(move |_, _, _, _| Ok(c))
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(
        "no-free-loop enumeration budget exceeded: {required} chains needed, cap is {cap}"
    )]
    LoopBudgetExceeded { required: u64, cap: u64 },
    #[error(transparent)]
    Eval(#[from] CoeffError),
}

/// Finite quadrature of the compact mark set: nodes with strictly positive
/// weights standing in for the intensity measure.
#[derive(Debug, Clone)]
pub struct MarkSpace {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl MarkSpace {
    pub fn new(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if nodes.is_empty() {
            return Err(ModelError::Invalid("mark space must be non-empty".into()));
        }
        if nodes.len() != weights.len() {
            return Err(ModelError::Invalid(
                "mark nodes and weights must have equal length".into(),
            ));
        }
        let dim = nodes[0].len();
        for n in &nodes {
            if n.len() != dim {
                return Err(ModelError::Invalid(
                    "all mark nodes must share one dimension".into(),
                ));
            }
            if n.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid("mark nodes must be finite".into()));
            }
        }
        for &w in &weights {
            if w.is_nan() || w <= 0.0 || !w.is_finite() {
                return Err(ModelError::Invalid(
                    "every mark weight must be strictly positive and finite".into(),
                ));
            }
        }
        Ok(MarkSpace { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Total intensity lambda(E).
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.nodes
            .iter()
            .map(|n| n.as_slice())
            .zip(self.weights.iter().copied())
    }
}

/// The model coefficients as evaluable functions.
#[derive(Clone)]
pub struct CoefficientSet {
    /// Drift a(t, x), one component per state dimension.
    pub drift: Vec<TimeStateFn>,
    /// Diffusion sigma(t, x), row-major d x d.
    pub sigma: Vec<TimeStateFn>,
    /// Jump map gamma(t, x, e), one component per state dimension.
    pub jump: Vec<TimeStateMarkFn>,
    /// Intervention cost chi(t, x, e).
    pub cost: TimeStateMarkFn,
    /// Lower obstacle h(t, x).
    pub obstacle: TimeStateFn,
    /// Terminal reward psi(x).
    pub terminal: StateFn,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.drift.len())
            .finish()
    }
}

impl CoefficientSet {
    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), CoeffError> {
        for (o, f) in out.iter_mut().zip(&self.drift) {
            *o = f(t, x)?;
        }
        Ok(())
    }

    /// Writes sigma(t, x) row-major into `out` (length d*d).
    pub fn sigma_at(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<(), CoeffError> {
        for (o, f) in out.iter_mut().zip(&self.sigma) {
            *o = f(t, x)?;
        }
        Ok(())
    }

    pub fn jump_at(
        &self,
        t: f64,
        x: &[f64],
        e: &[f64],
        out: &mut [f64],
    ) -> Result<(), CoeffError> {
        for (o, f) in out.iter_mut().zip(&self.jump) {
            *o = f(t, x, e)?;
        }
        Ok(())
    }

    pub fn cost_at(&self, t: f64, x: &[f64], e: &[f64]) -> CoeffResult {
        (self.cost)(t, x, e)
    }

    pub fn obstacle_at(&self, t: f64, x: &[f64]) -> CoeffResult {
        (self.obstacle)(t, x)
    }

    pub fn terminal_at(&self, x: &[f64]) -> CoeffResult {
        (self.terminal)(x)
    }
}

/// A full problem instance: coefficients, mark space and structural constants.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub horizon: f64,
    pub dim: usize,
    pub coefficients: CoefficientSet,
    pub marks: MarkSpace,
    /// Impulse barrier radius K_Gamma.
    pub k_gamma: f64,
    /// Declared polynomial growth exponent rho.
    pub growth_rho: f64,
    /// Declared Lipschitz constant of the driver in (y, z).
    pub lip_f: f64,
    /// Declared Lipschitz constant of the jump map in x.
    pub lip_gamma: f64,
    /// Declared joint Lipschitz constant of drift and diffusion in x.
    pub lip_a_sigma: f64,
    /// Loop return radius delta_1.
    pub loop_delta1: f64,
    /// Minimum cost delta_2 of a returning impulse chain.
    pub loop_delta2: f64,
}

impl ProblemSpec {
    pub fn validate_construction(&self) -> Result<(), ModelError> {
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(ModelError::Invalid("horizon must be positive".into()));
        }
        if self.dim != 1 && self.dim != 2 {
            return Err(ModelError::Invalid("dimension must be 1 or 2".into()));
        }
        if !self.k_gamma.is_finite() || self.k_gamma <= 0.0 {
            return Err(ModelError::Invalid("k_gamma must be positive".into()));
        }
        if !self.loop_delta1.is_finite()
            || self.loop_delta1 <= 0.0
            || !self.loop_delta2.is_finite()
            || self.loop_delta2 <= 0.0
        {
            return Err(ModelError::Invalid(
                "loop_delta1 and loop_delta2 must be positive".into(),
            ));
        }
        if self.coefficients.drift.len() != self.dim
            || self.coefficients.sigma.len() != self.dim * self.dim
            || self.coefficients.jump.len() != self.dim
        {
            return Err(ModelError::Invalid(
                "coefficient arity does not match the declared dimension".into(),
            ));
        }
        for node in (0..self.marks.len()).map(|i| self.marks.node(i)) {
            if node.len() != self.dim {
                return Err(ModelError::Invalid(
                    "mark nodes must have the state dimension".into(),
                ));
            }
        }
        Ok(())
    }

    /// Combined payoff: the obstacle before the horizon, the terminal reward at it.
    pub fn payoff(&self, t: f64, x: &[f64]) -> CoeffResult {
        if t < self.horizon {
            self.coefficients.obstacle_at(t, x)
        } else {
            self.coefficients.terminal_at(x)
        }
    }
}

/// Non-local composition mode of the driver.
#[derive(Clone)]
pub enum DriverMode {
    /// f(t, x, y, z) = f_tilde(t, x, y, z).
    Local,
    /// f = f_tilde + k * (M g)(t, x) with g the running solution.
    LocalPlusKM { k_nl: f64 },
    /// f = f_tilde + k * (M g)(t, x) with g frozen at a fixed field. The
    /// non-local part is a precomputed source term, so the driver is local.
    Frozen {
        field: Arc<ValueField>,
        k_nl: f64,
    },
}

impl std::fmt::Debug for DriverMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DriverMode::Local => write!(f, "Local"),
            DriverMode::LocalPlusKM { k_nl } => write!(f, "LocalPlusKM(k={k_nl})"),
            DriverMode::Frozen { k_nl, .. } => write!(f, "Frozen(k={k_nl})"),
        }
    }
}

/// Local driver plus its non-local composition mode.
#[derive(Clone)]
pub struct DriverSpec {
    pub f_tilde: LocalDriverFn,
    pub mode: DriverMode,
}

impl std::fmt::Debug for DriverSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriverSpec").field("mode", &self.mode).finish()
    }
}

impl DriverSpec {
    pub fn local(f_tilde: LocalDriverFn) -> Self {
        DriverSpec {
            f_tilde,
            mode: DriverMode::Local,
        }
    }

    pub fn with_intervention_term(f_tilde: LocalDriverFn, k_nl: f64) -> Self {
        DriverSpec {
            f_tilde,
            mode: DriverMode::LocalPlusKM { k_nl },
        }
    }

    pub fn frozen(&self, field: Arc<ValueField>) -> Self {
        let k_nl = match self.mode {
            DriverMode::Local => 0.0,
            DriverMode::LocalPlusKM { k_nl } => k_nl,
            DriverMode::Frozen { k_nl, .. } => k_nl,
        };
        DriverSpec {
            f_tilde: self.f_tilde.clone(),
            mode: DriverMode::Frozen { field, k_nl },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Error,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Error => "error",
        }
    }
}

/// A concrete point (or impulse chain) reproducing a violation.
#[derive(Debug, Clone)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
    pub mark: Option<Vec<f64>>,
    /// Mark sequence of a violating impulse chain (empty for pointwise checks).
    pub chain: Vec<Vec<f64>>,
    pub lhs: f64,
    pub rhs: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub witness: Option<Witness>,
    pub measured: Vec<(String, f64)>,
    pub tolerance: f64,
}

/// Outcome of a validator run. Merging reports is associative and
/// commutative in the pass/fail sense; checks concatenate.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn merge(mut self, other: ValidationReport) -> ValidationReport {
        self.checks.extend(other.checks);
        self
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Plain-text `key = value` rendering.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!("{} = {}\n", c.name, c.status.as_str()));
            for (k, v) in &c.measured {
                out.push_str(&format!("{}.{} = {}\n", c.name, k, crate::fmt_f64(*v)));
            }
            out.push_str(&format!(
                "{}.tolerance = {}\n",
                c.name,
                crate::fmt_f64(c.tolerance)
            ));
        }
        out.push_str(&format!(
            "overall = {}\n",
            if self.passed() { "pass" } else { "fail" }
        ));
        out
    }

    /// CSV of witnesses: `check,t,x,mark,chain,lhs,rhs,detail`.
    pub fn witnesses_csv(&self) -> String {
        let mut out = String::from("check,t,x,mark,chain,lhs,rhs,detail\n");
        for c in &self.checks {
            if let Some(w) = &c.witness {
                let x = join_vec(&w.x);
                let mark = w.mark.as_ref().map(|m| join_vec(m)).unwrap_or_default();
                let chain = w
                    .chain
                    .iter()
                    .map(|m| join_vec(m))
                    .collect::<Vec<_>>()
                    .join(";");
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    c.name,
                    crate::fmt_f64(w.t),
                    x,
                    mark,
                    chain,
                    crate::fmt_f64(w.lhs),
                    crate::fmt_f64(w.rhs),
                    w.detail
                ));
            }
        }
        out
    }
}

fn join_vec(v: &[f64]) -> String {
    v.iter()
        .map(|c| crate::fmt_f64(*c))
        .collect::<Vec<_>>()
        .join(" ")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// A sample point of the validation cloud.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
}

struct CheckAccumulator {
    name: &'static str,
    tolerance: f64,
    worst: Option<Witness>,
    worst_gap: f64,
    error: Option<Witness>,
    measured: Vec<(String, f64)>,
}

impl CheckAccumulator {
    fn new(name: &'static str, tolerance: f64) -> Self {
        CheckAccumulator {
            name,
            tolerance,
            worst: None,
            worst_gap: 0.0,
            error: None,
            measured: Vec::new(),
        }
    }

    /// Records `lhs <= rhs` violations; keeps the worst one as witness.
    fn require_le(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> Witness) {
        let tol = self.tolerance * rhs.abs().max(1.0);
        let gap = lhs - rhs;
        if gap > tol && gap > self.worst_gap {
            self.worst_gap = gap;
            self.worst = Some(witness());
        }
    }

    fn record_error(&mut self, err: &CoeffError, t: f64, x: &[f64], mark: Option<&[f64]>) {
        if self.error.is_none() {
            self.error = Some(Witness {
                t,
                x: x.to_vec(),
                mark: mark.map(|m| m.to_vec()),
                chain: Vec::new(),
                lhs: f64::NAN,
                rhs: f64::NAN,
                detail: err.message.clone(),
            });
        }
    }

    fn finish(self) -> CheckResult {
        let (status, witness) = if let Some(e) = self.error {
            (CheckStatus::Error, Some(e))
        } else if let Some(w) = self.worst {
            (CheckStatus::Fail, Some(w))
        } else {
            (CheckStatus::Pass, None)
        };
        CheckResult {
            name: self.name.to_string(),
            status,
            witness,
            measured: self.measured,
            tolerance: self.tolerance,
        }
    }
}

/// Static assumption checks over a sample cloud: non-negative intervention
/// cost, the impulse non-expansion bound, terminal consistency, and fitted
/// polynomial-growth constants.
pub fn validate_static(spec: &ProblemSpec, samples: &[Sample]) -> ValidationReport {
    let d = spec.dim;
    let co = &spec.coefficients;
    let horizon = spec.horizon;

    let mut chi_check = CheckAccumulator::new("chi_nonneg", CHECK_REL_TOL);
    let mut impulse_check = CheckAccumulator::new("impulse_bound", CHECK_REL_TOL);
    let mut terminal_check = CheckAccumulator::new("terminal_consistency", CHECK_REL_TOL);

    let mut gamma_buf = vec![0.0; d];
    let mut shifted = vec![0.0; d];

    for s in samples {
        for (e, _) in spec.marks.iter() {
            // chi >= 0
            match co.cost_at(s.t, &s.x, e) {
                Ok(chi) => chi_check.require_le(-chi, 0.0, || Witness {
                    t: s.t,
                    x: s.x.clone(),
                    mark: Some(e.to_vec()),
                    chain: Vec::new(),
                    lhs: chi,
                    rhs: 0.0,
                    detail: "chi(t,x,e) < 0".into(),
                }),
                Err(err) => chi_check.record_error(&err, s.t, &s.x, Some(e)),
            }
            // |x + gamma| <= K_gamma v |x|
            match co.jump_at(s.t, &s.x, e, &mut gamma_buf) {
                Ok(()) => {
                    for i in 0..d {
                        shifted[i] = s.x[i] + gamma_buf[i];
                    }
                    let lhs = norm(&shifted);
                    let rhs = spec.k_gamma.max(norm(&s.x));
                    impulse_check.require_le(lhs, rhs, || Witness {
                        t: s.t,
                        x: s.x.clone(),
                        mark: Some(e.to_vec()),
                        chain: Vec::new(),
                        lhs,
                        rhs,
                        detail: "|x+gamma(t,x,e)| > max(K_gamma, |x|)".into(),
                    });
                }
                Err(err) => impulse_check.record_error(&err, s.t, &s.x, Some(e)),
            }
        }
    }

    // Terminal consistency at t = T over the x-projections of the cloud:
    // h(T,x) <= psi(x) <= psi(x + gamma(T,x,e)) + chi(T,x,e).
    for s in samples {
        let psi = match co.terminal_at(&s.x) {
            Ok(v) => v,
            Err(err) => {
                terminal_check.record_error(&err, horizon, &s.x, None);
                continue;
            }
        };
        match co.obstacle_at(horizon, &s.x) {
            Ok(h) => terminal_check.require_le(h, psi, || Witness {
                t: horizon,
                x: s.x.clone(),
                mark: None,
                chain: Vec::new(),
                lhs: h,
                rhs: psi,
                detail: "h(T,x) > psi(x)".into(),
            }),
            Err(err) => terminal_check.record_error(&err, horizon, &s.x, None),
        }
        for (e, _) in spec.marks.iter() {
            let step = (|| -> Result<(f64, f64), CoeffError> {
                co.jump_at(horizon, &s.x, e, &mut gamma_buf)?;
                for i in 0..d {
                    shifted[i] = s.x[i] + gamma_buf[i];
                }
                let psi_shift = co.terminal_at(&shifted)?;
                let chi = co.cost_at(horizon, &s.x, e)?;
                Ok((psi_shift, chi))
            })();
            match step {
                Ok((psi_shift, chi)) => {
                    terminal_check.require_le(psi, psi_shift + chi, || Witness {
                        t: horizon,
                        x: s.x.clone(),
                        mark: Some(e.to_vec()),
                        chain: Vec::new(),
                        lhs: psi,
                        rhs: psi_shift + chi,
                        detail: "psi(x) > psi(x+gamma(T,x,e)) + chi(T,x,e)".into(),
                    });
                }
                Err(err) => terminal_check.record_error(&err, horizon, &s.x, Some(e)),
            }
        }
    }

    // Growth-constant fits: |g| <= C (1 + |x|^rho) with C fitted by least
    // squares over the cloud. Reported, not pass/fail: the fit is the
    // sampled surrogate for a global bound.
    let rho = spec.growth_rho;
    let weight = |x: &[f64]| 1.0 + norm(x).powf(rho);
    let fit = |name: &'static str, values: &[(f64, f64)]| -> CheckResult {
        // values: (|g(sample)|, weight)
        let mut num = 0.0;
        let mut den = 0.0;
        let mut cmax: f64 = 0.0;
        for &(g, w) in values {
            num += g * w;
            den += w * w;
            cmax = cmax.max(g / w);
        }
        let c_ls = if den > 0.0 { num / den } else { 0.0 };
        CheckResult {
            name: name.to_string(),
            status: CheckStatus::Pass,
            witness: None,
            measured: vec![
                ("fitted_constant".to_string(), c_ls),
                ("max_ratio".to_string(), cmax),
            ],
            tolerance: CHECK_REL_TOL,
        }
    };

    let mut h_vals = Vec::new();
    let mut psi_vals = Vec::new();
    let mut chi_vals = Vec::new();
    let mut growth_error: Option<(Witness, &'static str)> = None;
    for s in samples {
        let w = weight(&s.x);
        match co.obstacle_at(s.t, &s.x) {
            Ok(v) => h_vals.push((v.abs(), w)),
            Err(err) => {
                if growth_error.is_none() {
                    growth_error = Some((
                        Witness {
                            t: s.t,
                            x: s.x.clone(),
                            mark: None,
                            chain: Vec::new(),
                            lhs: f64::NAN,
                            rhs: f64::NAN,
                            detail: err.message.clone(),
                        },
                        "growth_h",
                    ));
                }
            }
        }
        if let Ok(v) = co.terminal_at(&s.x) {
            psi_vals.push((v.abs(), w));
        }
        if let Ok(v) = (0..spec.marks.len())
            .map(|i| co.cost_at(s.t, &s.x, spec.marks.node(i)))
            .try_fold(0.0f64, |m, r| r.map(|v| m.max(v.abs())))
        {
            chi_vals.push((v, w));
        }
    }

    let mut report = ValidationReport {
        checks: vec![
            chi_check.finish(),
            impulse_check.finish(),
            terminal_check.finish(),
            fit("growth_h", &h_vals),
            fit("growth_psi", &psi_vals),
            fit("growth_chi", &chi_vals),
        ],
    };
    if let Some((w, name)) = growth_error {
        if let Some(c) = report.checks.iter_mut().find(|c| c.name == name) {
            c.status = CheckStatus::Error;
            c.witness = Some(w);
        }
    }
    report
}

/// Growth fit for a driver at (y, z) = (0, 0); separate from
/// [`validate_static`] because the driver lives in [`DriverSpec`].
pub fn validate_driver_growth(
    spec: &ProblemSpec,
    driver: &DriverSpec,
    samples: &[Sample],
) -> ValidationReport {
    let rho = spec.growth_rho;
    let zero_z = vec![0.0; spec.dim];
    let mut acc = CheckAccumulator::new("growth_f", CHECK_REL_TOL);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut cmax: f64 = 0.0;
    for s in samples {
        match (driver.f_tilde)(s.t, &s.x, 0.0, &zero_z) {
            Ok(v) => {
                let w = 1.0 + norm(&s.x).powf(rho);
                num += v.abs() * w;
                den += w * w;
                cmax = cmax.max(v.abs() / w);
            }
            Err(err) => acc.record_error(&err, s.t, &s.x, None),
        }
    }
    let mut result = acc.finish();
    result.measured = vec![
        ("fitted_constant".to_string(), if den > 0.0 { num / den } else { 0.0 }),
        ("max_ratio".to_string(), cmax),
    ];
    ValidationReport {
        checks: vec![result],
    }
}

/// Exhaustively enumerates impulse chains over the mark nodes up to
/// `max_depth` from each start; any chain returning within `loop_delta1` of
/// its start must cost at least `loop_delta2`. Fails with the cheapest
/// violating chain.
pub fn check_no_free_loop(
    spec: &ProblemSpec,
    t: f64,
    starts: &[Vec<f64>],
    max_depth: usize,
) -> Result<ValidationReport, ModelError> {
    if max_depth < 1 {
        return Err(ModelError::Invalid("max_depth must be at least 1".into()));
    }
    let m = spec.marks.len() as u64;
    let mut per_start: u64 = 0;
    let mut pow: u64 = 1;
    for _ in 0..max_depth {
        pow = pow.saturating_mul(m);
        per_start = per_start.saturating_add(pow);
    }
    let required = per_start.saturating_mul(starts.len() as u64);
    if required > LOOP_CHAIN_BUDGET {
        return Err(ModelError::LoopBudgetExceeded {
            required,
            cap: LOOP_CHAIN_BUDGET,
        });
    }

    struct Best {
        cost: f64,
        chain: Vec<usize>,
        start: Vec<f64>,
    }

    let mut acc = CheckAccumulator::new("no_free_loop", CHECK_REL_TOL);
    let mut best: Option<Best> = None;
    let mut chains_checked: u64 = 0;
    let mut returning: u64 = 0;
    let co = &spec.coefficients;
    let d = spec.dim;
    let delta2_tol = CHECK_REL_TOL * spec.loop_delta2.abs().max(1.0);

    for start in starts {
        // Iterative depth-first walk over mark sequences in index order.
        let mut path: Vec<usize> = Vec::new();
        let mut states: Vec<Vec<f64>> = vec![start.clone()];
        let mut costs: Vec<f64> = vec![0.0];
        let mut gamma_buf = vec![0.0; d];
        'outer: loop {
            // descend with mark 0 while possible, else advance/backtrack
            let next_mark = if path.len() < max_depth {
                Some(0usize)
            } else {
                None
            };
            let mut advance = next_mark;
            loop {
                match advance {
                    Some(mark) if mark < spec.marks.len() => {
                        let e = spec.marks.node(mark);
                        let x = states.last().unwrap().clone();
                        let step = (|| -> Result<(Vec<f64>, f64), CoeffError> {
                            co.jump_at(t, &x, e, &mut gamma_buf)?;
                            let mut x_next = x.clone();
                            for i in 0..d {
                                x_next[i] += gamma_buf[i];
                            }
                            let chi = co.cost_at(t, &x, e)?;
                            Ok((x_next, chi))
                        })();
                        let (x_next, chi) = match step {
                            Ok(v) => v,
                            Err(err) => {
                                acc.record_error(&err, t, &x, Some(e));
                                return Ok(ValidationReport {
                                    checks: vec![acc.finish()],
                                });
                            }
                        };
                        path.push(mark);
                        costs.push(costs.last().unwrap() + chi);
                        states.push(x_next);
                        chains_checked += 1;

                        // check the return condition at this prefix
                        let diff: f64 = states
                            .last()
                            .unwrap()
                            .iter()
                            .zip(start.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        if diff <= spec.loop_delta1 {
                            returning += 1;
                            let cost = *costs.last().unwrap();
                            if cost < spec.loop_delta2 - delta2_tol {
                                let better = match &best {
                                    None => true,
                                    Some(b) => {
                                        cost < b.cost
                                            || (cost == b.cost && path.len() < b.chain.len())
                                    }
                                };
                                if better {
                                    best = Some(Best {
                                        cost,
                                        chain: path.clone(),
                                        start: start.clone(),
                                    });
                                }
                            }
                        }
                        break;
                    }
                    _ => {
                        // backtrack
                        match path.pop() {
                            Some(last) => {
                                states.pop();
                                costs.pop();
                                advance = Some(last + 1);
                            }
                            None => break 'outer,
                        }
                    }
                }
            }
        }
    }

    acc.measured = vec![
        ("chains_checked".to_string(), chains_checked as f64),
        ("returning_chains".to_string(), returning as f64),
    ];
    if let Some(b) = best {
        acc.worst_gap = 1.0;
        acc.worst = Some(Witness {
            t,
            x: b.start,
            mark: None,
            chain: b
                .chain
                .iter()
                .map(|&i| spec.marks.node(i).to_vec())
                .collect(),
            lhs: b.cost,
            rhs: spec.loop_delta2,
            detail: "returning impulse chain cheaper than delta_2".into(),
        });
    }
    Ok(ValidationReport {
        checks: vec![acc.finish()],
    })
}

/// A pair of evaluation points for difference quotients: the x-leg differs in
/// x at fixed (t, e); the (y, z)-leg differs in (y, z) at fixed (t, x_a).
#[derive(Debug, Clone)]
pub struct LipschitzPair {
    pub t: f64,
    pub x_a: Vec<f64>,
    pub x_b: Vec<f64>,
    pub mark: Vec<f64>,
    pub y_a: f64,
    pub y_b: f64,
    pub z_a: Vec<f64>,
    pub z_b: Vec<f64>,
}

/// Reports max difference quotients for drift, diffusion and jump map in x
/// and for the driver in (y, z); flags quotients above the declared
/// constants by more than 1%.
pub fn estimate_lipschitz(
    spec: &ProblemSpec,
    driver: &DriverSpec,
    pairs: &[LipschitzPair],
) -> ValidationReport {
    let d = spec.dim;
    let co = &spec.coefficients;
    const SLACK: f64 = 1.01;

    let mut q_a: f64 = 0.0;
    let mut q_sigma: f64 = 0.0;
    let mut q_gamma: f64 = 0.0;
    let mut q_f: f64 = 0.0;
    let mut a_acc = CheckAccumulator::new("lipschitz_a_sigma", CHECK_REL_TOL);
    let mut g_acc = CheckAccumulator::new("lipschitz_gamma", CHECK_REL_TOL);
    let mut f_acc = CheckAccumulator::new("lipschitz_f", CHECK_REL_TOL);

    let mut buf_a = vec![0.0; d];
    let mut buf_b = vec![0.0; d];
    let mut sig_a = vec![0.0; d * d];
    let mut sig_b = vec![0.0; d * d];

    for p in pairs {
        let dx: f64 = p
            .x_a
            .iter()
            .zip(&p.x_b)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dx > 0.0 {
            match (
                co.drift_at(p.t, &p.x_a, &mut buf_a),
                co.drift_at(p.t, &p.x_b, &mut buf_b),
            ) {
                (Ok(()), Ok(())) => {
                    let diff: f64 = buf_a
                        .iter()
                        .zip(&buf_b)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    q_a = q_a.max(diff / dx);
                }
                (Err(e), _) | (_, Err(e)) => a_acc.record_error(&e, p.t, &p.x_a, None),
            }
            match (
                co.sigma_at(p.t, &p.x_a, &mut sig_a),
                co.sigma_at(p.t, &p.x_b, &mut sig_b),
            ) {
                (Ok(()), Ok(())) => {
                    let diff: f64 = sig_a
                        .iter()
                        .zip(&sig_b)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    q_sigma = q_sigma.max(diff / dx);
                }
                (Err(e), _) | (_, Err(e)) => a_acc.record_error(&e, p.t, &p.x_a, None),
            }
            match (
                co.jump_at(p.t, &p.x_a, &p.mark, &mut buf_a),
                co.jump_at(p.t, &p.x_b, &p.mark, &mut buf_b),
            ) {
                (Ok(()), Ok(())) => {
                    let diff: f64 = buf_a
                        .iter()
                        .zip(&buf_b)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    q_gamma = q_gamma.max(diff / dx);
                }
                (Err(e), _) | (_, Err(e)) => g_acc.record_error(&e, p.t, &p.x_a, Some(&p.mark)),
            }
        }
        let dyz = (p.y_a - p.y_b).abs()
            + p.z_a
                .iter()
                .zip(&p.z_b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        if dyz > 0.0 {
            match (
                (driver.f_tilde)(p.t, &p.x_a, p.y_a, &p.z_a),
                (driver.f_tilde)(p.t, &p.x_a, p.y_b, &p.z_b),
            ) {
                (Ok(fa), Ok(fb)) => q_f = q_f.max((fa - fb).abs() / dyz),
                (Err(e), _) | (_, Err(e)) => f_acc.record_error(&e, p.t, &p.x_a, None),
            }
        }
    }

    let q_as = q_a.max(q_sigma);
    a_acc.require_le(q_as, spec.lip_a_sigma * SLACK, || Witness {
        t: f64::NAN,
        x: Vec::new(),
        mark: None,
        chain: Vec::new(),
        lhs: q_as,
        rhs: spec.lip_a_sigma,
        detail: "drift/diffusion difference quotient exceeds declared constant".into(),
    });
    a_acc.measured = vec![
        ("estimate_a".to_string(), q_a),
        ("estimate_sigma".to_string(), q_sigma),
    ];
    g_acc.require_le(q_gamma, spec.lip_gamma * SLACK, || Witness {
        t: f64::NAN,
        x: Vec::new(),
        mark: None,
        chain: Vec::new(),
        lhs: q_gamma,
        rhs: spec.lip_gamma,
        detail: "jump-map difference quotient exceeds declared constant".into(),
    });
    g_acc.measured = vec![("estimate".to_string(), q_gamma)];
    f_acc.require_le(q_f, spec.lip_f * SLACK, || Witness {
        t: f64::NAN,
        x: Vec::new(),
        mark: None,
        chain: Vec::new(),
        lhs: q_f,
        rhs: spec.lip_f,
        detail: "driver (y,z) difference quotient exceeds declared constant".into(),
    });
    f_acc.measured = vec![("estimate".to_string(), q_f)];

    ValidationReport {
        checks: vec![a_acc.finish(), g_acc.finish(), f_acc.finish()],
    }
}

/// Deterministic sample cloud over [0, T] x [-radius, radius]^d, seeded.
pub fn sample_cloud(spec: &ProblemSpec, radius: f64, count: usize, seed: u64) -> Vec<Sample> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        // include the horizon itself so terminal checks see t = T exactly
        let t = if i % 8 == 0 {
            spec.horizon
        } else {
            rng.gen_range(0.0..spec.horizon)
        };
        let x: Vec<f64> = (0..spec.dim)
            .map(|_| rng.gen_range(-radius..radius))
            .collect();
        out.push(Sample { t, x });
    }
    out
}

/// Deterministic Lipschitz pair cloud, seeded.
pub fn lipschitz_pairs(
    spec: &ProblemSpec,
    radius: f64,
    count: usize,
    seed: u64,
) -> Vec<LipschitzPair> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut out = Vec::with_capacity(count);
    let m = spec.marks.len();
    for i in 0..count {
        let t = rng.gen_range(0.0..=spec.horizon);
        let x_a: Vec<f64> = (0..spec.dim)
            .map(|_| rng.gen_range(-radius..radius))
            .collect();
        let x_b: Vec<f64> = (0..spec.dim)
            .map(|_| rng.gen_range(-radius..radius))
            .collect();
        let mark = spec.marks.node(i % m).to_vec();
        out.push(LipschitzPair {
            t,
            x_a,
            x_b,
            mark,
            y_a: rng.gen_range(-2.0..2.0),
            y_b: rng.gen_range(-2.0..2.0),
            z_a: (0..spec.dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            z_b: (0..spec.dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_spec(
        jump: TimeStateMarkFn,
        cost: TimeStateMarkFn,
        obstacle: TimeStateFn,
        terminal: StateFn,
        k_gamma: f64,
    ) -> ProblemSpec {
        let marks = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.0)],
                sigma: vec![const_ts(0.0)],
                jump: vec![jump],
                cost,
                obstacle,
                terminal,
            },
            marks,
            k_gamma,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        }
    }

    fn cloud_1d(xs: &[f64], t: f64) -> Vec<Sample> {
        xs.iter().map(|&x| Sample { t, x: vec![x] }).collect()
    }

    #[test]
    fn validate_static_identity_case_passes() {
        // gamma = 0, chi = 1, h = 0, psi = |x|, K_gamma = 1
        let spec = simple_spec(
            const_tse(0.0),
            const_tse(1.0),
            const_ts(0.0),
            Arc::new(|x: &[f64]| Ok(x[0].abs())),
            1.0,
        );
        let report = validate_static(&spec, &cloud_1d(&[-2.0, -0.5, 0.0, 0.7, 3.0], 0.3));
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn validate_static_terminal_consistency_fails_with_witness() {
        // psi(x) = x, gamma = -1, chi = 0.5 at x = 0: 0 > -1 + 0.5
        let spec = simple_spec(
            const_tse(-1.0),
            const_tse(0.5),
            const_ts(-10.0),
            Arc::new(|x: &[f64]| Ok(x[0])),
            10.0,
        );
        let report = validate_static(&spec, &cloud_1d(&[0.0], 1.0));
        let check = report.check("terminal_consistency").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        let w = check.witness.as_ref().unwrap();
        assert_eq!(w.x, vec![0.0]);
        // the witness reproduces the violated inequality: lhs > rhs
        assert!(w.lhs > w.rhs);
        assert!((w.lhs - 0.0).abs() < 1e-15);
        assert!((w.rhs - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn validate_static_impulse_bound_fails_with_witness() {
        // gamma = 2x at x = 2, K_gamma = 1: |x + gamma| = 6 > max(1, 2) = 2
        let spec = simple_spec(
            Arc::new(|_t: f64, x: &[f64], _e: &[f64]| Ok(2.0 * x[0])),
            const_tse(1.0),
            const_ts(0.0),
            Arc::new(|x: &[f64]| Ok(x[0].abs())),
            1.0,
        );
        let report = validate_static(&spec, &cloud_1d(&[2.0], 0.5));
        let check = report.check("impulse_bound").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        let w = check.witness.as_ref().unwrap();
        assert!((w.lhs - 6.0).abs() < 1e-12);
        assert!((w.rhs - 2.0).abs() < 1e-12);
        // re-evaluating the witness through the coefficients reproduces it
        let mut g = vec![0.0];
        spec.coefficients
            .jump_at(w.t, &w.x, w.mark.as_ref().unwrap(), &mut g)
            .unwrap();
        assert!((w.x[0] + g[0]).abs() > spec.k_gamma.max(w.x[0].abs()));
    }

    #[test]
    fn validate_static_is_deterministic() {
        let spec = simple_spec(
            const_tse(0.0),
            const_tse(1.0),
            const_ts(0.0),
            Arc::new(|x: &[f64]| Ok(x[0].abs())),
            1.0,
        );
        let cloud = sample_cloud(&spec, 2.0, 64, 11);
        let a = validate_static(&spec, &cloud).to_key_values();
        let b = validate_static(&spec, &cloud).to_key_values();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_static_reports_evaluation_error_with_sample() {
        let spec = simple_spec(
            const_tse(0.0),
            Arc::new(|_t: f64, x: &[f64], _e: &[f64]| {
                if x[0] > 1.0 {
                    Err(CoeffError::new("boom at x"))
                } else {
                    Ok(1.0)
                }
            }),
            const_ts(0.0),
            Arc::new(|x: &[f64]| Ok(x[0].abs())),
            1.0,
        );
        let report = validate_static(&spec, &cloud_1d(&[0.0, 2.0], 0.5));
        let check = report.check("chi_nonneg").unwrap();
        assert_eq!(check.status, CheckStatus::Error);
        assert_eq!(check.witness.as_ref().unwrap().x, vec![2.0]);
    }

    fn two_mark_spec(chi: f64, delta1: f64, delta2: f64) -> ProblemSpec {
        let marks = MarkSpace::new(vec![vec![1.0], vec![-1.0]], vec![1.0, 1.0]).unwrap();
        ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.0)],
                sigma: vec![const_ts(0.0)],
                jump: vec![Arc::new(|_t: f64, _x: &[f64], e: &[f64]| Ok(e[0]))],
                cost: const_tse(chi),
                obstacle: const_ts(0.0),
                terminal: const_x(0.0),
            },
            marks,
            k_gamma: 10.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: delta1,
            loop_delta2: delta2,
        }
    }

    #[test]
    fn no_free_loop_passes_with_positive_cost() {
        // gamma = +-1, chi = 0.3, delta1 = 0.1, delta2 = 0.5, depth 4:
        // every returning chain has length >= 2, cost >= 0.6
        let spec = two_mark_spec(0.3, 0.1, 0.5);
        let report =
            check_no_free_loop(&spec, 0.5, &[vec![0.0], vec![0.7], vec![-1.3]], 4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn no_free_loop_fails_with_zero_cost_and_short_witness() {
        let spec = two_mark_spec(0.0, 0.1, 0.5);
        let report = check_no_free_loop(&spec, 0.5, &[vec![0.0]], 4).unwrap();
        let check = report.check("no_free_loop").unwrap();
        assert_eq!(check.status, CheckStatus::Fail);
        let w = check.witness.as_ref().unwrap();
        assert_eq!(w.chain.len(), 2, "cheapest witness should be the 2-chain");
        assert_eq!(w.chain[0], vec![1.0]);
        assert_eq!(w.chain[1], vec![-1.0]);
        assert_eq!(w.lhs, 0.0);
    }

    #[test]
    fn no_free_loop_vacuous_pass_when_no_chain_returns() {
        // single mark gamma = +5: no chain comes back within delta1
        let marks = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let spec = ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.0)],
                sigma: vec![const_ts(0.0)],
                jump: vec![const_tse(5.0)],
                cost: const_tse(0.0),
                obstacle: const_ts(0.0),
                terminal: const_x(0.0),
            },
            marks,
            k_gamma: 100.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: 0.1,
            loop_delta2: 0.5,
        };
        let report = check_no_free_loop(&spec, 0.0, &[vec![0.0], vec![2.0]], 3).unwrap();
        assert!(report.passed());
        let check = report.check("no_free_loop").unwrap();
        let returning = check
            .measured
            .iter()
            .find(|(k, _)| k == "returning_chains")
            .unwrap()
            .1;
        assert_eq!(returning, 0.0);
    }

    #[test]
    fn no_free_loop_budget_error() {
        let spec = two_mark_spec(0.3, 0.1, 0.5);
        let starts: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 * 0.1]).collect();
        let err = check_no_free_loop(&spec, 0.0, &starts, 30).unwrap_err();
        match err {
            ModelError::LoopBudgetExceeded { .. } => {}
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    /// Independent brute force: enumerate mark sequences by counting in base m.
    fn brute_force_no_free_loop(
        spec: &ProblemSpec,
        t: f64,
        start: &[f64],
        max_depth: usize,
    ) -> Option<(f64, Vec<usize>)> {
        let m = spec.marks.len();
        let mut worst: Option<(f64, Vec<usize>)> = None;
        for depth in 1..=max_depth {
            let total = m.pow(depth as u32);
            for code in 0..total {
                let mut seq = Vec::with_capacity(depth);
                let mut c = code;
                for _ in 0..depth {
                    seq.push(c % m);
                    c /= m;
                }
                let mut x = start.to_vec();
                let mut cost = 0.0;
                for &mk in &seq {
                    let e = spec.marks.node(mk);
                    let mut g = vec![0.0; spec.dim];
                    spec.coefficients.jump_at(t, &x, e, &mut g).unwrap();
                    cost += spec.coefficients.cost_at(t, &x, e).unwrap();
                    for i in 0..spec.dim {
                        x[i] += g[i];
                    }
                }
                let dist: f64 = x
                    .iter()
                    .zip(start)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= spec.loop_delta1 && cost < spec.loop_delta2 {
                    let better = match &worst {
                        None => true,
                        Some((bc, bs)) => cost < *bc || (cost == *bc && seq.len() < bs.len()),
                    };
                    if better {
                        worst = Some((cost, seq));
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn no_free_loop_agrees_with_brute_force() {
        for &(chi, d2) in &[(0.3, 0.5), (0.0, 0.5), (0.2, 0.3), (0.26, 0.5)] {
            let spec = two_mark_spec(chi, 0.1, d2);
            for start in [vec![0.0], vec![0.4], vec![-0.9]] {
                let report = check_no_free_loop(&spec, 0.25, std::slice::from_ref(&start), 4).unwrap();
                let brute = brute_force_no_free_loop(&spec, 0.25, &start, 4);
                match brute {
                    None => assert!(report.passed(), "chi={chi} start={start:?}"),
                    Some((cost, seq)) => {
                        let check = report.check("no_free_loop").unwrap();
                        assert_eq!(check.status, CheckStatus::Fail);
                        let w = check.witness.as_ref().unwrap();
                        assert!((w.lhs - cost).abs() < 1e-12);
                        assert_eq!(w.chain.len(), seq.len());
                    }
                }
            }
        }
    }

    #[test]
    fn lipschitz_linear_coefficient() {
        let mk = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let mut spec = ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![Arc::new(|_t: f64, x: &[f64]| Ok(2.0 * x[0]))],
                sigma: vec![const_ts(0.0)],
                jump: vec![const_tse(0.0)],
                cost: const_tse(1.0),
                obstacle: const_ts(0.0),
                terminal: const_x(0.0),
            },
            marks: mk,
            k_gamma: 1.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 2.0,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        };
        let driver = DriverSpec::local(const_driver(0.0));
        let pairs = lipschitz_pairs(&spec, 2.0, 128, 3);
        let report = estimate_lipschitz(&spec, &driver, &pairs);
        let check = report.check("lipschitz_a_sigma").unwrap();
        assert_eq!(check.status, CheckStatus::Pass);
        let est = check.measured.iter().find(|(k, _)| k == "estimate_a").unwrap().1;
        assert!((est - 2.0).abs() < 1e-9, "estimate {est}");

        // declared constant 1 makes the same coefficient get flagged
        spec.lip_a_sigma = 1.0;
        let report = estimate_lipschitz(&spec, &driver, &pairs);
        assert_eq!(
            report.check("lipschitz_a_sigma").unwrap().status,
            CheckStatus::Fail
        );
    }

    #[test]
    fn lipschitz_sine_driver_within_unit_constant() {
        let mk = MarkSpace::new(vec![vec![0.0]], vec![1.0]).unwrap();
        let spec = ProblemSpec {
            horizon: 1.0,
            dim: 1,
            coefficients: CoefficientSet {
                drift: vec![const_ts(0.0)],
                sigma: vec![const_ts(0.0)],
                jump: vec![const_tse(0.0)],
                cost: const_tse(1.0),
                obstacle: const_ts(0.0),
                terminal: const_x(0.0),
            },
            marks: mk,
            k_gamma: 1.0,
            growth_rho: 2.0,
            lip_f: 1.0,
            lip_gamma: 1.0,
            lip_a_sigma: 1.0,
            loop_delta1: 0.1,
            loop_delta2: 0.1,
        };
        let driver = DriverSpec::local(Arc::new(
            |_t: f64, _x: &[f64], y: f64, _z: &[f64]| Ok(y.sin()),
        ));
        // dense pairs spanning y in [-1, 1]
        let mut pairs = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                if i == j {
                    continue;
                }
                let ya = -1.0 + 2.0 * (i as f64) / 39.0;
                let yb = -1.0 + 2.0 * (j as f64) / 39.0;
                pairs.push(LipschitzPair {
                    t: 0.5,
                    x_a: vec![0.0],
                    x_b: vec![0.0],
                    mark: vec![0.0],
                    y_a: ya,
                    y_b: yb,
                    z_a: vec![0.0],
                    z_b: vec![0.0],
                });
            }
        }
        let report = estimate_lipschitz(&spec, &driver, &pairs);
        let check = report.check("lipschitz_f").unwrap();
        assert_eq!(check.status, CheckStatus::Pass);
        let est = check.measured[0].1;
        assert!(est <= 1.0 + 1e-12, "estimate {est}");
    }

    #[test]
    fn report_merge_is_order_insensitive_for_outcome() {
        let a = ValidationReport {
            checks: vec![CheckResult {
                name: "a".into(),
                status: CheckStatus::Pass,
                witness: None,
                measured: vec![],
                tolerance: 0.0,
            }],
        };
        let b = ValidationReport {
            checks: vec![CheckResult {
                name: "b".into(),
                status: CheckStatus::Fail,
                witness: None,
                measured: vec![],
                tolerance: 0.0,
            }],
        };
        assert_eq!(
            a.clone().merge(b.clone()).passed(),
            b.merge(a).passed()
        );
    }

    #[test]
    fn domain_types_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<ProblemSpec>();
        assert_send_sync::<DriverSpec>();
        assert_send_sync::<ValidationReport>();
        assert_send_sync::<crate::operators::ValueField>();
    }

    #[test]
    fn mark_space_invariants() {
        assert!(MarkSpace::new(vec![], vec![]).is_err());
        assert!(MarkSpace::new(vec![vec![1.0]], vec![0.0]).is_err());
        assert!(MarkSpace::new(vec![vec![1.0]], vec![-1.0]).is_err());
        let m = MarkSpace::new(vec![vec![1.0], vec![2.0]], vec![0.25, 0.75]).unwrap();
        assert!((m.total() - 1.0).abs() < 1e-15);
    }
}
