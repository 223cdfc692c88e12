//! Command orchestration: `validate`, `solve`, `iterate`, `verify`,
//! `report`. Each command loads a model file, runs its checks, writes CSV
//! and plain-text outputs to the output directory, prints one
//! machine-parsable `PASS <check>` / `FAIL <check> <detail>` line per check,
//! and exits 0 iff every invoked check passed.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{parse_config, ParsedConfig};
use crate::fixedpoint::{fixed_point_residual, picard_solve_cfg};
use crate::model::{
    check_no_free_loop, estimate_lipschitz, lipschitz_pairs, sample_cloud, validate_driver_growth,
    validate_static, DriverSpec,
};
use crate::montecarlo::{
    binomial_oracle, domination_check, dual_gap, moment_stability, pathwise_consistency,
    simulate_forward, StopRule,
};
use crate::solver::{residual_qvi, solve_double_cfg, solve_penalized_cfg};

const USAGE: &str = "usage: qvi <validate|solve|iterate|verify|report> --config <path> \
[--out <dir>] [--seed <u64>] [--n <int>] [--mode <penalized|double>] \
[--check <consistency|domination|moments|dualgap|oracle>]";

#[derive(Debug, Default)]
struct CliArgs {
    command: String,
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    n: Option<f64>,
    mode: Option<String>,
    check: Option<String>,
}

fn parse_args(args: &[String]) -> Result<CliArgs, String> {
    if args.is_empty() {
        return Err(USAGE.to_string());
    }
    let mut cli = CliArgs {
        command: args[0].clone(),
        out: PathBuf::from("qvi_out"),
        ..Default::default()
    };
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let value = args
            .get(i + 1)
            .ok_or_else(|| format!("flag {flag} needs a value\n{USAGE}"))?;
        match flag.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value)),
            "--out" => cli.out = PathBuf::from(value),
            "--seed" => {
                cli.seed = Some(
                    value
                        .parse()
                        .map_err(|_| format!("--seed expects an unsigned integer, got {value}"))?,
                )
            }
            "--n" => {
                cli.n = Some(
                    value
                        .parse()
                        .map_err(|_| format!("--n expects a number, got {value}"))?,
                )
            }
            "--mode" => cli.mode = Some(value.clone()),
            "--check" => cli.check = Some(value.clone()),
            other => return Err(format!("unknown flag {other}\n{USAGE}")),
        }
        i += 2;
    }
    Ok(cli)
}

struct Outcome {
    failures: usize,
    status_lines: Vec<String>,
}

impl Outcome {
    fn new() -> Outcome {
        Outcome {
            failures: 0,
            status_lines: Vec::new(),
        }
    }

    fn record(&mut self, check: &str, pass: bool, detail: &str) {
        if pass {
            println!("PASS {check}");
        } else {
            println!("FAIL {check} {detail}");
            self.failures += 1;
        }
        self.status_lines
            .push(format!("{} = {}", check, if pass { "pass" } else { "fail" }));
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn append_status(dir: &Path, lines: &[String]) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let path = dir.join("status.txt");
    let mut existing = fs::read_to_string(&path).unwrap_or_default();
    for l in lines {
        existing.push_str(l);
        existing.push('\n');
    }
    fs::write(&path, existing).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn load(cli: &CliArgs) -> Result<ParsedConfig, String> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| format!("--config is required\n{USAGE}"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("config error: {e}"))
}

/// Entry point used by the binary and by tests. Returns the exit status:
/// 0 when every invoked check passes, 1 on check failures, 2 on usage,
/// configuration or I/O errors.
pub fn run_args(args: &[String]) -> i32 {
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return 2;
        }
    };
    let result = match cli.command.as_str() {
        "validate" => cmd_validate(&cli),
        "solve" => cmd_solve(&cli),
        "iterate" => cmd_iterate(&cli),
        "verify" => cmd_verify(&cli),
        "report" => cmd_report(&cli),
        other => Err(format!("unknown command {other}\n{USAGE}")),
    };
    match result {
        Ok(0) => 0,
        Ok(_) => 1,
        Err(msg) => {
            eprintln!("{msg}");
            2
        }
    }
}

fn cmd_validate(cli: &CliArgs) -> Result<usize, String> {
    let parsed = load(cli)?;
    let seed = cli.seed.unwrap_or_else(|| {
        parsed.mc.as_ref().map(|m| m.seed).unwrap_or(0)
    });
    let v = &parsed.validate;
    let cloud = sample_cloud(&parsed.spec, v.radius, v.samples, seed);
    let driver = DriverSpec::local(parsed.f_tilde.clone());

    let mut report = validate_static(&parsed.spec, &cloud);
    report = report.merge(validate_driver_growth(&parsed.spec, &driver, &cloud));
    let pairs = lipschitz_pairs(&parsed.spec, v.radius, v.samples, seed);
    report = report.merge(estimate_lipschitz(&parsed.spec, &driver, &pairs));

    let mut outcome = Outcome::new();
    match check_no_free_loop(&parsed.spec, v.loop_t, &v.loop_starts, v.loop_depth) {
        Ok(loop_report) => report = report.merge(loop_report),
        Err(e) => outcome.record("no_free_loop", false, &format!("{e}")),
    }

    for check in &report.checks {
        let pass = check.status == crate::model::CheckStatus::Pass;
        let detail = check
            .witness
            .as_ref()
            .map(|w| w.detail.clone())
            .unwrap_or_default();
        outcome.record(&format!("validate.{}", check.name), pass, &detail);
    }

    write_file(&cli.out, "validate_report.txt", &report.to_key_values())?;
    write_file(&cli.out, "witnesses.csv", &report.witnesses_csv())?;
    append_status(&cli.out, &outcome.status_lines)?;
    Ok(outcome.failures)
}

fn cmd_solve(cli: &CliArgs) -> Result<usize, String> {
    let parsed = load(cli)?;
    let grid = parsed
        .grid
        .clone()
        .ok_or("solve requires a [grid] section")?;
    let mode = cli.mode.as_deref().unwrap_or("double");
    let driver = DriverSpec::local(parsed.f_tilde.clone());
    let mut outcome = Outcome::new();

    let (field, name) = match mode {
        "penalized" => {
            let n = cli.n.unwrap_or(parsed.solver.penalty_n);
            let cfg = parsed.solver.to_config(n, &grid, &parsed.spec);
            let field = solve_penalized_cfg(&parsed.spec, &grid, &cfg, &driver)
                .map_err(|e| format!("solve failed: {e}"))?;
            (field, format!("penalized_n{n}"))
        }
        "double" => {
            let cfg = parsed.solver.to_config(0.0, &grid, &parsed.spec);
            let field = solve_double_cfg(&parsed.spec, &grid, &cfg, &driver)
                .map_err(|e| format!("solve failed: {e}"))?;
            (field, "double".to_string())
        }
        other => return Err(format!("unknown mode {other}; use penalized or double")),
    };

    let residuals = residual_qvi(&field, &parsed.spec, &grid, &driver)
        .map_err(|e| format!("residual evaluation failed: {e}"))?;
    write_file(&cli.out, &format!("field_{name}.csv"), &field.to_csv())?;
    write_file(
        &cli.out,
        &format!("residuals_{name}.csv"),
        &residuals.to_csv(),
    )?;
    println!(
        "solve.{name}.sup_residual = {}",
        crate::fmt_f64(residuals.sup)
    );
    println!(
        "solve.{name}.growth_constant = {}",
        crate::fmt_f64(field.growth_constant(parsed.spec.growth_rho))
    );
    outcome.record(&format!("solve.{name}"), field.all_finite(), "field has non-finite values");
    append_status(&cli.out, &outcome.status_lines)?;
    Ok(outcome.failures)
}

fn cmd_iterate(cli: &CliArgs) -> Result<usize, String> {
    let parsed = load(cli)?;
    let grid = parsed
        .grid
        .clone()
        .ok_or("iterate requires a [grid] section")?;
    let picard = parsed.picard.ok_or("iterate requires a [picard] section")?;
    let driver = DriverSpec::with_intervention_term(parsed.f_tilde.clone(), picard.k_nl);
    let cfg = parsed.solver.to_config(0.0, &grid, &parsed.spec);
    let mut outcome = Outcome::new();

    match picard_solve_cfg(&parsed.spec, &grid, &driver, picard.tol, picard.kmax, &cfg) {
        Ok((field, mut trace)) => {
            let res = fixed_point_residual(&field, &parsed.spec, &grid, &driver)
                .map_err(|e| format!("fixed point residual failed: {e}"))?;
            trace.final_residual = Some(res);
            write_file(&cli.out, "picard_trace.csv", &trace.to_csv())?;
            write_file(&cli.out, "field_picard.csv", &field.to_csv())?;
            println!("iterate.iterations = {}", trace.entries.len());
            println!("iterate.fixed_point_residual = {}", crate::fmt_f64(res));
            outcome.record("iterate.converged", true, "");
            outcome.record(
                "iterate.fixed_point_residual",
                res <= 2.0 * picard.tol,
                &format!("residual {res} exceeds 2 tol"),
            );
        }
        Err(crate::fixedpoint::FixedPointError::NonConvergence {
            last_diff, trace, ..
        }) => {
            write_file(&cli.out, "picard_trace.csv", &trace.to_csv())?;
            outcome.record(
                "iterate.converged",
                false,
                &format!("last diff {last_diff} above tol after {} iterations", trace.entries.len()),
            );
        }
        Err(e) => return Err(format!("picard iteration failed: {e}")),
    }
    append_status(&cli.out, &outcome.status_lines)?;
    Ok(outcome.failures)
}

fn cmd_verify(cli: &CliArgs) -> Result<usize, String> {
    let parsed = load(cli)?;
    let check = cli
        .check
        .as_deref()
        .ok_or("verify requires --check <consistency|domination|moments|dualgap|oracle>")?;
    let mc = parsed
        .mc
        .clone()
        .ok_or("verify requires an [mc] section")?;
    let seed = cli.seed.unwrap_or(mc.seed);
    let mut outcome = Outcome::new();

    match check {
        "consistency" => {
            let grid = parsed
                .grid
                .clone()
                .ok_or("consistency check requires a [grid] section")?;
            let n = cli.n.unwrap_or(parsed.solver.penalty_n);
            let driver = DriverSpec::local(parsed.f_tilde.clone());
            let cfg = parsed.solver.to_config(n, &grid, &parsed.spec);
            let field = solve_penalized_cfg(&parsed.spec, &grid, &cfg, &driver)
                .map_err(|e| format!("solve failed: {e}"))?;
            let bundle = simulate_forward(
                &parsed.spec,
                mc.probe_t,
                &mc.probe_x,
                mc.dt_sim,
                mc.n_paths,
                seed,
            )
            .map_err(|e| format!("simulation failed: {e}"))?;
            let rule = match mc.stop_rule.as_str() {
                "fixed_t" => StopRule::FixedHorizon,
                _ => StopRule::HitObstacle { eps: mc.hit_eps },
            };
            let est = pathwise_consistency(&field, n, &parsed.spec, &driver, &bundle, rule)
                .map_err(|e| format!("estimator failed: {e}"))?;
            let probe = field.value_at(mc.probe_t, &mc.probe_x);
            let gap = (est.mean - probe).abs();
            let bound = 3.0 * est.std_error + mc.allowance;
            let mut csv = String::from("name,mean,stderr,n_paths,seed\n");
            csv.push_str(&est.csv_row("consistency_estimator"));
            csv.push_str(&format!(
                "solver_value,{},0,{},{}\n",
                crate::fmt_f64(probe),
                est.n_paths,
                seed
            ));
            csv.push_str(&format!(
                "excluded_fraction,{},0,{},{}\n",
                crate::fmt_f64(est.excluded_fraction),
                est.n_paths,
                seed
            ));
            write_file(&cli.out, "estimates_consistency.csv", &csv)?;
            outcome.record(
                "verify.consistency.coverage",
                gap <= bound,
                &format!("gap {gap} above 3 SE + allowance {bound}"),
            );
            outcome.record(
                "verify.consistency.exclusions",
                est.excluded_fraction <= 0.05,
                &format!("excluded fraction {}", est.excluded_fraction),
            );
        }
        "domination" => {
            if parsed.spec.dim != 1 {
                return Err("domination check requires a one-dimensional model".into());
            }
            let report = domination_check(
                &parsed.spec,
                mc.probe_t,
                mc.probe_x[0],
                mc.dt_sim,
                mc.n_paths,
                seed,
                mc.c_a_sigma,
            )
            .map_err(|e| format!("domination check failed: {e}"))?;
            write_file(&cli.out, "domination_violations.csv", &report.violations_csv())?;
            println!(
                "verify.domination.clamp_fraction = {}",
                crate::fmt_f64(report.clamp_fraction)
            );
            println!(
                "verify.domination.c_a_sigma = {}",
                crate::fmt_f64(report.c_a_sigma)
            );
            outcome.record(
                "verify.domination",
                report.passed(),
                &format!("{} violating paths", report.violations.len()),
            );
        }
        "moments" => {
            let stability = moment_stability(
                &parsed.spec,
                mc.probe_t,
                &mc.moment_starts,
                mc.moment_p,
                mc.dt_sim,
                mc.n_paths,
                seed,
            )
            .map_err(|e| format!("moment check failed: {e}"))?;
            let mut csv = String::from("name,mean,stderr,n_paths,seed\n");
            for (x, est, ratio) in &stability.rows {
                let label: Vec<String> = x.iter().map(|c| format!("{c}")).collect();
                csv.push_str(&format!(
                    "moment_x_{},{},{},{},{}\n",
                    label.join("_"),
                    crate::fmt_f64(*est),
                    crate::fmt_f64(*ratio),
                    mc.n_paths,
                    seed
                ));
            }
            write_file(&cli.out, "estimates_moments.csv", &csv)?;
            outcome.record(
                "verify.moments",
                stability.within_factor(3.0),
                &format!("ratio spread factor {}", stability.factor),
            );
        }
        "dualgap" => {
            let grid = parsed
                .grid
                .clone()
                .ok_or("dualgap check requires a [grid] section")?;
            let driver = DriverSpec::local(parsed.f_tilde.clone());
            let table = dual_gap(
                &parsed.spec,
                &grid,
                &driver,
                &mc.dual_ns,
                mc.probe_t,
                &mc.probe_x,
            )
            .map_err(|e| format!("dual gap failed: {e}"))?;
            write_file(&cli.out, "dualgap.csv", &table.to_csv())?;
            outcome.record(
                "verify.dualgap.monotone",
                table.non_increasing(1e-8),
                "penalized values are not non-increasing in n",
            );
            // the two discretizations differ by an O(dt) splitting bias near
            // binding regions, so the lower bound carries the same allowance
            // as the final-gap criterion
            outcome.record(
                "verify.dualgap.bounded",
                table.bounded_below_by_double(1e-2),
                "penalized values fell below the double-obstacle value by more than 1e-2",
            );
        }
        "oracle" => {
            let grid = parsed
                .grid
                .clone()
                .ok_or("oracle check requires a [grid] section")?;
            let driver = DriverSpec::local(parsed.f_tilde.clone());
            let cfg = parsed.solver.to_config(0.0, &grid, &parsed.spec);
            let field = solve_penalized_cfg(&parsed.spec, &grid, &cfg, &driver)
                .map_err(|e| format!("solve failed: {e}"))?;
            let solver_value = field.value_at(mc.probe_t, &mc.probe_x);
            let oracle = binomial_oracle(
                mc.oracle_rate,
                mc.oracle_vol,
                mc.oracle_strike,
                parsed.spec.horizon,
                mc.oracle_steps,
            );
            let gap = (solver_value - oracle).abs();
            let mut csv = String::from("name,mean,stderr,n_paths,seed\n");
            csv.push_str(&format!(
                "solver_value,{},0,1,{seed}\nbinomial_oracle,{},0,1,{seed}\n",
                crate::fmt_f64(solver_value),
                crate::fmt_f64(oracle)
            ));
            write_file(&cli.out, "estimates_oracle.csv", &csv)?;
            outcome.record(
                "verify.oracle",
                gap <= mc.oracle_tol,
                &format!("|solver - oracle| = {gap} above {}", mc.oracle_tol),
            );
        }
        other => {
            return Err(format!(
                "unknown check {other}; use consistency, domination, moments, dualgap or oracle"
            ))
        }
    }
    append_status(&cli.out, &outcome.status_lines)?;
    Ok(outcome.failures)
}

fn cmd_report(cli: &CliArgs) -> Result<usize, String> {
    let dir = &cli.out;
    let mut out = String::new();
    let status_path = dir.join("status.txt");
    let mut failures = 0usize;
    if let Ok(status) = fs::read_to_string(&status_path) {
        for line in status.lines() {
            out.push_str(line);
            out.push('\n');
            if line.trim_end().ends_with("= fail") {
                failures += 1;
            }
        }
    }
    // summarize any CSV artifacts present
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| format!("cannot read {}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    entries.sort();
    for path in entries {
        if let Ok(text) = fs::read_to_string(&path) {
            let rows = text.lines().count().saturating_sub(1);
            out.push_str(&format!(
                "{}.rows = {rows}\n",
                path.file_stem().unwrap_or_default().to_string_lossy()
            ));
        }
    }
    out.push_str(&format!(
        "overall = {}\n",
        if failures == 0 { "pass" } else { "fail" }
    ));
    write_file(dir, "report.txt", &out)?;
    print!("{out}");
    Ok(failures)
}
