use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use rgflow::homotopy::{external_parameter_sweep, oracle_compare, sensitivity, solve_flow};
use rgflow::{solve_quadratic_bvp, FlowSpec, QuadraticSolution};

use crate::config::{scale_sequence, RunConfig, SweepKind};
use crate::output::{to_value, trajectory_csv, Artifacts, Cell, Table};
use crate::CliError;

/// Outcome of a subcommand that ran to completion.
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
}

#[derive(Serialize)]
pub struct Certificate {
    pub name: &'static str,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

fn cert(name: &'static str, value: f64, bound: f64) -> Certificate {
    Certificate {
        name,
        value,
        bound,
        pass: value <= bound,
    }
}

/// `gbar_J (1/g0 + sum_{j<J} beta_j)`; close to one whenever the leading
/// asymptotics hold.
fn asymptotic_ratio(sol: &QuadraticSolution, cfg: &RunConfig) -> f64 {
    let sum: f64 = (0..sol.horizon).map(|j| cfg.params.beta.at(j)).sum();
    sol.vbar[sol.horizon].g * (1.0 / sol.g0 + sum)
}

pub fn quadratic_certificates(sol: &QuadraticSolution, cfg: &RunConfig) -> Vec<Certificate> {
    let mut out = vec![
        cert("forward-residual", sol.forward_residual, 1e-10),
        cert("expansivity", sol.alpha, 0.75),
        cert("asymptotic-ratio", (asymptotic_ratio(sol, cfg) - 1.0).abs(), 0.2),
    ];
    if let Some(t) = sol.tail_certificate {
        out.push(cert("tail", t, cfg.quadratic.tol));
    }
    out
}

fn summary_without(x: &impl Serialize, drop: &[&str]) -> Result<Value, CliError> {
    let mut v = to_value(x)?;
    if let Value::Object(m) = &mut v {
        for k in drop {
            m.remove(*k);
        }
    }
    Ok(v)
}

pub fn cmd_quadratic(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let g0 = cfg.require_g0()?;
    let sol = solve_quadratic_bvp(g0, &cfg.params, &cfg.quadratic)?;
    let certs = quadratic_certificates(&sol, cfg);
    let pass = certs.iter().all(|c| c.pass);
    let mut csv = Vec::new();
    sol.write_csv(&mut csv)?;
    let mut art = Artifacts::new(&cfg.output.dir);
    art.add("quadratic.csv", csv);
    art.add_json(
        "quadratic.json",
        "quadratic",
        cfg.seed,
        json!({
            "config": to_value(cfg)?,
            "solution": summary_without(&sol, &["vbar", "chi"])?,
            "certificates": to_value(&certs)?,
            "pass": pass,
        }),
    )?;
    art.commit()?;
    Ok(Outcome {
        pass,
        summary: format!("quadratic: horizon {}, z0 {:e}, mu0 {:e}", sol.horizon, sol.vbar[0].z, sol.vbar[0].mu),
    })
}

pub fn cmd_flow(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let g0 = cfg.require_g0()?;
    let spec = cfg.flow_spec()?;
    let (p, r) = solve_flow(&spec, g0)?;
    let certs = vec![
        Certificate {
            name: "ball",
            value: r.ball.k.max(r.ball.g).max(r.ball.z).max(r.ball.mu),
            bound: r.b,
            pass: r.ball_pass,
        },
        cert("flow-residual", r.flow_residual, r.residual_tol),
    ];
    let pass = r.pass();
    let mut art = Artifacts::new(&cfg.output.dir);
    art.add("flow.csv", trajectory_csv(&r.x_final, &p.quad.chi)?);
    art.add_json(
        "flow.json",
        "flow",
        cfg.seed,
        json!({
            "config": to_value(cfg)?,
            "horizon": p.horizon(),
            "z0": r.x_final.v[0].z,
            "mu0": r.x_final.v[0].mu,
            "result": summary_without(&r, &["x_final"])?,
            "certificates": to_value(&certs)?,
            "pass": pass,
        }),
    )?;
    art.commit()?;
    Ok(Outcome {
        pass,
        summary: format!(
            "flow: ball {}, residual {:e} (tol {:e})",
            if r.ball_pass { "ok" } else { "violated" },
            r.flow_residual,
            r.residual_tol
        ),
    })
}

pub fn cmd_oracle(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let g0 = cfg.require_g0()?;
    let p = cfg.flow_spec()?.problem(g0)?;
    let o = cfg.oracle;
    let gaps = oracle_compare(&p, o.shooting_tol, o.sweep_tol, o.max_sweeps)?;
    let max_gap = gaps.max_gap();
    let pass = max_gap <= o.gap_tol;
    let mut art = Artifacts::new(&cfg.output.dir);
    art.add_json(
        "oracle.json",
        "oracle-compare",
        cfg.seed,
        json!({
            "config": to_value(cfg)?,
            "horizon": p.horizon(),
            "gaps": to_value(&gaps)?,
            "max_gap": max_gap,
            "gap_tol": o.gap_tol,
            "pass": pass,
        }),
    )?;
    art.commit()?;
    Ok(Outcome {
        pass,
        summary: format!("oracle-compare: max gap {max_gap:e} (tol {:e})", o.gap_tol),
    })
}

#[derive(Serialize)]
struct G0Point {
    g0: f64,
    ok: bool,
    error: Option<String>,
    horizon: Option<usize>,
    z0: Option<f64>,
    mu0: Option<f64>,
    ball_pass: Option<bool>,
    flow_residual: Option<f64>,
    dz0_dg0: Option<f64>,
    dmu0_dg0: Option<f64>,
}

fn g0_point(spec: &FlowSpec, g0: f64, cfg: &RunConfig) -> G0Point {
    let mut pt = G0Point {
        g0,
        ok: false,
        error: None,
        horizon: None,
        z0: None,
        mu0: None,
        ball_pass: None,
        flow_residual: None,
        dz0_dg0: None,
        dmu0_dg0: None,
    };
    match solve_flow(spec, g0) {
        Ok((p, r)) => {
            pt.horizon = Some(p.horizon());
            pt.z0 = Some(r.x_final.v[0].z);
            pt.mu0 = Some(r.x_final.v[0].mu);
            pt.ball_pass = Some(r.ball_pass);
            pt.flow_residual = Some(r.flow_residual);
            pt.ok = r.pass();
            if !pt.ok {
                pt.error = Some("certificate failed".into());
            }
        }
        Err(e) => {
            pt.error = Some(e.to_string());
            return pt;
        }
    }
    if cfg.sweep.derivatives {
        match sensitivity(spec, g0, cfg.sweep.dg0_fraction * g0) {
            Ok(s) => {
                pt.dz0_dg0 = Some(s.richardson_dz);
                pt.dmu0_dg0 = Some(s.richardson_dmu);
            }
            Err(e) => {
                pt.ok = false;
                pt.error = Some(format!("sensitivity: {e}"));
            }
        }
    }
    pt
}

/// Least-squares slope of `y` against `x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Uniform bounds and trend of `|d|` over the successful points, ordered by
/// decreasing `g0`. The trend is the slope against `log2(1/g0)` over the
/// three smallest couplings.
fn derivative_fit(points: &[G0Point]) -> Value {
    let mut good: Vec<(f64, f64, f64)> = points
        .iter()
        .filter_map(|p| Some((p.g0, p.dz0_dg0?.abs(), p.dmu0_dg0?.abs())))
        .collect();
    if good.len() < 2 {
        return Value::Null;
    }
    good.sort_by(|a, b| b.0.total_cmp(&a.0));
    let stats = |ys: Vec<f64>| {
        let hi = ys.iter().cloned().fold(0.0, f64::max);
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let tail = ys.len().saturating_sub(3);
        let xs: Vec<f64> = good[tail..].iter().map(|p| (1.0 / p.0).log2()).collect();
        let s = slope(&xs, &ys[tail..]);
        json!({ "uniform_bound": hi, "min": lo, "spread": (hi - lo) / hi, "tail_slope": s })
    };
    json!({
        "dz0_dg0": stats(good.iter().map(|p| p.1).collect()),
        "dmu0_dg0": stats(good.iter().map(|p| p.2).collect()),
    })
}

fn opt(x: Option<f64>) -> Cell {
    x.map(Cell::Float).unwrap_or(Cell::Empty)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cfg.sweep.kind {
        SweepKind::G0 => sweep_g0(cfg),
        SweepKind::BetaScale => sweep_beta(cfg),
    }
}

fn finish_sweep(cfg: &RunConfig, csv: Vec<u8>, total: usize, ok: usize, extra: Value) -> Result<Outcome, CliError> {
    let fraction = ok as f64 / total as f64;
    let pass = fraction >= cfg.sweep.min_success_fraction;
    let mut art = Artifacts::new(&cfg.output.dir);
    art.add("sweep.csv", csv);
    art.add_json(
        "sweep.json",
        "sweep",
        cfg.seed,
        json!({
            "config": to_value(cfg)?,
            "points": total,
            "succeeded": ok,
            "success_fraction": fraction,
            "min_success_fraction": cfg.sweep.min_success_fraction,
            "summary": extra,
            "pass": pass,
        }),
    )?;
    art.commit()?;
    Ok(Outcome {
        pass,
        summary: format!("sweep: {ok}/{total} points succeeded"),
    })
}

fn sweep_g0(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let grid = &cfg.sweep.g0_grid;
    if grid.is_empty() {
        return Err(CliError::Config("sweep.g0_grid is empty".into()));
    }
    let spec = cfg.flow_spec()?;
    let points: Vec<G0Point> = grid.par_iter().map(|&g0| g0_point(&spec, g0, cfg)).collect();
    let mut t = Table::new(&[
        "g0",
        "ok",
        "horizon",
        "z0",
        "mu0",
        "ball_pass",
        "flow_residual",
        "dz0_dg0",
        "dmu0_dg0",
        "error",
    ])?;
    for p in &points {
        t.row(vec![
            Cell::Float(p.g0),
            Cell::Bool(p.ok),
            p.horizon.map(Cell::Int).unwrap_or(Cell::Empty),
            opt(p.z0),
            opt(p.mu0),
            p.ball_pass.map(Cell::Bool).unwrap_or(Cell::Empty),
            opt(p.flow_residual),
            opt(p.dz0_dg0),
            opt(p.dmu0_dg0),
            Cell::Text(p.error.clone().unwrap_or_default()),
        ])?;
    }
    let ok = points.iter().filter(|p| p.ok).count();
    let extra = json!({
        "kind": "g0",
        "derivative_fit": derivative_fit(&points),
        "rows": to_value(&points)?,
    });
    finish_sweep(cfg, t.finish()?, points.len(), ok, extra)
}

fn sweep_beta(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let grid = &cfg.sweep.m_grid;
    if grid.is_empty() {
        return Err(CliError::Config("sweep.m_grid is empty".into()));
    }
    let g0 = cfg.require_g0()?;
    let family = |m: f64| {
        let mut params = cfg.params.clone();
        params.beta = scale_sequence(&params.beta, m);
        cfg.flow_spec_for(params)
    };
    let rep = external_parameter_sweep(&family, grid, g0, cfg.sweep.j_report)?;
    let mut t = Table::new(&["m", "ok", "horizon", "z_report", "mu_report", "error"])?;
    for p in &rep.points {
        t.row(vec![
            Cell::Float(p.m),
            Cell::Bool(p.ok),
            p.horizon.map(Cell::Int).unwrap_or(Cell::Empty),
            opt(p.z0),
            opt(p.mu0),
            Cell::Text(p.error.clone().unwrap_or_default()),
        ])?;
    }
    let ok = rep.points.iter().filter(|p| p.ok).count();
    let extra = json!({
        "kind": "beta-scale",
        "continuity": to_value(&rep)?,
    });
    finish_sweep(cfg, t.finish()?, rep.points.len(), ok, extra)
}
