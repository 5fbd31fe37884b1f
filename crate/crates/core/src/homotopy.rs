//! Continuation from the approximate flow to the perturbed flow.
//!
//! The perturbed flow is reached by integrating `x' = S(t, x) rho(x)` from
//! `t = 0`, where `x = xbar` solves the unperturbed problem, to `t = 1`.
//! Shooting and Gauss-Seidel sweeps solve the same truncated boundary-value
//! problem by other means and serve as cross-checks.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::solve2;
use crate::linear::{apply_s, build_l, build_w, check_ball, operator_norm_estimate, BlockMatrices, SolveReport};
use crate::model::{phi_jacobian, phi_step, xbar_assemble, DomainSpec, PerturbationModel};
use crate::params::{cutoff_time, CutoffData, ParamSeq};
use crate::quadratic::{QuadraticOptions, QuadraticSolution, VTriple};
use crate::spaces::{component_ratios, weighted_norm, Component, ComponentRatios, FlowSequence, Which, WeightScheme};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Integrator {
    Rk4Fixed { steps: usize },
    Rk45Adaptive { rel: f64, abs: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomotopyConfig {
    pub integrator: Integrator,
    /// Absolute `w`-norm tolerance of the inner fixed-point solve.
    pub fixed_point_tol: f64,
    pub max_iter: usize,
    /// Radius of the `w`-ball around the reference that every accepted state
    /// must stay in.
    pub ball_radius: f64,
    pub check_ball: bool,
    pub initial_step: f64,
    pub min_step: f64,
    /// Target for the `v`-weighted flow residual at `t = 1`.
    pub residual_tol: f64,
    /// Newton corrections applied after integration while the residual is
    /// above `residual_tol`.
    pub polish_steps: usize,
}

impl Default for HomotopyConfig {
    fn default() -> Self {
        HomotopyConfig {
            integrator: Integrator::Rk45Adaptive { rel: 1e-9, abs: 1e-11 },
            fixed_point_tol: 1e-13,
            max_iter: 200,
            ball_radius: 0.5,
            check_ball: true,
            initial_step: 0.05,
            min_step: 1e-8,
            residual_tol: 1e-9,
            polish_steps: 3,
        }
    }
}

impl HomotopyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FlowError::InvalidInput(m.to_string()));
        match self.integrator {
            Integrator::Rk4Fixed { steps } if steps < 4 => return bad("integrator.steps must be at least 4"),
            Integrator::Rk45Adaptive { rel, abs } if !(rel > 0.0 && abs > 0.0) => {
                return bad("integrator.rel and integrator.abs must be positive")
            }
            _ => {}
        }
        if !(self.fixed_point_tol > 0.0) || self.max_iter == 0 {
            return bad("fixed_point_tol and max_iter must be positive");
        }
        if !(self.ball_radius > 0.0) || !(self.initial_step > 0.0) || !(self.min_step > 0.0) {
            return bad("ball_radius, initial_step and min_step must be positive");
        }
        if !(self.residual_tol > 0.0) {
            return bad("residual_tol must be positive");
        }
        Ok(())
    }
}

/// Everything needed to set up a flow problem at a given `g0`.
#[derive(Clone)]
pub struct FlowSpec {
    pub params: ParamSeq,
    pub model: Arc<dyn PerturbationModel>,
    pub k0: Vec<f64>,
    pub a: f64,
    pub a_star: f64,
    pub h: f64,
    /// Fraction of the domain radii the final flow is required to stay in.
    pub b: f64,
    pub quad: QuadraticOptions,
    pub homotopy: HomotopyConfig,
}

impl FlowSpec {
    pub fn new(params: ParamSeq, model: Arc<dyn PerturbationModel>) -> Self {
        let k0 = vec![0.0; model.d_k(0)];
        FlowSpec {
            params,
            model,
            k0,
            a: 1.0,
            a_star: 0.5,
            h: 1.0,
            b: 0.9,
            quad: QuadraticOptions::default(),
            homotopy: HomotopyConfig::default(),
        }
    }

    pub fn problem(&self, g0: f64) -> Result<FlowProblem> {
        self.problem_with_reference(g0, g0)
    }

    /// Set up the problem at `g0` with weights and linearisation taken
    /// around the approximate flow started at `gring0`.
    pub fn problem_with_reference(&self, g0: f64, gring0: f64) -> Result<FlowProblem> {
        self.homotopy.validate()?;
        let cutoff = cutoff_time(&self.params)?;
        let (quad, xbar) = xbar_assemble(&self.k0, g0, &self.params, self.model.as_ref(), self.a_star, &self.quad)?;
        let horizon = quad.horizon;
        let xring = if gring0 == g0 {
            xbar.clone()
        } else {
            let opts = QuadraticOptions {
                horizon: Some(horizon),
                ..self.quad
            };
            xbar_assemble(&self.k0, gring0, &self.params, self.model.as_ref(), self.a_star, &opts)?.1
        };
        let gring: Vec<f64> = xring.v.iter().map(|v| v.g).collect();
        let scheme = WeightScheme::new(self.a, self.a_star, self.h, gring, &cutoff)?;
        let theorem_scheme = WeightScheme::new(self.a, self.a_star, self.h, quad.gbar(), &cutoff)?;
        let dom = DomainSpec::new(&quad, &cutoff, self.a, self.h);
        let blocks = build_l(&xring, &self.params)?;
        Ok(FlowProblem {
            params: self.params.clone(),
            model: self.model.clone(),
            g0,
            gring0,
            cutoff,
            quad,
            xbar,
            xring,
            scheme,
            theorem_scheme,
            dom,
            blocks,
            b: self.b,
            config: self.homotopy,
        })
    }
}

/// A fully assembled truncated boundary-value problem.
#[derive(Clone)]
pub struct FlowProblem {
    pub params: ParamSeq,
    pub model: Arc<dyn PerturbationModel>,
    pub g0: f64,
    pub gring0: f64,
    pub cutoff: CutoffData,
    pub quad: QuadraticSolution,
    pub xbar: FlowSequence,
    pub xring: FlowSequence,
    /// Weights around the reference `xring`.
    pub scheme: WeightScheme,
    /// Weights around `xbar`, used for the final ball clauses.
    pub theorem_scheme: WeightScheme,
    pub dom: DomainSpec,
    pub blocks: BlockMatrices,
    pub b: f64,
    pub config: HomotopyConfig,
}

impl FlowProblem {
    pub fn horizon(&self) -> usize {
        self.xbar.horizon()
    }

    /// Forcing with entry `j + 1` equal to `rho_j(x_j)`.
    pub fn rho_forcing(&self, x: &FlowSequence) -> FlowSequence {
        let mut r = x.zeros_like();
        for j in 0..x.horizon() {
            r.v[j + 1] = self.model.rho(j, &x.k[j], x.v[j]);
        }
        r
    }

    /// `F(t, x) = S(t, x) rho(x)`.
    pub fn f_eval(&self, t: f64, x: &FlowSequence) -> Result<(FlowSequence, SolveReport)> {
        let r = self.rho_forcing(x);
        let ball = self.config.check_ball.then_some(self.config.ball_radius);
        let w = build_w(t, x, self.model.as_ref(), &self.params, &self.xring, &self.dom, &self.scheme, ball)?;
        apply_s(&r, &self.blocks, &w, &self.scheme, self.config.fixed_point_tol, self.config.max_iter)
    }

    /// Defect `Phi^t_j(x_j) - x_{j+1}` placed at entry `j + 1`.
    pub fn defect(&self, t: f64, x: &FlowSequence) -> FlowSequence {
        let mut d = x.zeros_like();
        for j in 0..x.horizon() {
            let (k, v) = phi_step(t, &x.k[j], x.v[j], j, &self.params, self.model.as_ref());
            for (o, (a, b)) in d.k[j + 1].iter_mut().zip(k.iter().zip(&x.k[j + 1])) {
                *o = a - b;
            }
            let n = x.v[j + 1];
            d.v[j + 1] = VTriple::new(v.g - n.g, v.z - n.z, v.mu - n.mu);
        }
        d
    }

    /// `v`-weighted size of the defect at `t = 1`.
    pub fn flow_residual(&self, x: &FlowSequence) -> Result<f64> {
        weighted_norm(&self.defect(1.0, x), &self.scheme, Which::V)
    }

    /// One Newton correction `x += S(1, x) defect(x)`.
    pub fn newton_step(&self, x: &FlowSequence) -> Result<(FlowSequence, SolveReport)> {
        let r = self.defect(1.0, x);
        let w = build_w(1.0, x, self.model.as_ref(), &self.params, &self.xring, &self.dom, &self.scheme, None)?;
        let (dx, rep) = apply_s(&r, &self.blocks, &w, &self.scheme, self.config.fixed_point_tol, self.config.max_iter)?;
        let mut out = x.clone();
        out.axpy(1.0, &dx);
        Ok((out, rep))
    }
}

/// Randomised lower bound for the norm of `S(t, x)` from the `v`-space to
/// the `w`-space.
pub fn operator_norm_s(p: &FlowProblem, t: f64, x: &FlowSequence, probes: usize, seed: u64) -> Result<f64> {
    let w = build_w(t, x, p.model.as_ref(), &p.params, &p.xring, &p.dom, &p.scheme, None)?;
    let op = |r: &FlowSequence| {
        apply_s(r, &p.blocks, &w, &p.scheme, p.config.fixed_point_tol, p.config.max_iter).map(|s| s.0)
    };
    operator_norm_estimate(&op, &x.dims(), &p.scheme, Which::V, Which::W, probes, seed)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    pub f_evals: usize,
    pub fixed_point_iterations: usize,
    pub max_contraction: f64,
    /// Largest `||x(t) - xring||_w` over accepted states.
    pub max_path_ratio: f64,
    pub t_final: f64,
}

impl IntegratorStats {
    fn record(&mut self, rep: &SolveReport) {
        self.f_evals += 1;
        self.fixed_point_iterations += rep.iterations;
        self.max_contraction = self.max_contraction.max(rep.contraction);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub x_final: FlowSequence,
    /// Per-clause maxima of `|x - xbar|` over the domain radii scaled by the
    /// theorem weights.
    pub ball: ComponentRatios,
    pub b: f64,
    pub ball_pass: bool,
    pub flow_residual: f64,
    /// Residual straight out of the integrator, before Newton polishing.
    pub integrator_residual: f64,
    pub polish_steps: usize,
    pub residual_tol: f64,
    pub residual_pass: bool,
    /// `|z_J|` and `|mu_J|` at the horizon.
    pub tail_z: f64,
    pub tail_mu: f64,
    pub stats: IntegratorStats,
}

impl FlowResult {
    pub fn pass(&self) -> bool {
        self.ball_pass && self.residual_pass
    }
}

fn to_ball_exit(e: FlowError, t: f64) -> FlowError {
    match e {
        FlowError::Domain { index, clause, ratio } => FlowError::BallExit { t, index, clause, ratio },
        e => e,
    }
}

fn path_check(p: &FlowProblem, x: &FlowSequence, t: f64, stats: &mut IntegratorStats) -> Result<()> {
    let r = weighted_norm(&x.sub(&p.xring), &p.scheme, Which::W)?;
    stats.max_path_ratio = stats.max_path_ratio.max(r);
    if p.config.check_ball {
        check_ball(x, &p.xring, &p.scheme, p.config.ball_radius).map_err(|e| to_ball_exit(e, t))?;
    }
    Ok(())
}

fn combo(x: &FlowSequence, h: f64, ks: &[&FlowSequence], coef: &[f64]) -> FlowSequence {
    let mut out = x.clone();
    for (k, c) in ks.iter().zip(coef) {
        if *c != 0.0 {
            out.axpy(h * c, k);
        }
    }
    out
}

fn rk4(p: &FlowProblem, x0: &FlowSequence, t0: f64, t1: f64, steps: usize, stats: &mut IntegratorStats) -> Result<FlowSequence> {
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let mut eval = |t: f64, y: &FlowSequence| -> Result<FlowSequence> {
            let (f, rep) = p.f_eval(t, y).map_err(|e| to_ball_exit(e, t))?;
            stats.record(&rep);
            Ok(f)
        };
        let k1 = eval(t, &x)?;
        let k2 = eval(t + h / 2.0, &combo(&x, h, &[&k1], &[0.5]))?;
        let k3 = eval(t + h / 2.0, &combo(&x, h, &[&k2], &[0.5]))?;
        let k4 = eval(t + h, &combo(&x, h, &[&k3], &[1.0]))?;
        x = combo(&x, h, &[&k1, &k2, &k3, &k4], &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]);
        stats.accepted += 1;
        path_check(p, &x, t + h, stats)?;
    }
    stats.t_final = t1;
    Ok(x)
}

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn rk45(
    p: &FlowProblem,
    x0: &FlowSequence,
    t0: f64,
    t1: f64,
    rel: f64,
    abs: f64,
    stats: &mut IntegratorStats,
) -> Result<FlowSequence> {
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut x = x0.clone();
    let mut h = p.config.initial_step.min(span);
    let mut first: Option<FlowSequence> = None;
    let mut steps = 0usize;
    while (t1 - t) * dir > 1e-15 * span.max(1.0) {
        steps += 1;
        if steps > 100_000 {
            return Err(FlowError::StepFloor { t, h });
        }
        h = h.min((t1 - t) * dir);
        let hs = h * dir;
        let attempt = (|| -> Result<(FlowSequence, FlowSequence, f64)> {
            let mut ks: Vec<FlowSequence> = Vec::with_capacity(7);
            let k1 = match &first {
                Some(k) => k.clone(),
                None => {
                    let (f, rep) = p.f_eval(t, &x)?;
                    stats.record(&rep);
                    f
                }
            };
            ks.push(k1);
            for s in 1..7 {
                let refs: Vec<&FlowSequence> = ks.iter().collect();
                let y = combo(&x, hs, &refs, &DP_A[s][..s]);
                let (f, rep) = p.f_eval(t + DP_C[s] * hs, &y)?;
                stats.record(&rep);
                ks.push(f);
            }
            let refs: Vec<&FlowSequence> = ks.iter().collect();
            let x_new = combo(&x, hs, &refs[..6], &DP_A[6]);
            let err_seq = combo(&x.zeros_like(), hs, &refs, &DP_E);
            let e = weighted_norm(&err_seq, &p.scheme, Which::W)?;
            let size = weighted_norm(&x, &p.scheme, Which::W)?.max(weighted_norm(&x_new, &p.scheme, Which::W)?);
            let err = e / (abs + rel * size);
            Ok((x_new, ks.pop().expect("seven stages"), err))
        })();
        match attempt {
            Ok((x_new, k_last, err)) if err <= 1.0 => {
                let tn = t + hs;
                path_check(p, &x_new, tn, stats)?;
                t = tn;
                x = x_new;
                first = Some(k_last);
                stats.accepted += 1;
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                h *= fac;
            }
            Ok((_, _, err)) => {
                stats.rejected += 1;
                h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                if h < p.config.min_step {
                    return Err(FlowError::StepFloor { t, h });
                }
            }
            Err(e @ (FlowError::Domain { .. } | FlowError::NoContraction { .. })) => {
                stats.rejected += 1;
                h *= 0.25;
                if h < p.config.min_step {
                    return Err(to_ball_exit(e, t));
                }
            }
            Err(e) => return Err(e),
        }
    }
    stats.t_final = t1;
    Ok(x)
}

/// Integrate the homotopy ODE between two times starting from `x0`.
pub fn integrate_between(p: &FlowProblem, x0: &FlowSequence, t0: f64, t1: f64) -> Result<(FlowSequence, IntegratorStats)> {
    let mut stats = IntegratorStats::default();
    path_check(p, x0, t0, &mut stats)?;
    let x = match p.config.integrator {
        Integrator::Rk4Fixed { steps } => rk4(p, x0, t0, t1, steps, &mut stats)?,
        Integrator::Rk45Adaptive { rel, abs } => rk45(p, x0, t0, t1, rel, abs, &mut stats)?,
    };
    Ok((x, stats))
}

/// Integrate from the approximate flow at `t = 0` to `t = 1`, then polish
/// with Newton corrections and report the final certificates.
pub fn integrate_homotopy(p: &FlowProblem) -> Result<FlowResult> {
    let (mut x, stats) = integrate_between(p, &p.xbar, 0.0, 1.0)?;
    let integrator_residual = p.flow_residual(&x)?;
    let mut residual = integrator_residual;
    let mut polish_steps = 0;
    while residual > p.config.residual_tol && polish_steps < p.config.polish_steps {
        x = p.newton_step(&x)?.0;
        polish_steps += 1;
        residual = p.flow_residual(&x)?;
    }
    if p.config.check_ball {
        check_ball(&x, &p.xring, &p.scheme, p.config.ball_radius).map_err(|e| to_ball_exit(e, 1.0))?;
    }
    let ball = component_ratios(&x.sub(&p.xbar), &p.theorem_scheme, Which::W)?;
    let n = x.horizon();
    Ok(FlowResult {
        ball_pass: ball.max() <= p.b,
        ball,
        b: p.b,
        flow_residual: residual,
        integrator_residual,
        polish_steps,
        residual_tol: p.config.residual_tol,
        residual_pass: residual <= p.config.residual_tol,
        tail_z: x.v[n].z.abs(),
        tail_mu: x.v[n].mu.abs(),
        x_final: x,
        stats,
    })
}

/// Forward iteration of `Phi^1` from `(K0, g0, z0, mu0)` for `steps` steps.
pub fn forward_orbit(p: &FlowProblem, z0: f64, mu0: f64, steps: usize) -> FlowSequence {
    let mut x = p.xbar.truncated(steps);
    x.v[0].z = z0;
    x.v[0].mu = mu0;
    for j in 0..steps {
        let (k, v) = phi_step(1.0, &x.k[j], x.v[j], j, &p.params, p.model.as_ref());
        x.k[j + 1] = k;
        x.v[j + 1] = v;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShootingResult {
    pub z0: f64,
    pub mu0: f64,
    pub iterations: usize,
    /// `max(|z_J - target_z|, |mu_J - target_mu|)` at the root.
    pub residual: f64,
    pub trajectory: FlowSequence,
}

/// Largest `log(amplification)` the shooting oracle accepts; matches 60
/// steps at `lambda = 1.5`.
pub fn shooting_budget() -> f64 {
    60.0 * 1.5f64.ln()
}

/// Newton on `(z0, mu0) -> (z_J, mu_J)` targeting the approximate flow's
/// values at `J = steps`.
pub fn shooting_solve(p: &FlowProblem, steps: usize, tol: f64, guess: Option<(f64, f64)>) -> Result<ShootingResult> {
    if steps == 0 || steps > p.horizon() {
        return Err(FlowError::InvalidInput(format!(
            "shooting horizon {steps} must lie in 1..={}",
            p.horizon()
        )));
    }
    let lam = (0..steps).map(|j| p.params.lambda.at(j).abs()).fold(1.0, f64::max);
    if steps as f64 * lam.ln() > shooting_budget() {
        return Err(FlowError::InvalidInput(format!(
            "shooting over {steps} steps amplifies by {lam}^{steps}; use fewer steps or the sweep solver"
        )));
    }
    let mut root = guess.unwrap_or((p.xbar.v[0].z, p.xbar.v[0].mu));
    let mut iterations = 0;
    let mut residual;
    let mut stage = if guess.is_some() { steps } else { SHOOTING_STAGE.min(steps) };
    loop {
        let (r, it, res) = shooting_newton(p, stage, tol, root)?;
        root = r;
        iterations += it;
        residual = res;
        if stage == steps {
            break;
        }
        stage = (stage + SHOOTING_STAGE).min(steps);
    }
    Ok(ShootingResult {
        z0: root.0,
        mu0: root.1,
        iterations,
        residual,
        trajectory: forward_orbit(p, root.0, root.1, steps),
    })
}

/// Horizon increment used when shooting without an initial guess: each
/// stage starts from the previous stage's root.
const SHOOTING_STAGE: usize = 10;

fn shooting_newton(p: &FlowProblem, steps: usize, tol: f64, start: (f64, f64)) -> Result<((f64, f64), usize, f64)> {
    let target = p.xbar.v[steps];
    let (mut z, mut mu) = start;
    let r0 = p.dom.radii(0);
    let rj = p.dom.radii(steps);
    let (dz, dmu) = (1e-6 * r0[2], 1e-6 * r0[3]);
    let miss = |z: f64, mu: f64| {
        let x = forward_orbit(p, z, mu, steps);
        [x.v[steps].z - target.z, x.v[steps].mu - target.mu]
    };
    let size = |f: [f64; 2]| {
        let s = (f[0] / rj[2]).abs().max((f[1] / rj[3]).abs());
        if s.is_nan() {
            f64::INFINITY
        } else {
            s
        }
    };
    let mut f = miss(z, mu);
    for it in 1..=50 {
        let fzp = miss(z + dz, mu);
        let fzm = miss(z - dz, mu);
        let fmp = miss(z, mu + dmu);
        let fmm = miss(z, mu - dmu);
        let jac = [
            [(fzp[0] - fzm[0]) / (2.0 * dz), (fmp[0] - fmm[0]) / (2.0 * dmu)],
            [(fzp[1] - fzm[1]) / (2.0 * dz), (fmp[1] - fmm[1]) / (2.0 * dmu)],
        ];
        let step = solve2(jac, [-f[0], -f[1]])
            .ok_or_else(|| FlowError::Newton("singular shooting Jacobian; try the sweep solver".into()))?;
        let mut damp = 1.0;
        let mut f_new = miss(z + step[0], mu + step[1]);
        while size(f_new) > size(f) && damp > 1e-6 {
            damp *= 0.5;
            f_new = miss(z + damp * step[0], mu + damp * step[1]);
        }
        if !size(f_new).is_finite() {
            return Err(FlowError::Newton(format!(
                "shooting diverged over {steps} steps; reduce the horizon or use the sweep solver"
            )));
        }
        z += damp * step[0];
        mu += damp * step[1];
        f = f_new;
        if step[0].abs().max(step[1].abs()) <= tol {
            return Ok(((z, mu), it, f[0].abs().max(f[1].abs())));
        }
    }
    Err(FlowError::Newton(format!(
        "no convergence after 50 iterations (miss {:e}); reduce the horizon or use the sweep solver",
        f[0].abs().max(f[1].abs())
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub x: FlowSequence,
    pub sweeps: usize,
    /// Largest ratio of successive sweep changes.
    pub contraction: f64,
    pub relaxed: bool,
    pub residual: f64,
}

/// Solve for `(z_j, mu_j)` given `(K_j, g_j)` and the next `(z, mu)`.
fn backward_point(p: &FlowProblem, j: usize, k: &[f64], g: f64, target: VTriple, guess: (f64, f64)) -> Result<(f64, f64)> {
    let (mut z, mut mu) = guess;
    let d = k.len();
    let d1 = p.model.d_k(j + 1);
    for _ in 0..30 {
        let v = VTriple::new(g, z, mu);
        let (_, out) = phi_step(1.0, k, v, j, &p.params, p.model.as_ref());
        let f = [out.z - target.z, out.mu - target.mu];
        let jac = phi_jacobian(1.0, k, v, j, &p.params, p.model.as_ref(), &p.dom);
        let a = [
            [jac.get(d1 + 1, d + 1), jac.get(d1 + 1, d + 2)],
            [jac.get(d1 + 2, d + 1), jac.get(d1 + 2, d + 2)],
        ];
        let s = solve2(a, [-f[0], -f[1]]).ok_or_else(|| FlowError::Newton(format!("singular backward step at j = {j}")))?;
        z += s[0];
        mu += s[1];
        if s[0].abs() <= 1e-15 * z.abs().max(1e-300) * 10.0 && s[1].abs() <= 1e-15 * mu.abs().max(1e-300) * 10.0 {
            break;
        }
        if s[0] == 0.0 && s[1] == 0.0 {
            break;
        }
    }
    Ok((z, mu))
}

/// Alternate forward `(K, g)` and backward `(z, mu)` passes on the truncated
/// problem with the approximate flow's values at the horizon.
pub fn sweep_solve(p: &FlowProblem, tol: f64, max_sweeps: usize) -> Result<SweepResult> {
    let n = p.horizon();
    let mut x = p.xbar.clone();
    let mut prev_change: Option<f64> = None;
    let mut contraction: f64 = 0.0;
    let mut relaxed = false;
    let mut omega = 1.0;
    let mut growing = 0;
    for sweep in 1..=max_sweeps {
        let old = x.clone();
        let mut new = x.clone();
        for j in 0..n {
            let (k, v) = phi_step(1.0, &new.k[j], new.v[j], j, &p.params, p.model.as_ref());
            new.k[j + 1] = k;
            new.v[j + 1].g = v.g;
        }
        for j in (0..n).rev() {
            let (z, mu) = backward_point(p, j, &new.k[j], new.v[j].g, new.v[j + 1], (new.v[j].z, new.v[j].mu))?;
            new.v[j].z = z;
            new.v[j].mu = mu;
        }
        if omega != 1.0 {
            let mut blended = old.clone();
            blended.axpy(omega, &new.sub(&old));
            new = blended;
        }
        let change = weighted_norm(&new.sub(&old), &p.scheme, Which::W)?;
        x = new;
        if !change.is_finite() {
            return Err(FlowError::NoContraction {
                iterations: sweep,
                factor: f64::INFINITY,
            });
        }
        if change <= tol {
            let residual = p.flow_residual(&x)?;
            return Ok(SweepResult {
                x,
                sweeps: sweep,
                contraction,
                relaxed,
                residual,
            });
        }
        if let Some(pc) = prev_change {
            let ratio = change / pc;
            contraction = contraction.max(ratio);
            growing = if ratio >= 1.0 { growing + 1 } else { 0 };
            if growing >= 2 {
                if relaxed {
                    return Err(FlowError::NoContraction {
                        iterations: sweep,
                        factor: ratio,
                    });
                }
                relaxed = true;
                omega = 0.5;
                growing = 0;
            }
        }
        prev_change = Some(change);
    }
    Err(FlowError::NoContraction {
        iterations: max_sweeps,
        factor: contraction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub g0: f64,
    pub dg0: f64,
    pub horizon: usize,
    pub dz0_dg0: f64,
    pub dmu0_dg0: f64,
    /// Same differences with half the step.
    pub dz0_dg0_half: f64,
    pub dmu0_dg0_half: f64,
    pub richardson_dz: f64,
    pub richardson_dmu: f64,
    /// `|D(d/2) - D(d)| / 3`, the Richardson estimate of the truncation
    /// error of the half-step difference.
    pub error_dz: f64,
    pub error_dmu: f64,
}

fn solved_v0(spec: &FlowSpec, g0: f64) -> Result<VTriple> {
    let p = spec.problem(g0)?;
    Ok(integrate_homotopy(&p)?.x_final.v[0])
}

/// Central differences of the solved `(z0, mu0)` in `g0`, with the horizon
/// pinned to the one chosen at the nominal `g0`.
pub fn sensitivity(spec: &FlowSpec, g0: f64, dg0: f64) -> Result<SensitivityReport> {
    if !(dg0 > 0.0 && dg0 < g0) {
        return Err(FlowError::InvalidInput(format!("dg0 = {dg0} must lie in (0, g0)")));
    }
    let nominal = spec.problem(g0)?;
    let horizon = nominal.horizon();
    let mut pinned = spec.clone();
    pinned.quad.horizon = Some(horizon);
    let pts = [g0 + dg0, g0 - dg0, g0 + dg0 / 2.0, g0 - dg0 / 2.0];
    let vals: Vec<VTriple> = pts.iter().map(|&g| solved_v0(&pinned, g)).collect::<Result<_>>()?;
    let dz = (vals[0].z - vals[1].z) / (2.0 * dg0);
    let dmu = (vals[0].mu - vals[1].mu) / (2.0 * dg0);
    let dz_h = (vals[2].z - vals[3].z) / dg0;
    let dmu_h = (vals[2].mu - vals[3].mu) / dg0;
    Ok(SensitivityReport {
        g0,
        dg0,
        horizon,
        dz0_dg0: dz,
        dmu0_dg0: dmu,
        dz0_dg0_half: dz_h,
        dmu0_dg0_half: dmu_h,
        richardson_dz: (4.0 * dz_h - dz) / 3.0,
        richardson_dmu: (4.0 * dmu_h - dmu) / 3.0,
        error_dz: (dz_h - dz).abs() / 3.0,
        error_dmu: (dmu_h - dmu).abs() / 3.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub z0: Option<f64>,
    pub mu0: Option<f64>,
    pub horizon: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDiff {
    pub m_left: f64,
    pub m_right: f64,
    /// `max_{j <= j_report}` of the `w`-weighted difference, using the left
    /// point's weights.
    pub diff: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub j_report: usize,
    pub points: Vec<SweepPoint>,
    pub diffs: Vec<PairDiff>,
    pub max_diff: f64,
    pub max_ratio: f64,
    pub failures: usize,
}

type Family<'a> = &'a (dyn Fn(f64) -> Result<FlowSpec> + Sync);

fn solve_point(family: Family, m: f64, g0: f64) -> Result<(FlowSequence, WeightScheme)> {
    let spec = family(m)?;
    let p = spec.problem(g0)?;
    let r = integrate_homotopy(&p)?;
    Ok((r.x_final, p.theorem_scheme))
}

fn weighted_gap(a: &FlowSequence, b: &FlowSequence, scheme: &WeightScheme, last: usize) -> Result<f64> {
    let n = last.min(a.horizon()).min(b.horizon());
    let d = a.truncated(n).sub(&b.truncated(n));
    weighted_norm(&d, scheme, Which::W)
}

/// Solve along `m_grid` (in parallel, results kept in grid order) and report
/// differences between neighbouring grid points.
pub fn external_parameter_sweep(family: Family, m_grid: &[f64], g0: f64, j_report: usize) -> Result<ContinuityReport> {
    if m_grid.is_empty() {
        return Err(FlowError::InvalidInput("empty parameter grid".into()));
    }
    let solved: Vec<Result<(FlowSequence, WeightScheme)>> = m_grid.par_iter().map(|&m| solve_point(family, m, g0)).collect();
    let points = m_grid
        .iter()
        .zip(&solved)
        .map(|(&m, r)| match r {
            Ok((x, _)) => SweepPoint {
                m,
                ok: true,
                error: None,
                z0: Some(x.v[0].z),
                mu0: Some(x.v[0].mu),
                horizon: Some(x.horizon()),
            },
            Err(e) => SweepPoint {
                m,
                ok: false,
                error: Some(e.to_string()),
                z0: None,
                mu0: None,
                horizon: None,
            },
        })
        .collect::<Vec<_>>();
    let mut diffs = Vec::new();
    for i in 0..m_grid.len().saturating_sub(1) {
        if let (Ok((xa, sa)), Ok((xb, _))) = (&solved[i], &solved[i + 1]) {
            let diff = weighted_gap(xa, xb, sa, j_report)?;
            let dm = (m_grid[i + 1] - m_grid[i]).abs();
            diffs.push(PairDiff {
                m_left: m_grid[i],
                m_right: m_grid[i + 1],
                diff,
                ratio: if dm > 0.0 { diff / dm } else { 0.0 },
            });
        }
    }
    Ok(ContinuityReport {
        j_report,
        failures: points.iter().filter(|p| !p.ok).count(),
        max_diff: diffs.iter().map(|d| d.diff).fold(0.0, f64::max),
        max_ratio: diffs.iter().map(|d| d.ratio).fold(0.0, f64::max),
        points,
        diffs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub intervals: usize,
    pub spacing: f64,
    pub max_diff: f64,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub levels: Vec<RefinementLevel>,
    /// `max_diff` at one level over `max_diff` at the next finer one.
    pub shrink_factors: Vec<f64>,
    /// Set when the difference quotient more than doubles under refinement.
    pub discontinuity: bool,
    pub failures: usize,
}

/// Repeat the sweep on nested grids over `[lo, hi]`, halving the spacing
/// each level. All levels reuse the solves of the finest grid.
pub fn refinement_study(
    family: Family,
    lo: f64,
    hi: f64,
    base_intervals: usize,
    levels: usize,
    g0: f64,
    j_report: usize,
) -> Result<RefinementReport> {
    if base_intervals == 0 || levels == 0 || !(hi > lo) {
        return Err(FlowError::InvalidInput("refinement needs lo < hi and positive counts".into()));
    }
    let finest = base_intervals << (levels - 1);
    let grid: Vec<f64> = (0..=finest).map(|i| lo + (hi - lo) * i as f64 / finest as f64).collect();
    let solved: Vec<Result<(FlowSequence, WeightScheme)>> = grid.par_iter().map(|&m| solve_point(family, m, g0)).collect();
    let failures = solved.iter().filter(|r| r.is_err()).count();
    let mut out = Vec::new();
    for l in 0..levels {
        let stride = 1usize << (levels - 1 - l);
        let intervals = base_intervals << l;
        let spacing = (hi - lo) / intervals as f64;
        let mut max_diff: f64 = 0.0;
        for i in 0..intervals {
            let (a, b) = (i * stride, (i + 1) * stride);
            if let (Ok((xa, sa)), Ok((xb, _))) = (&solved[a], &solved[b]) {
                max_diff = max_diff.max(weighted_gap(xa, xb, sa, j_report)?);
            }
        }
        out.push(RefinementLevel {
            intervals,
            spacing,
            max_diff,
            max_ratio: max_diff / spacing,
        });
    }
    let shrink_factors = out
        .windows(2)
        .map(|w| if w[1].max_diff > 0.0 { w[0].max_diff / w[1].max_diff } else { f64::INFINITY })
        .collect();
    let discontinuity = out.windows(2).any(|w| w[1].max_ratio > 2.0 * w[0].max_ratio);
    Ok(RefinementReport {
        levels: out,
        shrink_factors,
        discontinuity,
        failures,
    })
}

/// Pairwise `w`-norm gaps between the three solvers on one problem.
///
/// Shooting only determines `(z0, mu0)`; its forward orbit amplifies
/// rounding by `lambda^J`, so gaps involving shooting are taken over the
/// `(z, mu)` entries at `j = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleGaps {
    pub homotopy_shooting: f64,
    pub homotopy_sweep: f64,
    pub shooting_sweep: f64,
    pub homotopy_residual: f64,
    pub sweep_residual: f64,
    pub shooting_iterations: usize,
    pub sweeps: usize,
}

impl OracleGaps {
    pub fn max_gap(&self) -> f64 {
        self.homotopy_shooting.max(self.homotopy_sweep).max(self.shooting_sweep)
    }
}

/// `w`-weighted gap of the `(z0, mu0)` entries.
pub fn initial_gap(p: &FlowProblem, a: VTriple, b: VTriple) -> f64 {
    let s = &p.scheme;
    ((a.z - b.z).abs() / s.w(Component::Z, 0)).max((a.mu - b.mu).abs() / s.w(Component::Mu, 0))
}

pub fn oracle_compare(p: &FlowProblem, shooting_tol: f64, sweep_tol: f64, max_sweeps: usize) -> Result<OracleGaps> {
    let hom = integrate_homotopy(p)?;
    let shoot = shooting_solve(p, p.horizon(), shooting_tol, None)?;
    let sweep = sweep_solve(p, sweep_tol, max_sweeps)?;
    let root = VTriple::new(p.g0, shoot.z0, shoot.mu0);
    Ok(OracleGaps {
        homotopy_shooting: initial_gap(p, hom.x_final.v[0], root),
        homotopy_sweep: weighted_norm(&hom.x_final.sub(&sweep.x), &p.scheme, Which::W)?,
        shooting_sweep: initial_gap(p, root, sweep.x.v[0]),
        homotopy_residual: hom.flow_residual,
        sweep_residual: sweep.residual,
        shooting_iterations: shoot.iterations,
        sweeps: sweep.sweeps,
    })
}

/// `|x_j - xbar_j|` for the four clauses at a single `j`, divided by the
/// theorem weights.
pub fn clause_ratios_at(p: &FlowProblem, x: &FlowSequence, j: usize) -> [f64; 4] {
    let d = x.truncated(j).sub(&p.xbar.truncated(j));
    let s = &p.theorem_scheme;
    let kd = d.k[j].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    [
        kd / s.w(Component::K, j),
        d.v[j].g.abs() / s.w(Component::G, j),
        d.v[j].z.abs() / s.w(Component::Z, j),
        d.v[j].mu.abs() / s.w(Component::Mu, j),
    ]
}

/// Convenience wrapper: set up and solve at `g0`.
pub fn solve_flow(spec: &FlowSpec, g0: f64) -> Result<(FlowProblem, FlowResult)> {
    let p = spec.problem(g0)?;
    let r = integrate_homotopy(&p)?;
    Ok((p, r))
}

