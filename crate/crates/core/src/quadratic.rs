//! The triangular quadratic flow in `(g, z, mu)`.
//!
//! `g` is iterated forward from `g0`; `z` and `mu` are obtained from
//! backward recursions whose terminal values encode decay at infinity.
//! Sums that would run to infinity are truncated at an extended horizon
//! past the requested one, chosen so the neglected tail is certified below
//! the tolerance.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assumptions::{check_a1, check_a2};
use crate::error::{FlowError, Result};
use crate::params::{cutoff_time, default_horizon, CutoffData, ParamSeq, StepCoeffs, TailRule};

pub const G0_BETA_GATE: f64 = 0.1;
pub const ALPHA_GATE: f64 = 0.75;

/// Relevant couplings `(g, z, mu)`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct VTriple {
    pub g: f64,
    pub z: f64,
    pub mu: f64,
}

impl VTriple {
    pub fn new(g: f64, z: f64, mu: f64) -> Self {
        VTriple { g, z, mu }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.g, self.z, self.mu]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        VTriple::new(a[0], a[1], a[2])
    }

    pub fn max_abs(&self) -> f64 {
        self.g.abs().max(self.z.abs()).max(self.mu.abs())
    }
}

/// One step of the quadratic map.
pub fn quadratic_step(v: VTriple, c: &StepCoeffs) -> VTriple {
    let VTriple { g, z, mu } = v;
    VTriple {
        g: g - c.beta * g * g,
        z: z - c.theta * g * g - c.zeta * g * z,
        mu: c.eta * g + c.gamma * z + c.lambda * mu
            - (c.ups_gg * g * g + c.ups_gz * g * z + c.ups_gmu * g * mu + c.ups_zz * z * z + c.ups_zmu * z * mu),
    }
}

/// Sum of absolute values of the terms in each component of the step.
/// Used as the scale for relative residuals.
pub fn step_scale(v: VTriple, c: &StepCoeffs) -> VTriple {
    let VTriple { g, z, mu } = v;
    VTriple {
        g: g.abs() + (c.beta * g * g).abs(),
        z: z.abs() + (c.theta * g * g).abs() + (c.zeta * g * z).abs(),
        mu: (c.eta * g).abs()
            + (c.gamma * z).abs()
            + (c.lambda * mu).abs()
            + (c.ups_gg * g * g).abs()
            + (c.ups_gz * g * z).abs()
            + (c.ups_gmu * g * mu).abs()
            + (c.ups_zz * z * z).abs()
            + (c.ups_zmu * z * mu).abs(),
    }
}

/// Jacobian of [`quadratic_step`] in `(g, z, mu)`, rows are outputs.
pub fn quadratic_jacobian(v: VTriple, c: &StepCoeffs) -> [[f64; 3]; 3] {
    let VTriple { g, z, mu } = v;
    let eta_t = c.eta - 2.0 * c.ups_gg * g - c.ups_gz * z - c.ups_gmu * mu;
    let gamma_t = c.gamma - c.ups_gz * g - 2.0 * c.ups_zz * z - c.ups_zmu * mu;
    let lambda_t = c.lambda - c.ups_gmu * g - c.ups_zmu * z;
    let xi_t = 2.0 * c.theta * g + c.zeta * z;
    [
        [1.0 - 2.0 * c.beta * g, 0.0, 0.0],
        [-xi_t, 1.0 - c.zeta * g, 0.0],
        [eta_t, gamma_t, lambda_t],
    ]
}

/// Forward iteration `g_{j+1} = g_j - beta_j g_j^2` for `j < horizon`.
pub fn iterate_gbar(g0: f64, params: &ParamSeq, horizon: usize) -> Result<Vec<f64>> {
    if !(g0.is_finite() && g0 > 0.0) {
        return Err(FlowError::InvalidInput(format!("g0 = {g0} must be positive")));
    }
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(g0);
    extend_gbar(&mut out, params, horizon)?;
    Ok(out)
}

fn extend_gbar(g: &mut Vec<f64>, params: &ParamSeq, horizon: usize) -> Result<()> {
    let mut cur = *g.last().expect("nonempty");
    for j in g.len() - 1..horizon {
        let b = params.beta.at(j);
        cur -= b * cur * cur;
        if !(cur > 0.0 && cur.is_finite()) {
            return Err(FlowError::G0TooLarge { index: j + 1 });
        }
        g.push(cur);
    }
    Ok(())
}

/// Whether infinite sums are closed with a certified tail or simply cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TailPolicy {
    #[default]
    Certified,
    /// Zero terminal values at the requested horizon, no certificate.
    Truncate,
}

/// Terminal condition for the backward `z` recursion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ZTerminal {
    Zero,
    /// `z = slope * g`, the exact invariant line once `beta`, `theta` and
    /// `zeta` are constant.
    Line { slope: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct TailPlan {
    ext: usize,
    terminal: ZTerminal,
    /// `(|c|, r_eff, start)` when `theta` decays geometrically.
    z_geometric: Option<(f64, f64, usize)>,
}

const G_CAP: f64 = 0.5;

fn mu_steps(tol: f64, alpha: f64) -> usize {
    let alpha = alpha.clamp(1e-3, 1.0 - 1e-9);
    (((tol * (1.0 - alpha)).ln() / alpha.ln()).ceil()).max(1.0) as usize
}

fn plan_tail(params: &ParamSeq, horizon: usize, tol: f64, policy: TailPolicy, alpha: f64) -> Result<TailPlan> {
    if policy == TailPolicy::Truncate {
        return Ok(TailPlan {
            ext: horizon,
            terminal: ZTerminal::Zero,
            z_geometric: None,
        });
    }
    let base = horizon.max(params.prefix_len());
    let n_mu = mu_steps(tol, alpha);
    let zeta_plus = match params.zeta.tail {
        TailRule::Zero => 0.0,
        TailRule::Constant { value } => value.max(0.0),
        TailRule::Geometric { value, .. } => value.abs(),
    };
    match params.theta.tail {
        TailRule::Zero => Ok(TailPlan {
            ext: base + n_mu,
            terminal: ZTerminal::Zero,
            z_geometric: None,
        }),
        TailRule::Geometric { value, .. } | TailRule::Constant { value } if value == 0.0 => Ok(TailPlan {
            ext: base + n_mu,
            terminal: ZTerminal::Zero,
            z_geometric: None,
        }),
        TailRule::Geometric { value, ratio } if ratio.abs() < 1.0 => {
            let damp = 1.0 - zeta_plus * G_CAP;
            let r_eff = if ratio == 0.0 { 0.0 } else { ratio.abs() / damp };
            if damp <= 0.0 || r_eff >= 1.0 {
                return Err(FlowError::NonConvergent(format!(
                    "theta decays with ratio {ratio} but zeta tail amplifies by {}",
                    1.0 / damp
                )));
            }
            let n_z = if r_eff == 0.0 {
                1
            } else {
                ((tol * (1.0 - r_eff) / value.abs()).ln() / r_eff.ln()).ceil().max(0.0) as usize
            };
            Ok(TailPlan {
                ext: base + n_z + n_mu,
                terminal: ZTerminal::Zero,
                z_geometric: Some((value.abs(), r_eff, params.theta.prefix_len())),
            })
        }
        _ => {
            let c = params.theta.tail_constant().ok_or_else(|| {
                FlowError::NonConvergent("theta tail neither constant nor decaying".into())
            })?;
            let b = params.beta.tail_constant().unwrap_or(0.0);
            if params.beta.tail_constant().is_none() || b == 0.0 {
                return Err(FlowError::NonConvergent(
                    "theta has a non-zero constant tail while beta decays; the z sum diverges".into(),
                ));
            }
            let zeta_inf = match params.zeta.tail_constant() {
                Some(z) => z,
                None => {
                    return Err(FlowError::NonConvergent(
                        "theta constant with a non-constant zeta tail is not supported".into(),
                    ))
                }
            };
            if b - zeta_inf <= 0.0 {
                return Err(FlowError::NonConvergent(format!(
                    "z sum diverges: tail beta = {b} does not exceed tail zeta = {zeta_inf}"
                )));
            }
            Ok(TailPlan {
                ext: base + n_mu,
                terminal: ZTerminal::Line {
                    slope: c / (b - zeta_inf),
                },
                z_geometric: None,
            })
        }
    }
}

fn backward_z(gbar: &[f64], params: &ParamSeq, terminal: ZTerminal) -> Vec<f64> {
    let n = gbar.len();
    let mut z = vec![0.0; n];
    z[n - 1] = match terminal {
        ZTerminal::Zero => 0.0,
        ZTerminal::Line { slope } => slope * gbar[n - 1],
    };
    for j in (0..n - 1).rev() {
        let g = gbar[j];
        let th = params.theta.at(j);
        let ze = params.zeta.at(j);
        z[j] = (z[j + 1] + th * g * g) / (1.0 - ze * g);
    }
    z
}

/// `(sigma_j, tau_j)` of the `mu` recursion `mu_{j+1} = (lambda_j - tau_j) mu_j + sigma_j`.
pub fn sigma_tau(g: f64, z: f64, c: &StepCoeffs) -> (f64, f64) {
    let sigma = c.eta * g + c.gamma * z - c.ups_gg * g * g - c.ups_gz * g * z - c.ups_zz * z * z;
    let tau = c.ups_gmu * g + c.ups_zmu * z;
    (sigma, tau)
}

struct MuSolve {
    mu: Vec<f64>,
    alpha: f64,
    alpha_index: usize,
}

fn backward_mu(gbar: &[f64], zbar: &[f64], params: &ParamSeq) -> Result<MuSolve> {
    let n = gbar.len();
    let mut mu = vec![0.0; n];
    let mut alpha: f64 = 0.0;
    let mut alpha_index = 0;
    for j in (0..n - 1).rev() {
        let c = params.at(j);
        let (sigma, tau) = sigma_tau(gbar[j], zbar[j], &c);
        let e = c.lambda - tau;
        if !(e > 0.0) {
            return Err(FlowError::Expansivity {
                alpha: f64::INFINITY,
                index: j,
            });
        }
        let a = 1.0 / e;
        if a > alpha {
            alpha = a;
            alpha_index = j;
        }
        mu[j] = (mu[j + 1] - sigma) / e;
    }
    if alpha >= 1.0 {
        return Err(FlowError::Expansivity {
            alpha,
            index: alpha_index,
        });
    }
    Ok(MuSolve {
        mu,
        alpha,
        alpha_index,
    })
}

/// Knobs for [`solve_quadratic_bvp`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticOptions {
    pub tol: f64,
    /// Requested horizon; `None` picks the default for the cut-off.
    pub horizon: Option<usize>,
    pub tail: TailPolicy,
    pub enforce_gate: bool,
    pub enforce_assumptions: bool,
}

impl Default for QuadraticOptions {
    fn default() -> Self {
        QuadraticOptions {
            tol: 1e-12,
            horizon: None,
            tail: TailPolicy::Certified,
            enforce_gate: true,
            enforce_assumptions: true,
        }
    }
}

impl QuadraticOptions {
    pub fn with_horizon(horizon: usize) -> Self {
        QuadraticOptions {
            horizon: Some(horizon),
            ..Self::default()
        }
    }

    pub fn unchecked(horizon: usize) -> Self {
        QuadraticOptions {
            horizon: Some(horizon),
            enforce_gate: false,
            enforce_assumptions: false,
            ..Self::default()
        }
    }
}

/// The solved quadratic flow together with its certificates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSolution {
    pub g0: f64,
    pub horizon: usize,
    pub ext_horizon: usize,
    pub cutoff: CutoffData,
    pub vbar: Vec<VTriple>,
    pub chi: Vec<f64>,
    /// Bound on the truncation error of returned `z`, `mu`; `None` when the
    /// sums were cut without a certificate.
    pub tail_certificate: Option<f64>,
    pub alpha: f64,
    pub alpha_index: usize,
    /// `sup_j |zbar_j| / (chi_j gbar_j)` over the horizon.
    pub z_envelope: f64,
    /// `sup_j |mubar_j| / (chi_j gbar_j)` over the horizon.
    pub mu_envelope: f64,
    /// `sup_j gbar_j / inf_{k <= j} gbar_k`.
    pub gbar_inf_ratio: f64,
    /// Largest relative forward residual of the returned sequence.
    pub forward_residual: f64,
    pub terminal: ZTerminal,
    pub policy: TailPolicy,
    #[serde(skip)]
    pub(crate) gbar_ext: Vec<f64>,
    #[serde(skip)]
    pub(crate) zbar_ext: Vec<f64>,
    #[serde(skip)]
    pub(crate) mubar_ext: Vec<f64>,
}

impl QuadraticSolution {
    pub fn gbar(&self) -> Vec<f64> {
        self.vbar.iter().map(|v| v.g).collect()
    }

    pub fn zbar(&self) -> Vec<f64> {
        self.vbar.iter().map(|v| v.z).collect()
    }

    pub fn mubar(&self) -> Vec<f64> {
        self.vbar.iter().map(|v| v.mu).collect()
    }

    /// Values on the extended horizon used to close the sums.
    pub fn extended(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.gbar_ext, &self.zbar_ext, &self.mubar_ext)
    }

    /// CSV with columns `j, gbar, zbar, mubar, chi`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "gbar", "zbar", "mubar", "chi"])?;
        for (j, (v, c)) in self.vbar.iter().zip(&self.chi).enumerate() {
            w.write_record([j.to_string(), fmt17(v.g), fmt17(v.z), fmt17(v.mu), fmt17(*c)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn forward_residual(vbar: &[VTriple], params: &ParamSeq) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..vbar.len().saturating_sub(1) {
        let c = params.at(j);
        let next = quadratic_step(vbar[j], &c);
        let scale = step_scale(vbar[j], &c);
        let d = [
            (vbar[j + 1].g - next.g, scale.g),
            (vbar[j + 1].z - next.z, scale.z),
            (vbar[j + 1].mu - next.mu, scale.mu),
        ];
        for (diff, s) in d {
            if diff != 0.0 {
                worst = worst.max(diff.abs() / s.max(f64::MIN_POSITIVE));
            }
        }
    }
    worst
}

struct Core {
    g: Vec<f64>,
    z: Vec<f64>,
    mu: Vec<f64>,
    alpha: f64,
    alpha_index: usize,
    terminal: ZTerminal,
    certificate: Option<f64>,
}

fn z_tail_bound(plan: &TailPlan, g: &[f64], params: &ParamSeq, from: usize) -> f64 {
    let ext = g.len() - 1;
    let at_ext = match plan.z_geometric {
        Some((c, r_eff, start)) => {
            let ge = g[ext];
            let k = ext.saturating_sub(start);
            c * crate::params::int_pow(r_eff, k) * ge * ge / (1.0 - r_eff)
        }
        None => 0.0,
    };
    if at_ext == 0.0 {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for j in from..ext {
        prod /= (1.0 - params.zeta.at(j) * g[j]).abs();
    }
    prod * at_ext
}

fn solve_core(g0: f64, params: &ParamSeq, horizon: usize, tol: f64, policy: TailPolicy) -> Result<Core> {
    let mut alpha_plan = ALPHA_GATE;
    for _ in 0..6 {
        let plan = plan_tail(params, horizon, tol, policy, alpha_plan)?;
        let g = iterate_gbar(g0, params, plan.ext)?;
        let z = backward_z(&g, params, plan.terminal);
        let m = backward_mu(&g, &z, params)?;
        if policy == TailPolicy::Truncate {
            return Ok(Core {
                g,
                z,
                mu: m.mu,
                alpha: m.alpha,
                alpha_index: m.alpha_index,
                terminal: plan.terminal,
                certificate: None,
            });
        }
        let z_err = z_tail_bound(&plan, &g, params, horizon);
        let mut sig_sup: f64 = 0.0;
        let mut gam_sup: f64 = 0.0;
        for j in horizon..plan.ext {
            let c = params.at(j);
            sig_sup = sig_sup.max(sigma_tau(g[j], z[j], &c).0.abs());
            gam_sup = gam_sup.max(c.gamma.abs() + (c.ups_gz * g[j]).abs() + 2.0 * (c.ups_zz * z[j]).abs());
        }
        let a = m.alpha.max(1e-300);
        let mu_err = crate::params::int_pow(a, plan.ext - horizon) * sig_sup / (1.0 - a)
            + gam_sup * z_err / (1.0 - a);
        let cert = z_err.max(mu_err);
        if cert <= tol || m.alpha > alpha_plan.max(0.999) {
            return Ok(Core {
                g,
                z,
                mu: m.mu,
                alpha: m.alpha,
                alpha_index: m.alpha_index,
                terminal: plan.terminal,
                certificate: Some(cert),
            });
        }
        alpha_plan = (alpha_plan.max(m.alpha) + 1.0) / 2.0;
    }
    Err(FlowError::ExtendHorizon {
        estimate: f64::NAN,
        tol,
    })
}

fn assemble(g0: f64, params: &ParamSeq, cutoff: CutoffData, horizon: usize, core: Core, policy: TailPolicy) -> QuadraticSolution {
    let vbar: Vec<VTriple> = (0..=horizon)
        .map(|j| VTriple::new(core.g[j], core.z[j], core.mu[j]))
        .collect();
    let chi: Vec<f64> = (0..=horizon).map(|j| cutoff.chi(j)).collect();
    let mut z_env: f64 = 0.0;
    let mut mu_env: f64 = 0.0;
    let mut inf_g = f64::INFINITY;
    let mut inf_ratio: f64 = 0.0;
    for (v, c) in vbar.iter().zip(&chi) {
        let s = c * v.g;
        z_env = z_env.max(v.z.abs() / s);
        mu_env = mu_env.max(v.mu.abs() / s);
        inf_g = inf_g.min(v.g);
        inf_ratio = inf_ratio.max(v.g / inf_g);
    }
    let forward_residual = forward_residual(&vbar, params);
    QuadraticSolution {
        g0,
        horizon,
        ext_horizon: core.g.len() - 1,
        cutoff,
        vbar,
        chi,
        tail_certificate: core.certificate,
        alpha: core.alpha,
        alpha_index: core.alpha_index,
        z_envelope: z_env,
        mu_envelope: mu_env,
        gbar_inf_ratio: inf_ratio,
        forward_residual,
        terminal: core.terminal,
        policy,
        gbar_ext: core.g,
        zbar_ext: core.z,
        mubar_ext: core.mu,
    }
}

/// `zbar_j = sum_{l >= j} prod_{k=j}^{l} (1 - zeta_k gbar_k)^{-1} theta_l gbar_l^2`
/// on the indices of `gbar`.
pub fn solve_zbar(gbar: &[f64], params: &ParamSeq, tol: f64) -> Result<Vec<f64>> {
    if gbar.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    let horizon = gbar.len() - 1;
    let plan = plan_tail(params, horizon, tol, TailPolicy::Certified, ALPHA_GATE)?;
    let mut g = gbar.to_vec();
    extend_gbar(&mut g, params, plan.ext)?;
    let z = backward_z(&g, params, plan.terminal);
    let err = z_tail_bound(&plan, &g, params, horizon);
    if err > tol {
        return Err(FlowError::ExtendHorizon { estimate: err, tol });
    }
    Ok(z[..=horizon].to_vec())
}

/// `mubar_j = -sum_{l >= j} prod_{k=j}^{l} (lambda_k - tau_k)^{-1} sigma_l`.
///
/// `zbar` must have been produced for the same `gbar`; values beyond its end
/// are recomputed internally.
pub fn solve_mubar(gbar: &[f64], zbar: &[f64], params: &ParamSeq, tol: f64) -> Result<Vec<f64>> {
    if gbar.is_empty() || zbar.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    if gbar.len() != zbar.len() {
        return Err(FlowError::InvalidInput("gbar and zbar lengths differ".into()));
    }
    let horizon = gbar.len() - 1;
    let plan = plan_tail(params, horizon, tol, TailPolicy::Certified, ALPHA_GATE)?;
    let mut g = gbar.to_vec();
    extend_gbar(&mut g, params, plan.ext)?;
    let mut z = backward_z(&g, params, plan.terminal);
    z[..=horizon].copy_from_slice(zbar);
    let m = backward_mu(&g, &z, params)?;
    Ok(m.mu[..=horizon].to_vec())
}

/// Solve the quadratic boundary-value problem from `g0`.
pub fn solve_quadratic_bvp(g0: f64, params: &ParamSeq, opts: &QuadraticOptions) -> Result<QuadraticSolution> {
    params.validate()?;
    if !(opts.tol > 0.0 && opts.tol.is_finite()) {
        return Err(FlowError::InvalidInput("tol must be positive".into()));
    }
    if !(g0.is_finite() && g0 > 0.0) {
        return Err(FlowError::InvalidInput(format!("g0 = {g0} must be positive")));
    }
    let cutoff = cutoff_time(params)?;
    let horizon = opts.horizon.unwrap_or_else(|| default_horizon(&cutoff, opts.tol));
    if opts.enforce_gate && g0 * params.beta_sup() > G0_BETA_GATE {
        return Err(FlowError::Gate(format!(
            "g0 * sup|beta| = {} exceeds {G0_BETA_GATE}",
            g0 * params.beta_sup()
        )));
    }
    if opts.enforce_assumptions {
        let a1 = check_a1(params, horizon)?;
        if !a1.pass {
            return Err(FlowError::Assumption {
                which: "A1",
                detail: format!("best c = {}, {} exceptional indices", a1.c, a1.exceptional),
            });
        }
        let a2 = check_a2(params, &cutoff, horizon)?;
        if !a2.pass {
            return Err(FlowError::Assumption {
                which: "A2",
                detail: a2.summary(),
            });
        }
    }
    let core = solve_core(g0, params, horizon, opts.tol, opts.tail)?;
    if opts.enforce_gate && core.alpha > ALPHA_GATE {
        return Err(FlowError::Gate(format!(
            "alpha = {} at j = {} exceeds {ALPHA_GATE}",
            core.alpha, core.alpha_index
        )));
    }
    if let Some(c) = core.certificate {
        if c > opts.tol {
            return Err(FlowError::ExtendHorizon {
                estimate: c,
                tol: opts.tol,
            });
        }
    }
    Ok(assemble(g0, params, cutoff, horizon, core, opts.tail))
}

/// First and second derivatives of the quadratic solution in `g0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeBundle {
    pub dg: Vec<f64>,
    pub dz: Vec<f64>,
    pub dmu: Vec<f64>,
    pub d2g: Vec<f64>,
    pub d2z: Vec<f64>,
    pub d2mu: Vec<f64>,
}

/// Differentiates the recursions behind `sol` in `g0`, on the same extended
/// horizon so that the result is the exact derivative of the computed sums.
pub fn gbar_derivatives(sol: &QuadraticSolution, params: &ParamSeq) -> DerivativeBundle {
    let (g, z, mu) = sol.extended();
    let n = g.len();
    let mut dg = vec![0.0; n];
    let mut d2g = vec![0.0; n];
    dg[0] = 1.0;
    for j in 0..n - 1 {
        let b = params.beta.at(j);
        dg[j + 1] = dg[j] * (1.0 - 2.0 * b * g[j]);
        d2g[j + 1] = d2g[j] * (1.0 - 2.0 * b * g[j]) - 2.0 * b * dg[j] * dg[j];
    }

    let mut dz = vec![0.0; n];
    let mut d2z = vec![0.0; n];
    if let ZTerminal::Line { slope } = sol.terminal {
        dz[n - 1] = slope * dg[n - 1];
        d2z[n - 1] = slope * d2g[n - 1];
    }
    for j in (0..n - 1).rev() {
        let th = params.theta.at(j);
        let ze = params.zeta.at(j);
        let den = 1.0 - ze * g[j];
        dz[j] = (dz[j + 1] + 2.0 * th * g[j] * dg[j] + ze * dg[j] * z[j]) / den;
        d2z[j] = (d2z[j + 1]
            + 2.0 * th * (dg[j] * dg[j] + g[j] * d2g[j])
            + ze * (d2g[j] * z[j] + 2.0 * dg[j] * dz[j]))
            / den;
    }

    let mut dmu = vec![0.0; n];
    let mut d2mu = vec![0.0; n];
    for j in (0..n - 1).rev() {
        let c = params.at(j);
        let (gj, zj, mj) = (g[j], z[j], mu[j]);
        let (g1, z1, g2, z2) = (dg[j], dz[j], d2g[j], d2z[j]);
        let (_, tau) = sigma_tau(gj, zj, &c);
        let e = c.lambda - tau;
        let s1 = c.eta * g1 + c.gamma * z1
            - 2.0 * c.ups_gg * gj * g1
            - c.ups_gz * (g1 * zj + gj * z1)
            - 2.0 * c.ups_zz * zj * z1;
        let s2 = c.eta * g2 + c.gamma * z2
            - 2.0 * c.ups_gg * (g1 * g1 + gj * g2)
            - c.ups_gz * (g2 * zj + 2.0 * g1 * z1 + gj * z2)
            - 2.0 * c.ups_zz * (z1 * z1 + zj * z2);
        let t1 = c.ups_gmu * g1 + c.ups_zmu * z1;
        let t2 = c.ups_gmu * g2 + c.ups_zmu * z2;
        dmu[j] = (dmu[j + 1] - s1 + mj * t1) / e;
        d2mu[j] = (d2mu[j + 1] - s2 + mj * t2 + 2.0 * dmu[j] * t1) / e;
    }

    let keep = sol.horizon + 1;
    DerivativeBundle {
        dg: dg[..keep].to_vec(),
        dz: dz[..keep].to_vec(),
        dmu: dmu[..keep].to_vec(),
        d2g: d2g[..keep].to_vec(),
        d2z: d2z[..keep].to_vec(),
        d2mu: d2mu[..keep].to_vec(),
    }
}

/// One sampled comparison of a product against its asymptotic form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductSample {
    pub l: usize,
    pub ratio: f64,
    pub chi_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductAsymptotic {
    pub gamma: f64,
    pub j: usize,
    pub c_j: f64,
    pub tail_bound: f64,
    pub samples: Vec<ProductSample>,
    /// `max |ratio - 1| / (chi_l gbar_l)` over the samples.
    pub fitted: f64,
}

fn log_factor(gamma: f64, b: f64, g: f64) -> Result<f64> {
    let f = 1.0 - gamma * b * g;
    if f <= 0.0 {
        return Err(FlowError::InvalidInput(format!(
            "factor 1 - gamma*beta*g = {f} is not positive"
        )));
    }
    Ok(gamma * (-b * g).ln_1p() - (-gamma * b * g).ln_1p())
}

/// `c_j` in `prod_{k=j}^{l} (1 - gamma beta_k gbar_k)^{-1} ~ (gbar_j/gbar_{l+1})^gamma c_j`,
/// checked at each `l` in `samples`.
pub fn product_asymptotic(
    gamma: f64,
    j: usize,
    sol: &QuadraticSolution,
    params: &ParamSeq,
    samples: &[usize],
) -> Result<ProductAsymptotic> {
    if !(gamma >= 0.0) {
        return Err(FlowError::InvalidInput("gamma must be non-negative".into()));
    }
    let g = &sol.gbar_ext;
    let n = g.len();
    if j + 1 >= n {
        return Err(FlowError::InvalidInput(format!("j = {j} beyond the solved range")));
    }
    let mut logs = vec![0.0; n - 1];
    for k in 0..n - 1 {
        logs[k] = log_factor(gamma, params.beta.at(k), g[k])?;
    }
    let ge = g[n - 1];
    let (tail, tail_bound) = match params.beta.tail_constant() {
        Some(b) if b != 0.0 => {
            // sum_{k >= N} f(g_k) with g_k - g_{k+1} = b g_k^2 is the Riemann
            // sum of int_0^{g_N} f(t) / (b t^2) dt.
            let integrand = |t: f64| {
                if t == 0.0 {
                    b * (gamma * gamma - gamma) / 2.0
                } else {
                    (gamma * (-b * t).ln_1p() - (-gamma * b * t).ln_1p()) / (b * t * t)
                }
            };
            let m = 200;
            let h = ge / m as f64;
            let mut s = integrand(0.0) + integrand(ge);
            for i in 1..m {
                s += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let est = s * h / 3.0;
            (est, est.abs() * ge.max(1e-300) * 4.0 + 1e-15)
        }
        _ => {
            let tail_sq = match params.beta.tail {
                TailRule::Zero => 0.0,
                TailRule::Constant { .. } => 0.0,
                TailRule::Geometric { value, ratio } => {
                    let k = (n - 1).saturating_sub(params.beta.prefix_len());
                    let first = value * crate::params::int_pow(ratio, k);
                    first * first / (1.0 - ratio * ratio).max(1e-300)
                }
            };
            let bound = gamma * (gamma + 1.0) * tail_sq * ge * ge / (1.0 - gamma * G_CAP).abs().max(1e-3);
            (0.0, bound)
        }
    };
    let total: f64 = logs[j..].iter().sum::<f64>() + tail;
    let c_j = total.exp();
    let mut out = Vec::with_capacity(samples.len());
    let mut fitted: f64 = 0.0;
    for &l in samples {
        if l < j || l + 1 >= n {
            return Err(FlowError::InvalidInput(format!("sample l = {l} outside [{j}, {})", n - 1)));
        }
        let mut log_prod = 0.0;
        for k in j..=l {
            log_prod -= (-gamma * params.beta.at(k) * g[k]).ln_1p();
        }
        let log_ratio = log_prod - gamma * (g[j] / g[l + 1]).ln() - total;
        let ratio = log_ratio.exp();
        let chi_g = sol.cutoff.chi(l) * g[l];
        fitted = fitted.max((ratio - 1.0).abs() / chi_g);
        out.push(ProductSample { l, ratio, chi_g });
    }
    Ok(ProductAsymptotic {
        gamma,
        j,
        c_j,
        tail_bound,
        samples: out,
        fitted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumCertificate {
    pub n: f64,
    pub m: f64,
    pub j: usize,
    pub k: usize,
    pub lhs: f64,
    pub envelope: f64,
    pub ratio: f64,
    /// Same ratio with `k` doubled.
    pub ratio_doubled: f64,
    pub stable: bool,
}

pub const STABILITY_THRESHOLD: f64 = 0.10;

fn sum_ratio(n: f64, m: f64, j: usize, k: usize, g: &[f64], cutoff: &CutoffData) -> (f64, f64) {
    let mut lhs = 0.0;
    for (l, &gl) in g.iter().enumerate().take(k + 1).skip(j) {
        lhs += cutoff.chi(l) * gl.powf(n) * gl.ln().abs().powf(m);
    }
    let env = if n == 1.0 {
        g[k].ln().abs().powf(m + 1.0)
    } else {
        cutoff.chi(j) * g[j].powf(n - 1.0) * g[j].ln().abs().powf(m)
    };
    (lhs, env)
}

/// Observed constant in `sum_{l=j}^{k} chi_l gbar_l^n |log gbar_l|^m <= C * envelope`.
pub fn sum_certificate(
    n: f64,
    m: f64,
    j: usize,
    k: usize,
    sol: &QuadraticSolution,
    params: &ParamSeq,
) -> Result<SumCertificate> {
    if k < j {
        return Err(FlowError::InvalidInput("need k >= j".into()));
    }
    if !(n >= 1.0 && m >= 0.0) {
        return Err(FlowError::InvalidInput("need n >= 1 and m >= 0".into()));
    }
    let mut g = sol.gbar_ext.clone();
    if g.len() <= 2 * k {
        extend_gbar(&mut g, params, 2 * k)?;
    }
    let (lhs, envelope) = sum_ratio(n, m, j, k, &g, &sol.cutoff);
    let (lhs2, env2) = sum_ratio(n, m, j, 2 * k.max(1), &g, &sol.cutoff);
    let ratio = lhs / envelope;
    let ratio_doubled = lhs2 / env2;
    let stable = (ratio_doubled - ratio).abs() <= STABILITY_THRESHOLD * ratio.abs().max(ratio_doubled.abs());
    Ok(SumCertificate {
        n,
        m,
        j,
        k,
        lhs,
        envelope,
        ratio,
        ratio_doubled,
        stable,
    })
}
