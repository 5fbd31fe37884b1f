//! Numerical checks of the standing assumptions on the coefficients and on
//! the perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{model_jacobian, DomainSpec, Envelope, PerturbationModel};
use crate::params::{cutoff_time, CutoffData, ParamSeq, Sequence, TailRule};
use crate::quadratic::{solve_quadratic_bvp, QuadraticOptions, VTriple};
use crate::spaces::WeightScheme;

/// Boundedness of `beta` and the count of small entries before the cut-off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A1Report {
    pub beta_sup: f64,
    pub j_omega: Option<usize>,
    /// Number of indices inspected (`j <= min(j_omega, horizon)`).
    pub scanned: usize,
    /// Largest `c` among the observed `|beta_j|` with at most `floor(1/c)`
    /// indices below it; zero when none qualifies.
    pub c: f64,
    pub exceptional: usize,
    pub exceptional_indices: Vec<usize>,
    pub pass: bool,
}

pub fn check_a1(params: &ParamSeq, horizon: usize) -> Result<A1Report> {
    let cutoff = cutoff_time(params)?;
    let beta = &params.beta;
    let beta_sup = beta.sup_abs();
    let last = cutoff.j_omega.map_or(horizon, |k| k.min(horizon));
    let values: Vec<f64> = (0..=last).map(|j| beta.at(j)).collect();

    let mut candidates: Vec<f64> = values.iter().map(|b| b.abs()).filter(|&b| b > 0.0).collect();
    candidates.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    candidates.dedup();

    let mut best = None;
    for &c in &candidates {
        let below = values.iter().filter(|&&b| b < c).count();
        if below as f64 <= (1.0 / c).floor() {
            best = Some((c, below));
            break;
        }
    }
    let (c, exceptional, pass) = match best {
        Some((c, n)) => (c, n, beta_sup.is_finite()),
        // A single non-positive entry is admissible for any c <= 1.
        None if values.len() <= 1 => (1.0, values.len(), beta_sup.is_finite()),
        None => (0.0, values.len(), false),
    };
    let exceptional_indices = values
        .iter()
        .enumerate()
        .filter(|(_, &b)| b < c)
        .map(|(j, _)| j)
        .collect();
    Ok(A1Report {
        beta_sup,
        j_omega: cutoff.j_omega,
        scanned: values.len(),
        c,
        exceptional,
        exceptional_indices,
        pass,
    })
}

/// Expansion of `mu`, sign of `zeta` before the cut-off and the `chi`
/// envelope of the remaining coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2Report {
    pub lambda_min: f64,
    pub lambda_offending_index: Option<usize>,
    pub lambda_pass: bool,
    /// `None` when infinitely many entries are positive.
    pub zeta_positive_count: Option<usize>,
    pub zeta_pass: bool,
    /// Smallest `C` with `|coef_j| <= C chi_j` over the scanned range.
    pub c_env: f64,
    pub c_env_name: Option<String>,
    pub c_env_index: Option<usize>,
    pub env_pass: bool,
    pub pass: bool,
}

impl A2Report {
    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if !self.lambda_pass {
            match self.lambda_offending_index {
                Some(j) => parts.push(format!("lambda_{j} <= 1 (min {})", self.lambda_min)),
                None => parts.push(format!("inf lambda = {} <= 1", self.lambda_min)),
            }
        }
        if !self.zeta_pass {
            parts.push("zeta positive at infinitely many indices before the cut-off".to_string());
        }
        if !self.env_pass {
            parts.push(format!(
                "{} not bounded by a multiple of chi",
                self.c_env_name.as_deref().unwrap_or("a coefficient")
            ));
        }
        if parts.is_empty() {
            "ok".to_string()
        } else {
            parts.join("; ")
        }
    }
}

/// Whether `|s_j| / chi_j` stays bounded on the tail.
fn tail_enveloped(s: &Sequence, cutoff: &CutoffData) -> bool {
    if cutoff.j_omega.is_none() {
        return true;
    }
    match s.tail {
        TailRule::Zero => true,
        TailRule::Constant { value } => value == 0.0,
        TailRule::Geometric { value, ratio } => value == 0.0 || ratio.abs() * cutoff.omega <= 1.0,
    }
}

pub fn check_a2(params: &ParamSeq, cutoff: &CutoffData, horizon: usize) -> Result<A2Report> {
    params.validate()?;
    let lambda = &params.lambda;
    let scan = horizon.max(params.prefix_len());

    let mut lambda_min = f64::INFINITY;
    let mut lambda_offending_index = None;
    for j in 0..=scan {
        let l = lambda.at(j);
        if l < lambda_min {
            lambda_min = l;
        }
        if l <= 1.0 && lambda_offending_index.is_none() {
            lambda_offending_index = Some(j);
        }
    }
    lambda_min = lambda_min.min(lambda.tail_inf(scan + 1));
    let lambda_pass = lambda_min > 1.0;

    let zeta = &params.zeta;
    let zeta_positive_count = match cutoff.j_omega {
        Some(k) => Some((0..=k).filter(|&j| zeta.at(j) > 0.0).count()),
        None => {
            let head = zeta.prefix.iter().filter(|&&z| z > 0.0).count();
            match zeta.tail {
                TailRule::Zero => Some(head),
                TailRule::Constant { value } if value <= 0.0 => Some(head),
                TailRule::Geometric { value, ratio } if value == 0.0 || (value < 0.0 && ratio >= 0.0) => {
                    Some(head)
                }
                TailRule::Geometric { ratio, .. } if ratio == 0.0 => Some(head + 1),
                _ => None,
            }
        }
    };
    let zeta_pass = zeta_positive_count.is_some();

    let mut c_env = 0.0f64;
    let mut c_env_name = None;
    let mut c_env_index = None;
    let mut env_pass = true;
    for (name, s) in params.enveloped() {
        for j in 0..=scan {
            let r = s.at(j).abs() * cutoff.chi_inv(j);
            if r > c_env {
                c_env = r;
                c_env_name = Some(name.to_string());
                c_env_index = Some(j);
            }
        }
        if !tail_enveloped(s, cutoff) {
            env_pass = false;
            c_env_name = Some(name.to_string());
        }
    }
    env_pass &= c_env.is_finite();

    Ok(A2Report {
        lambda_min,
        lambda_offending_index,
        lambda_pass,
        zeta_positive_count,
        zeta_pass,
        c_env,
        c_env_name,
        c_env_index,
        env_pass,
        pass: lambda_pass && zeta_pass && env_pass,
    })
}

/// Monte-Carlo envelope estimates for a perturbation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A3Report {
    pub samples: usize,
    pub skipped: usize,
    pub kappa_hat: f64,
    pub r_hat: f64,
    pub m_hat: f64,
    /// Contributions to `m_hat`: value of `rho`, `D_K rho`, `D_V` of both
    /// maps, and the second and third derivatives.
    pub m_value: f64,
    pub m_dk_rho: f64,
    pub m_dv: f64,
    pub m_higher: f64,
    pub declared: Envelope,
    pub a: f64,
    pub omega: f64,
    pub kappa_ok: bool,
    pub r_ok: bool,
    pub m_ok: bool,
    /// `0 < kappa < 1/Omega` and `0 < R < a (1 - kappa Omega)` for the
    /// declared constants.
    pub constraint_ok: bool,
    pub pass: bool,
}

fn op_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

type Point = (Vec<f64>, VTriple);

fn shifted(p: &Point, dirs: &[(Vec<f64>, [f64; 3])], signs: &[f64]) -> Point {
    let mut k = p.0.clone();
    let mut v = p.1.as_array();
    for ((dk, dv), s) in dirs.iter().zip(signs) {
        for (a, b) in k.iter_mut().zip(dk) {
            *a += s * b;
        }
        for (a, b) in v.iter_mut().zip(dv) {
            *a += s * b;
        }
    }
    (k, VTriple::from_array(v))
}

/// Mixed central difference of the full output along the given (already
/// scaled) directions; returns the sup norm of the multilinear value per unit
/// step product.
fn mixed_difference(
    model: &dyn PerturbationModel,
    j: usize,
    p: &Point,
    dirs: &[(Vec<f64>, [f64; 3])],
    steps: &[f64],
) -> Option<f64> {
    let n = dirs.len();
    let mut acc: Option<Vec<f64>> = None;
    for mask in 0..(1usize << n) {
        let signs: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let parity: f64 = signs.iter().product();
        let (k, v) = shifted(p, dirs, &signs);
        let mut out = model.psi(j, &k, v);
        let r = model.rho(j, &k, v);
        out.extend_from_slice(&r.as_array());
        if out.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let acc = acc.get_or_insert_with(|| vec![0.0; out.len()]);
        for (a, o) in acc.iter_mut().zip(&out) {
            *a += parity * o;
        }
    }
    let denom = (1u64 << n) as f64 * steps.iter().product::<f64>();
    acc.map(|a| a.iter().fold(0.0f64, |m, x| m.max(x.abs())) / denom)
}

/// Estimate the envelope constants of `model` on the domains built around
/// the reference flow of `scheme`.
pub fn check_a3(
    model: &dyn PerturbationModel,
    scheme: &WeightScheme,
    params: &ParamSeq,
    sample_count: usize,
    rng_seed: u64,
) -> Result<A3Report> {
    let cutoff = cutoff_time(params)?;
    let horizon = scheme.len().saturating_sub(1).max(1);
    let sol = solve_quadratic_bvp(scheme.gring[0], params, &QuadraticOptions::unchecked(horizon))?;
    let dom = DomainSpec::new(&sol, &cutoff, scheme.a, scheme.h);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut kappa_hat = 0.0f64;
    let mut r_hat = 0.0f64;
    let mut m_value = 0.0f64;
    let mut m_dk_rho = 0.0f64;
    let mut m_dv = 0.0f64;
    let mut m_higher = 0.0f64;
    let mut skipped = 0usize;

    for _ in 0..sample_count {
        let j = rng.gen_range(0..horizon);
        let radii = dom.radii(j);
        let dk = model.d_k(j);
        let k: Vec<f64> = (0..dk).map(|_| rng.gen_range(-1.0..=1.0) * radii[0]).collect();
        let vb = dom.center(j);
        let v = VTriple::new(
            vb.g + rng.gen_range(-1.0..=1.0) * radii[1],
            vb.z + rng.gen_range(-1.0..=1.0) * radii[2],
            vb.mu + rng.gen_range(-1.0..=1.0) * radii[3],
        );
        let g1 = dom.gbar(j + 1);
        let env3 = dom.chi(j + 1) * g1.powi(3);
        let env2 = dom.chi(j + 1) * g1 * g1;
        let vscale = g1 * g1 * g1.ln().abs();

        let psi0 = model.psi(j, &vec![0.0; dk], v);
        let rho = model.rho(j, &k, v);
        let jac = model_jacobian(model, j, &k, v, &dom);
        if psi0.iter().any(|x| !x.is_finite()) || !rho.max_abs().is_finite() || !jac.is_finite() {
            skipped += 1;
            continue;
        }
        let dk_out = model.d_k(j + 1);
        let rows: Vec<Vec<f64>> = (0..dk_out + 3).map(|r| jac.row(r).to_vec()).collect();
        let dkpsi: Vec<Vec<f64>> = rows[..dk_out].iter().map(|r| r[..dk].to_vec()).collect();
        let dvpsi: Vec<Vec<f64>> = rows[..dk_out].iter().map(|r| r[dk..].to_vec()).collect();
        let dkrho: Vec<Vec<f64>> = rows[dk_out..].iter().map(|r| r[..dk].to_vec()).collect();
        let dvrho: Vec<Vec<f64>> = rows[dk_out..].iter().map(|r| r[dk..].to_vec()).collect();

        kappa_hat = kappa_hat.max(op_norm(&dkpsi));
        r_hat = r_hat.max(psi0.iter().fold(0.0f64, |m, x| m.max(x.abs())) / env3);
        m_value = m_value.max(rho.max_abs() / env3);
        m_dk_rho = m_dk_rho.max(op_norm(&dkrho));
        m_dv = m_dv.max(op_norm(&dvpsi).max(op_norm(&dvrho)) / env2);

        // Higher derivatives along random sign directions of unit sup norm.
        // Per-coordinate steps; the g step is the sup norm of a V direction.
        let sv = [1e-2 * radii[1], 1e-2 * radii[2], 1e-2 * radii[3]];
        let sk = 1e-2 * radii[0];
        let p = (k.clone(), v);
        for (m, n) in [(2usize, 0usize), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)] {
            if n > 0 && dk == 0 {
                continue;
            }
            let mut dirs = Vec::new();
            let mut steps = Vec::new();
            for _ in 0..m {
                let d: [f64; 3] = std::array::from_fn(|i| if rng.gen_bool(0.5) { sv[i] } else { -sv[i] });
                dirs.push((vec![0.0; dk], d));
                steps.push(sv[0]);
            }
            for _ in 0..n {
                let d: Vec<f64> = (0..dk).map(|_| if rng.gen_bool(0.5) { sk } else { -sk }).collect();
                dirs.push((d, [0.0; 3]));
                steps.push(sk);
            }
            let Some(val) = mixed_difference(model, j, &p, &dirs, &steps) else {
                skipped += 1;
                continue;
            };
            let envelope = env3.powi(1 - n as i32) * vscale.powi(-(m as i32));
            m_higher = m_higher.max(val / envelope);
        }
    }

    let declared = model.declared();
    let m_hat = m_value.max(m_dk_rho).max(m_dv).max(m_higher);
    let omega = params.omega;
    let a = scheme.a;
    let kappa_ok = kappa_hat <= declared.kappa;
    let r_ok = r_hat <= declared.r;
    let m_ok = m_hat <= declared.m;
    let constraint_ok = declared.kappa > 0.0
        && declared.kappa * omega < 1.0
        && declared.r > 0.0
        && declared.r < a * (1.0 - declared.kappa * omega)
        && declared.m > 0.0;
    Ok(A3Report {
        samples: sample_count,
        skipped,
        kappa_hat,
        r_hat,
        m_hat,
        m_value,
        m_dk_rho,
        m_dv,
        m_higher,
        declared,
        a,
        omega,
        kappa_ok,
        r_ok,
        m_ok,
        constraint_ok,
        pass: kappa_ok && r_ok && m_ok && constraint_ok,
    })
}
