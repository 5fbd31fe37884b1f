//! The verification suite: every bound of the construction checked on a
//! built-in instance set, with the measured constant and its tolerance.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rgflow::homotopy::{integrate_homotopy, oracle_compare, refinement_study, sensitivity, solve_flow};
use rgflow::linear::{apply_s, apply_s0, build_w, operator_norm_estimate, s0_residual};
use rgflow::params::cutoff_time;
use rgflow::quadratic::{gbar_derivatives, iterate_gbar, TailPolicy};
use rgflow::spaces::weighted_norm;
use rgflow::{
    solve_quadratic_bvp, Component, CubicMonomial, FlowProblem, FlowSequence, FlowSpec, LinearPsi, ParamSeq,
    PerturbationModel, QuadraticOptions, RandomPolynomial, Sequence, VTriple, Which, ZeroPerturbation,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    ExpectedFail,
    UnexpectedPass,
}

#[derive(Debug, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub property: &'static str,
    /// The quantity compared against `tolerance`.
    pub measured: Option<f64>,
    pub tolerance: f64,
    pub holds: bool,
    pub expected_to_hold: bool,
    pub status: Status,
    pub constants: BTreeMap<String, f64>,
    pub detail: String,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        matches!(self.status, Status::Pass | Status::ExpectedFail)
    }
}

struct Measure {
    value: f64,
    holds: bool,
    constants: BTreeMap<String, f64>,
    detail: String,
}

type CheckFn = fn(u64) -> rgflow::Result<Measure>;

struct Check {
    name: &'static str,
    property: &'static str,
    tolerance: f64,
    expected_to_hold: bool,
    run: CheckFn,
}

const CHECKS: &[Check] = &[
    Check {
        name: "constant-beta-asymptotics",
        property: "gbar_J (1/g0 + J) within 20% of one for beta = 1, g0 = 0.01, J = 1e5",
        tolerance: 0.2,
        expected_to_hold: true,
        run: constant_beta,
    },
    Check {
        name: "abrupt-cutoff",
        property: "gbar frozen past a cut at 100 and within 20% of 1/100",
        tolerance: 0.2,
        expected_to_hold: true,
        run: abrupt_cutoff,
    },
    Check {
        name: "quadratic-envelope",
        property: "z and mu envelopes stable within 5% under horizon doubling",
        tolerance: 0.05,
        expected_to_hold: true,
        run: quadratic_envelope,
    },
    Check {
        name: "quadratic-envelope-counterexample",
        property: "the z envelope for zeta = theta = beta = 1 is not stable under horizon doubling",
        tolerance: 0.05,
        expected_to_hold: false,
        run: counterexample,
    },
    Check {
        name: "s0-exactness",
        property: "relative residual of the unperturbed linear solve",
        tolerance: 1e-12,
        expected_to_hold: true,
        run: s0_exactness,
    },
    Check {
        name: "neumann-contraction",
        property: "fixed-point contraction of the corrected linear solve",
        tolerance: 0.5,
        expected_to_hold: true,
        run: neumann_contraction,
    },
    Check {
        name: "homotopy-reduction",
        property: "the flow equals the reference when rho vanishes",
        tolerance: 1e-8,
        expected_to_hold: true,
        run: homotopy_reduction,
    },
    Check {
        name: "oracle-triangle",
        property: "homotopy, shooting and sweep agree",
        tolerance: 1e-7,
        expected_to_hold: true,
        run: oracle_triangle,
    },
    Check {
        name: "theorem-ball",
        property: "largest clause ratio of the computed flow against b",
        tolerance: 0.9,
        expected_to_hold: true,
        run: theorem_ball,
    },
    Check {
        name: "derivative-boundedness",
        property: "spread of |dz0/dg0| and |dmu0/dg0| over g0 = 0.1 / 2^k, k = 0..5, with no upward trend",
        tolerance: 0.5,
        expected_to_hold: true,
        run: derivative_boundedness,
    },
    Check {
        name: "derivative-formulas",
        property: "analytic g0-derivatives against central differences, relative",
        tolerance: 1e-5,
        expected_to_hold: true,
        run: derivative_formulas,
    },
    Check {
        name: "s0-norm-independence",
        property: "spread of the unperturbed solve norm over a 3x3 grid in (a, h)",
        tolerance: 0.1,
        expected_to_hold: true,
        run: s0_norm_independence,
    },
    Check {
        name: "continuity-sweep",
        property: "reciprocal of the smallest shrink factor under grid halving in the beta scale",
        tolerance: 1.0 / 1.8,
        expected_to_hold: true,
        run: continuity_sweep,
    },
];

pub fn names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.name).collect()
}

/// Runs the whole suite, or the one check called `only`.
pub fn run(only: Option<&str>, seed: u64) -> Result<Vec<CheckReport>, String> {
    let selected: Vec<&Check> = match only {
        Some(n) => {
            let c = CHECKS
                .iter()
                .find(|c| c.name == n)
                .ok_or_else(|| format!("unknown check {n:?}; available: {}", names().join(", ")))?;
            vec![c]
        }
        None => CHECKS.iter().collect(),
    };
    Ok(selected.into_iter().map(|c| run_one(c, seed)).collect())
}

fn run_one(c: &Check, seed: u64) -> CheckReport {
    let (measured, holds, constants, detail) = match (c.run)(seed) {
        Ok(m) => (Some(m.value), m.holds && m.value <= c.tolerance, m.constants, m.detail),
        Err(e) => (None, false, BTreeMap::new(), format!("error: {e}")),
    };
    let status = match (holds, c.expected_to_hold) {
        (true, true) => Status::Pass,
        (false, true) => Status::Fail,
        (false, false) => Status::ExpectedFail,
        (true, false) => Status::UnexpectedPass,
    };
    CheckReport {
        name: c.name,
        property: c.property,
        measured,
        tolerance: c.tolerance,
        holds,
        expected_to_hold: c.expected_to_hold,
        status,
        constants,
        detail,
    }
}

fn measure(value: f64, holds: bool, constants: &[(&str, f64)], detail: String) -> Measure {
    Measure {
        value,
        holds,
        constants: constants.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        detail,
    }
}

fn rel_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().cloned().fold(0.0, f64::max);
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    (hi - lo) / hi
}

/// Couplings switched off after `cut`, `beta` of height `b`.
fn standard(cut: usize, lambda: f64, b: f64) -> ParamSeq {
    ParamSeq {
        beta: Sequence::cut(b, cut),
        eta: Sequence::cut(0.3, cut),
        gamma: Sequence::cut(0.2, cut),
        lambda: Sequence::constant(lambda),
        theta: Sequence::cut(0.5, cut),
        zeta: Sequence::cut(-0.3, cut),
        ups_gg: Sequence::cut(0.1, cut),
        ups_zz: Sequence::cut(0.1, cut),
        ..ParamSeq::default()
    }
}

fn random_admissible(seed: u64) -> ParamSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = rng.gen_range(20..80);
    let mut small = |s: f64| Sequence::cut(rng.gen_range(-s..=s), cut);
    let (eta, gamma, theta) = (small(0.5), small(0.5), small(0.5));
    let (ups_gg, ups_gz, ups_gmu, ups_zz, ups_zmu) = (small(0.2), small(0.2), small(0.2), small(0.2), small(0.2));
    ParamSeq {
        beta: Sequence::cut(rng.gen_range(0.5..1.0), cut),
        zeta: Sequence::cut(-rng.gen_range(0.0..0.5), cut),
        lambda: Sequence::constant(rng.gen_range(1.5..3.0)),
        eta,
        gamma,
        theta,
        ups_gg,
        ups_gz,
        ups_gmu,
        ups_zz,
        ups_zmu,
        ..ParamSeq::default()
    }
}

fn cubic(params: &ParamSeq) -> rgflow::Result<Arc<dyn PerturbationModel>> {
    Ok(Arc::new(CubicMonomial::new(0.25, 0.25, 0.2, cutoff_time(params)?)))
}

fn spec(params: ParamSeq, model: Arc<dyn PerturbationModel>, horizon: Option<usize>) -> FlowSpec {
    let mut s = FlowSpec::new(params, model);
    s.quad.horizon = horizon;
    s
}

/// Uniform noise on every entry but the first, scaled by the `v`-weights.
fn v_forcing(p: &FlowProblem, seed: u64) -> FlowSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = &p.scheme;
    let mut r = FlowSequence::zeros(&p.xring.dims());
    let mut u = || rng.gen_range(-1.0..=1.0);
    for j in 1..r.len() {
        for k in r.k[j].iter_mut() {
            *k = s.v(Component::K, j) * u();
        }
        r.v[j] = VTriple::new(
            s.v(Component::G, j) * u(),
            s.v(Component::Z, j) * u(),
            s.v(Component::Mu, j) * u(),
        );
    }
    r
}

fn constant_beta(_: u64) -> rgflow::Result<Measure> {
    let p = ParamSeq {
        beta: Sequence::constant(1.0),
        ..ParamSeq::default()
    };
    let (g0, n) = (0.01, 100_000usize);
    let g = iterate_gbar(g0, &p, n)?;
    let lead = 1.0 / g0 + n as f64;
    let ratio = g[n] * lead;
    let excess = 1.0 / g[n] - lead;
    let allowance = 2.0 * (1.0 + n as f64 * g0).ln() + 10.0;
    Ok(measure(
        (ratio - 1.0).abs(),
        excess <= allowance,
        &[("ratio", ratio), ("log_excess", excess)],
        format!("ratio {ratio:.6}, excess {excess:.4} against {allowance:.4}"),
    ))
}

fn abrupt_cutoff(_: u64) -> rgflow::Result<Measure> {
    let p = ParamSeq {
        beta: Sequence::cut(1.0, 100),
        ..ParamSeq::default()
    };
    let g = iterate_gbar(0.1, &p, 1000)?;
    let flat = g[101..].iter().all(|&x| x == g[101]);
    let dev = (g[101] - 0.01).abs() / 0.01;
    Ok(measure(
        dev,
        flat,
        &[("gbar_frozen", g[101])],
        format!("bit-exact past the cut: {flat}"),
    ))
}

fn quadratic_envelope(seed: u64) -> rgflow::Result<Measure> {
    let mut worst: f64 = 0.0;
    let mut zmax: f64 = 0.0;
    let mut mumax: f64 = 0.0;
    for s in 0..3 {
        let p = random_admissible(seed.wrapping_add(s));
        let a = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(1000))?;
        let b = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(2000))?;
        worst = worst
            .max(rel_change(a.z_envelope, b.z_envelope))
            .max(rel_change(a.mu_envelope, b.mu_envelope));
        zmax = zmax.max(b.z_envelope);
        mumax = mumax.max(b.mu_envelope);
    }
    Ok(measure(
        worst,
        true,
        &[("z_envelope", zmax), ("mu_envelope", mumax)],
        "3 random admissible sets, horizon 1000 against 2000".into(),
    ))
}

fn counterexample(_: u64) -> rgflow::Result<Measure> {
    let p = ParamSeq {
        beta: Sequence::constant(1.0),
        theta: Sequence::constant(1.0),
        zeta: Sequence::constant(1.0),
        ..ParamSeq::default()
    };
    let env = |n: usize| -> rgflow::Result<f64> {
        let opts = QuadraticOptions {
            tail: TailPolicy::Truncate,
            ..QuadraticOptions::unchecked(n)
        };
        let sol = solve_quadratic_bvp(0.05, &p, &opts)?;
        Ok(sol.vbar.iter().map(|v| v.z.abs() / v.g).fold(0.0, f64::max))
    };
    let (a, b) = (env(1000)?, env(2000)?);
    Ok(measure(
        rel_change(a, b),
        true,
        &[("z_envelope_1000", a), ("z_envelope_2000", b)],
        format!("sup |z|/g grows {a:.4} -> {b:.4}"),
    ))
}

fn s0_exactness(seed: u64) -> rgflow::Result<Measure> {
    let mut res: f64 = 0.0;
    for s in 0..3 {
        let params = random_admissible(seed.wrapping_add(s));
        let p = spec(params, Arc::new(ZeroPerturbation::default()), Some(50)).problem(0.04)?;
        let r = v_forcing(&p, seed.wrapping_add(100 + s));
        let (y, _) = apply_s0(&r, &p.blocks, None)?;
        res = res.max(s0_residual(&y, &r, &p.blocks));
    }
    Ok(measure(res, true, &[], "J = 50, 3 random admissible sets".into()))
}

fn neumann_contraction(seed: u64) -> rgflow::Result<Measure> {
    let params = standard(40, 2.0, 1.0);
    let cut = cutoff_time(&params)?;
    let models: Vec<Arc<dyn PerturbationModel>> = vec![
        Arc::new(ZeroPerturbation::default()),
        Arc::new(LinearPsi::new(0.2)),
        Arc::new(CubicMonomial::new(0.25, 0.25, 0.2, cut)),
        Arc::new(RandomPolynomial::new(seed, 1, 0.2, 0.3, 0.1, 0.2, cut)),
    ];
    let tol = 1e-13;
    let (mut contraction, mut residual) = (0.0f64, 0.0f64);
    for model in models {
        let p = spec(params.clone(), model, None).problem(0.05)?;
        for t in [0.0, 1.0] {
            let w = build_w(t, &p.xbar, p.model.as_ref(), &p.params, &p.xring, &p.dom, &p.scheme, Some(0.5))?;
            let (_, rep) = apply_s(&v_forcing(&p, seed), &p.blocks, &w, &p.scheme, tol, 300)?;
            contraction = contraction.max(rep.contraction);
            residual = residual.max(rep.residual);
        }
    }
    Ok(measure(
        contraction,
        residual <= 10.0 * tol,
        &[("residual", residual)],
        format!("4 built-in models at g0 = 0.05, residual {residual:.2e} against {:.0e}", 10.0 * tol),
    ))
}

fn homotopy_reduction(_: u64) -> rgflow::Result<Measure> {
    let params = standard(40, 2.0, 1.0);
    let p = spec(params, Arc::new(LinearPsi::new(0.2)), None).problem(0.05)?;
    let r = integrate_homotopy(&p)?;
    let gap = weighted_norm(&r.x_final.sub(&p.xbar), &p.scheme, Which::W)?;
    Ok(measure(gap, true, &[], "psi linear, rho zero".into()))
}

fn oracle_triangle(seed: u64) -> rgflow::Result<Measure> {
    let params = standard(15, 1.5, 1.0);
    let cut = cutoff_time(&params)?;
    let model = Arc::new(RandomPolynomial::new(seed, 1, 0.2, 0.3, 0.1, 0.2, cut));
    let p = spec(params, model, Some(50)).problem(0.05)?;
    let g = oracle_compare(&p, 1e-13, 1e-13, 500)?;
    Ok(measure(
        g.max_gap(),
        true,
        &[
            ("homotopy_shooting", g.homotopy_shooting),
            ("homotopy_sweep", g.homotopy_sweep),
            ("shooting_sweep", g.shooting_sweep),
        ],
        "J = 50".into(),
    ))
}

fn theorem_ball(_: u64) -> rgflow::Result<Measure> {
    let params = standard(40, 2.0, 1.0);
    let s = FlowSpec::new(params.clone(), cubic(&params)?);
    let mut worst: f64 = 0.0;
    let mut holds = true;
    for g0 in [0.02, 0.05] {
        let (_, r) = solve_flow(&s, g0)?;
        holds &= r.ball_pass;
        worst = worst.max(r.ball.k).max(r.ball.g).max(r.ball.z).max(r.ball.mu);
    }
    Ok(measure(worst, holds, &[], "cubic model at g0 in {0.02, 0.05}".into()))
}

fn derivative_boundedness(_: u64) -> rgflow::Result<Measure> {
    let params = standard(400, 2.0, 0.8);
    let s = FlowSpec::new(params.clone(), cubic(&params)?);
    let (mut dz, mut dmu) = (Vec::new(), Vec::new());
    for k in 0..6 {
        let g0 = 0.1 * 0.5f64.powi(k);
        let r = sensitivity(&s, g0, 0.05 * g0)?;
        dz.push(r.richardson_dz.abs());
        dmu.push(r.richardson_dmu.abs());
    }
    let ks = [3.0, 4.0, 5.0];
    let trend = |v: &[f64]| {
        let my = v[3..].iter().sum::<f64>() / 3.0;
        (0..3).map(|i| (ks[i] - 4.0) * (v[3 + i] - my)).sum::<f64>() / 2.0
    };
    let (tz, tm) = (trend(&dz), trend(&dmu));
    let bound = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    Ok(measure(
        spread(&dz).max(spread(&dmu)),
        tz <= 0.0 && tm <= 0.0,
        &[("dz0_dg0_bound", bound(&dz)), ("dmu0_dg0_bound", bound(&dmu)), ("dz_trend", tz), ("dmu_trend", tm)],
        "trend is the slope over the three smallest g0 per halving".into(),
    ))
}

fn derivative_constants(p: &ParamSeq, g0: f64, horizon: usize) -> rgflow::Result<[f64; 3]> {
    let sol = solve_quadratic_bvp(g0, p, &QuadraticOptions::with_horizon(horizon))?;
    let d = gbar_derivatives(&sol, p);
    let mut c = [0.0f64; 3];
    for j in 0..=horizon {
        let s = (sol.vbar[j].g / g0).powi(2);
        c[0] = c[0].max(d.dg[j].abs() / s);
        c[1] = c[1].max(d.dz[j].abs() / (sol.chi[j] * s));
        c[2] = c[2].max(d.dmu[j].abs() / (sol.chi[j] * s));
    }
    Ok(c)
}

fn derivative_formulas(_: u64) -> rgflow::Result<Measure> {
    let (g0, n) = (0.05, 1000);
    let p = standard(40, 2.0, 1.0);
    let opts = QuadraticOptions::with_horizon(n);
    let sol = solve_quadratic_bvp(g0, &p, &opts)?;
    let d = gbar_derivatives(&sol, &p);
    let h = 1e-4 * g0;
    let up = solve_quadratic_bvp(g0 + h, &p, &opts)?;
    let dn = solve_quadratic_bvp(g0 - h, &p, &opts)?;
    let mut err: f64 = 0.0;
    for j in 0..=n {
        let (a, b) = (up.vbar[j], dn.vbar[j]);
        let fd = [(a.g - b.g) / (2.0 * h), (a.z - b.z) / (2.0 * h), (a.mu - b.mu) / (2.0 * h)];
        let an = [d.dg[j], d.dz[j], d.dmu[j]];
        for i in 0..3 {
            let scale = an[i].abs().max(fd[i].abs());
            if scale > 0.0 {
                err = err.max((fd[i] - an[i]).abs() / scale);
            }
        }
    }
    let wide = standard(400, 2.0, 1.0);
    let a = derivative_constants(&wide, g0, 1000)?;
    let b = derivative_constants(&wide, g0, 2000)?;
    let drift = (0..3).map(|i| rel_change(a[i], b[i])).fold(0.0, f64::max);
    Ok(measure(
        err,
        drift <= 0.1,
        &[("g", b[0]), ("z", b[1]), ("mu", b[2]), ("drift", drift)],
        format!("fitted constants drift {drift:.2e} under horizon doubling (limit 0.1)"),
    ))
}

fn s0_norm_independence(seed: u64) -> rgflow::Result<Measure> {
    let p = spec(standard(40, 2.0, 1.0), Arc::new(ZeroPerturbation::default()), Some(200)).problem(0.05)?;
    let dims = p.xring.dims();
    let op = |r: &FlowSequence| apply_s0(r, &p.blocks, None).map(|x| x.0);
    let mut est = Vec::new();
    for sa in [0.5, 1.0, 2.0] {
        for sh in [0.5, 1.0, 2.0] {
            let s = p.scheme.with_ah(sa * p.scheme.a, sa * p.scheme.a_star, sh * p.scheme.h);
            est.push(operator_norm_estimate(&op, &dims, &s, Which::V, Which::W, 200, seed)?);
        }
    }
    let hi = est.iter().cloned().fold(0.0, f64::max);
    Ok(measure(spread(&est), true, &[("norm", hi)], "200 probes per grid point".into()))
}

fn continuity_sweep(_: u64) -> rgflow::Result<Measure> {
    let family = |m: f64| -> rgflow::Result<FlowSpec> {
        let mut params = standard(100, 2.0, 1.0);
        params.beta = Sequence::cut(m, 100);
        Ok(spec(params.clone(), cubic(&params)?, Some(400)))
    };
    let rep = refinement_study(&family, 0.9, 1.1, 2, 4, 0.05, 400)?;
    let min = rep.shrink_factors.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(measure(
        1.0 / min,
        rep.failures == 0,
        &[("min_shrink", min)],
        format!("shrink factors {:.3?}", rep.shrink_factors),
    ))
}
