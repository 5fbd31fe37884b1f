mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgflow::params::{cutoff_time, StepCoeffs};
use rgflow::quadratic::{
    gbar_derivatives, iterate_gbar, product_asymptotic, quadratic_step, sum_certificate, QuadraticOptions,
};
use rgflow::{solve_quadratic_bvp, ParamSeq, Sequence, TailRule, VTriple};

fn beta_one() -> ParamSeq {
    ParamSeq {
        beta: Sequence::constant(1.0),
        ..ParamSeq::default()
    }
}

/// `x^T Q x` for a symmetric 3x3 `Q`.
fn form(q: [[f64; 3]; 3], x: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += x[i] * q[i][j] * x[j];
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn step_matches_explicit_quadratic_forms(c in proptest::array::uniform11(-2.0f64..2.0),
                                             v in proptest::array::uniform3(-1.0f64..1.0)) {
        let k = StepCoeffs {
            beta: c[0], eta: c[1], gamma: c[2], lambda: c[3], theta: c[4], zeta: c[5],
            ups_gg: c[6], ups_gz: c[7], ups_gmu: c[8], ups_zz: c[9], ups_zmu: c[10],
        };
        let qg = [[k.beta, 0.0, 0.0], [0.0; 3], [0.0; 3]];
        let qz = [[k.theta, k.zeta / 2.0, 0.0], [k.zeta / 2.0, 0.0, 0.0], [0.0; 3]];
        let qm = [
            [k.ups_gg, k.ups_gz / 2.0, k.ups_gmu / 2.0],
            [k.ups_gz / 2.0, k.ups_zz, k.ups_zmu / 2.0],
            [k.ups_gmu / 2.0, k.ups_zmu / 2.0, 0.0],
        ];
        let want = [
            v[0] - form(qg, v),
            v[1] - form(qz, v),
            k.eta * v[0] + k.gamma * v[1] + k.lambda * v[2] - form(qm, v),
        ];
        let got = quadratic_step(VTriple::from_array(v), &k).as_array();
        for i in 0..3 {
            prop_assert!((got[i] - want[i]).abs() <= 1e-14 * (1.0 + want[i].abs()));
        }
    }

    #[test]
    fn gbar_monotone_in_each_beta(prefix in proptest::collection::vec(0.0f64..1.0, 30),
                                  k in 0usize..30, bump in 0.0f64..0.5) {
        let p = ParamSeq { beta: Sequence::new(prefix.clone(), TailRule::Zero), ..ParamSeq::default() };
        let mut raised = prefix.clone();
        raised[k] += bump;
        let q = ParamSeq { beta: Sequence::new(raised, TailRule::Zero), ..ParamSeq::default() };
        let a = iterate_gbar(0.05, &p, 60).unwrap();
        let b = iterate_gbar(0.05, &q, 60).unwrap();
        for j in 0..=60 {
            prop_assert!(b[j] <= a[j]);
        }
    }

    #[test]
    fn forward_residual_is_tiny(seed in 0u64..10_000) {
        let p = common::random_admissible(seed);
        let sol = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(300)).unwrap();
        prop_assert!(sol.forward_residual <= 1e-13, "{}", sol.forward_residual);
        prop_assert!(sol.vbar.iter().all(|v| v.g > 0.0));
    }
}

#[test]
fn gbar_constant_beta_asymptotics() {
    let g = iterate_gbar(0.01, &beta_one(), 100_000).unwrap();
    let r = g[100_000] * (1.0 / 0.01 + 100_000.0);
    assert!((0.8..=1.2).contains(&r), "{r}");
}

#[test]
fn zbar_matches_brute_force_partial_sums() {
    let p = ParamSeq {
        theta: Sequence::constant(1.0),
        ..beta_one()
    };
    let sol = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(200)).unwrap();
    for j in [0usize, 50, 200] {
        let mut g = sol.vbar[j].g;
        let mut s = 0.0;
        loop {
            let inc = g * g;
            if inc < 1e-15 {
                break;
            }
            s += inc;
            g -= inc;
        }
        // the neglected remainder sums to the last g exactly (telescoping)
        let z = sol.vbar[j].z;
        assert!((z - s).abs() <= g * (1.0 + 1e-6), "j = {j}: {z} vs {s} (+{g})");
        assert!((z - s - g).abs() <= 1e-12 * z, "j = {j}");
    }
}

/// Independent backward iteration of the `mu` recursion from zero, far past
/// the horizon.
fn mu_backward(g: &[f64], z: &[f64], p: &ParamSeq) -> Vec<f64> {
    let n = g.len();
    let mut mu = vec![0.0; n];
    for j in (0..n - 1).rev() {
        let c = p.at(j);
        let sigma = c.eta * g[j] + c.gamma * z[j] - c.ups_gg * g[j] * g[j] - c.ups_gz * g[j] * z[j] - c.ups_zz * z[j] * z[j];
        let tau = c.ups_gmu * g[j] + c.ups_zmu * z[j];
        mu[j] = (mu[j + 1] - sigma) / (c.lambda - tau);
    }
    mu
}

#[test]
fn mubar_matches_brute_force_backward_iteration() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut small = |s: f64| Sequence::constant(rng.gen_range(-s..=s));
        let p = ParamSeq {
            beta: Sequence::constant(1.0),
            eta: small(0.5),
            gamma: small(0.5),
            theta: small(0.5),
            ups_gg: small(0.2),
            ups_gz: small(0.2),
            ups_gmu: small(0.2),
            ups_zz: small(0.2),
            ups_zmu: small(0.2),
            zeta: Sequence::constant(-0.2),
            lambda: Sequence::constant(2.0),
            ..ParamSeq::default()
        };
        let j_main = 300;
        let sol = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(j_main)).unwrap();
        let long = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(j_main + 200)).unwrap();
        let mu = mu_backward(&long.gbar(), &long.zbar(), &p);
        let scale = mu.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for j in 0..=j_main {
            assert!(
                (sol.vbar[j].mu - mu[j]).abs() <= 1e-12 * scale,
                "seed {seed} j {j}: {} vs {}",
                sol.vbar[j].mu,
                mu[j]
            );
        }
    }
}

#[test]
fn derivatives_match_finite_differences() {
    let p = beta_one();
    let sol = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(500)).unwrap();
    let d = gbar_derivatives(&sol, &p);
    let h = 1e-7 * 0.05;
    let up = iterate_gbar(0.05 + h, &p, 500).unwrap();
    let dn = iterate_gbar(0.05 - h, &p, 500).unwrap();
    for j in 0..=500 {
        let fd = (up[j] - dn[j]) / (2.0 * h);
        assert!(d.dg[j] > 0.0);
        assert!((d.dg[j] - fd).abs() <= 1e-5 * fd.abs(), "j {j}: {} vs {fd}", d.dg[j]);
    }
}

fn gprime_constant(g0: f64, horizon: usize) -> f64 {
    let p = beta_one();
    let sol = solve_quadratic_bvp(g0, &p, &QuadraticOptions::with_horizon(horizon)).unwrap();
    let d = gbar_derivatives(&sol, &p);
    (0..=horizon)
        .map(|j| {
            let g = sol.vbar[j].g;
            (d.dg[j] * (g0 / g).powi(2) - 1.0).abs() / g0
        })
        .fold(0.0, f64::max)
}

#[test]
fn gbar_prime_shape_constant_is_stable() {
    let a = gprime_constant(0.05, 2000);
    let b = gprime_constant(0.05, 4000);
    assert!(a.is_finite() && a < 10.0, "{a}");
    assert!(common::rel_change(a, b) <= 0.10, "{a} vs {b}");
}

#[test]
fn product_asymptotic_within_envelope() {
    let p = beta_one();
    let sol = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::with_horizon(1100)).unwrap();
    let rep = product_asymptotic(2.0, 0, &sol, &p, &[1000]).unwrap();
    let s = rep.samples[0];
    assert!((s.ratio - 1.0).abs() <= 5.0 * s.chi_g, "{s:?}");
}

#[test]
fn sum_certificates() {
    let p = beta_one();
    let sol = solve_quadratic_bvp(0.1, &p, &QuadraticOptions::with_horizon(1000)).unwrap();
    let single = sum_certificate(2.0, 0.0, 7, 7, &sol, &p).unwrap();
    assert!((single.ratio - sol.vbar[7].g).abs() <= 1e-15);
    assert!(single.ratio <= 0.1);
    let c = sum_certificate(1.0, 0.0, 0, 10_000, &sol, &p).unwrap();
    assert!(c.stable, "{c:?}");
    assert!(c.ratio <= 1.0);
    let c10 = sum_certificate(1.0, 0.0, 0, 1000, &sol, &p).unwrap();
    assert!(c10.ratio <= c.ratio && c.ratio <= 1.0);

    // past the cut-off gbar is frozen and the sum is a geometric series
    let q = ParamSeq {
        beta: Sequence::cut(1.0, 50),
        ..ParamSeq::default()
    };
    let sol = solve_quadratic_bvp(0.05, &q, &QuadraticOptions::with_horizon(400)).unwrap();
    let (j, k) = (60usize, 90usize);
    let cert = sum_certificate(3.0, 1.0, j, k, &sol, &q).unwrap();
    let g = sol.vbar[j].g;
    let closed = g * (1.0 - 0.5f64.powi((k - j + 1) as i32)) / 0.5;
    assert!((cert.ratio - closed).abs() <= 1e-12 * closed, "{} vs {closed}", cert.ratio);
    assert!(cert.ratio <= 2.0 * g);
}

#[test]
fn initial_condition_stability() {
    let p = beta_one();
    let g0 = 0.05;
    for delta in [0.01, 0.1] {
        let fit = |n: usize| {
            let a = iterate_gbar(g0, &p, n).unwrap();
            let b = iterate_gbar(g0 * (1.0 - delta), &p, n).unwrap();
            (0..=n)
                .map(|j| ((a[j] - b[j]).abs() / (delta * a[j]) - 1.0).max(0.0) / g0)
                .fold(0.0, f64::max)
        };
        let (c1, c2) = (fit(1000), fit(2000));
        assert!(c1 <= 1.0 && (c2 - c1).abs() <= 0.1 * c1.max(1e-12), "{delta}: {c1} {c2}");
    }
}

#[test]
fn riemann_sum_comparison() {
    let p = ParamSeq {
        beta: Sequence::constant(0.7),
        ..ParamSeq::default()
    };
    let g = iterate_gbar(0.08, &p, 3000).unwrap();
    for n in [1i32, 2, 3] {
        let psi = |t: f64| t.powi(n - 2);
        let dpsi = |t: f64| ((n - 2) as f64 * t.powi(n - 3)).abs();
        let antider = |t: f64| if n == 1 { t.ln() } else { t.powi(n - 1) / (n - 1) as f64 };
        for (j, k) in [(0usize, 100usize), (10, 3000 - 1)] {
            let mut sum = 0.0;
            let mut corr = 0.0;
            for l in j..=k {
                let dl = g[l] - g[l + 1];
                sum += 0.7 * psi(g[l]) * g[l] * g[l];
                corr += 0.5 * dpsi(g[l + 1]).max(dpsi(g[l])) * dl * dl;
            }
            let integral = antider(g[j]) - antider(g[k + 1]);
            assert!((sum - integral).abs() <= corr * (1.0 + 1e-9) + 1e-14 * integral.abs(), "n {n}: {sum} vs {integral} (corr {corr})");
        }
    }
}

#[test]
fn zeta_product_bounded() {
    let mut prefix = vec![0.4, 0.3, 0.8, 0.1];
    prefix.extend(std::iter::repeat(-0.3).take(100));
    let p = ParamSeq {
        beta: Sequence::constant(1.0),
        zeta: Sequence::new(prefix, TailRule::Constant { value: -0.3 }),
        ..ParamSeq::default()
    };
    let g = iterate_gbar(0.05, &p, 4000).unwrap();
    let sup = |n: usize| {
        let mut best: f64 = 0.0;
        for j in [0usize, 1, 2, 5, 50] {
            let mut prod = 1.0;
            for (k, gk) in g.iter().enumerate().take(n).skip(j) {
                prod /= 1.0 - p.zeta.at(k) * gk;
                best = best.max(prod);
            }
        }
        best
    };
    let (a, b) = (sup(2000), sup(4000));
    assert!(a < 1.2 && a == b, "{a} {b}");
}

fn derivative_envelopes(p: &ParamSeq, g0: f64, horizon: usize) -> (f64, f64) {
    let sol = solve_quadratic_bvp(g0, p, &QuadraticOptions::with_horizon(horizon)).unwrap();
    let d = gbar_derivatives(&sol, p);
    let mut cz: f64 = 0.0;
    let mut cm: f64 = 0.0;
    for j in 0..=horizon {
        let s = sol.chi[j] * sol.vbar[j].g.powi(2) / (g0 * g0);
        cz = cz.max(d.dz[j].abs() / s);
        cm = cm.max(d.dmu[j].abs() / s);
    }
    (cz, cm)
}

#[test]
fn derivative_envelopes_are_stable() {
    let p = common::standard(400, 2.0);
    let (z1, m1) = derivative_envelopes(&p, 0.05, 1000);
    let (z2, m2) = derivative_envelopes(&p, 0.05, 2000);
    assert!(common::rel_change(z1, z2) <= 0.1 && common::rel_change(m1, m2) <= 0.1, "{z1} {z2} {m1} {m2}");
}

#[test]
fn quadratic_envelopes_finite_on_admissible_sets() {
    for seed in 0..5 {
        let p = common::random_admissible(seed);
        let cut = cutoff_time(&p).unwrap();
        assert!(cut.j_omega.is_some());
        let sol = solve_quadratic_bvp(0.05, &p, &QuadraticOptions::default()).unwrap();
        assert!(sol.z_envelope.is_finite() && sol.mu_envelope.is_finite());
        assert!(sol.tail_certificate.unwrap() <= 1e-12);
    }
}
