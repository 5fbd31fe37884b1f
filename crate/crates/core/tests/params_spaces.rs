mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgflow::assumptions::{check_a1, check_a2, check_a3};
use rgflow::params::{chi, cutoff_time, CutoffData};
use rgflow::spaces::weighted_norm;
use rgflow::{
    CubicMonomial, FlowSequence, LinearPsi, ParamSeq, Sequence, TailRule, VTriple, WeightScheme, Which,
    ZeroPerturbation,
};

fn scheme_for(params: &ParamSeq, g0: f64, horizon: usize) -> WeightScheme {
    let cut = cutoff_time(params).unwrap();
    WeightScheme::from_reference(g0, params, &cut, 1.0, 0.5, 1.0, horizon).unwrap()
}

#[test]
fn chi_examples() {
    let cut = CutoffData {
        j_omega: Some(100),
        omega: 2.0,
    };
    assert_eq!(chi(50, &cut), 1.0);
    assert_eq!(chi(100, &cut), 1.0);
    assert_eq!(chi(103, &cut), 0.125);
    assert_eq!(chi(10_000, &CutoffData::infinite(2.0)), 1.0);
}

#[test]
fn cutoff_examples() {
    let p = |beta| ParamSeq {
        beta,
        ..ParamSeq::default()
    };
    assert_eq!(cutoff_time(&p(Sequence::constant(1.0))).unwrap().j_omega, None);
    assert_eq!(cutoff_time(&p(Sequence::zero())).unwrap().j_omega, Some(0));
    assert_eq!(cutoff_time(&p(Sequence::cut(1.0, 100))).unwrap().j_omega, Some(100));
}

#[test]
fn weighted_norm_matches_brute_force() {
    let params = common::standard(30, 2.0);
    let scheme = scheme_for(&params, 0.05, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims: Vec<usize> = (0..=50).map(|j| 1 + j % 3).collect();
    let mut x = FlowSequence::zeros(&dims);
    for j in 0..=50 {
        for k in x.k[j].iter_mut() {
            *k = rng.gen_range(-1e-4..1e-4);
        }
        x.v[j] = VTriple::new(rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2), rng.gen_range(-1e-2..1e-2));
    }
    let cut = cutoff_time(&params).unwrap();
    for which in [Which::W, Which::V] {
        let mut best: f64 = 0.0;
        for j in 0..=50 {
            let g = scheme.gring[j];
            let c = if j > 30 { 0.5f64.powi(j as i32 - 30) } else { 1.0 };
            assert_eq!(c, cut.chi(j));
            let (wk, wg, wz) = match which {
                Which::W => (0.5 * c * g.powi(3), g * g * g.ln().abs(), c * g * g * g.ln().abs()),
                Which::V => (0.5 * c * g.powi(3), c * g.powi(3), c * g.powi(3)),
            };
            for k in &x.k[j] {
                best = best.max(k.abs() / wk);
            }
            best = best.max(x.v[j].g.abs() / wg).max(x.v[j].z.abs() / wz).max(x.v[j].mu.abs() / wz);
        }
        let got = weighted_norm(&x, &scheme, which).unwrap();
        assert!((got - best).abs() <= 1e-14 * best, "{which:?}: {got} vs {best}");
    }
}

#[test]
fn a3_zero_model_is_trivial() {
    let params = common::standard(30, 2.0);
    let scheme = scheme_for(&params, 0.05, 60);
    let rep = check_a3(&ZeroPerturbation::default(), &scheme, &params, 50, 3).unwrap();
    assert_eq!((rep.kappa_hat, rep.r_hat, rep.m_hat), (0.0, 0.0, 0.0));
    assert!(rep.pass);
}

#[test]
fn a3_linear_psi_recovers_kappa() {
    let params = common::standard(30, 2.0);
    let scheme = scheme_for(&params, 0.05, 60);
    let rep = check_a3(&LinearPsi::new(0.3), &scheme, &params, 50, 3).unwrap();
    assert!((rep.kappa_hat - 0.3).abs() < 1e-12, "{}", rep.kappa_hat);
    assert_eq!(rep.r_hat, 0.0);
}

#[test]
fn a3_cubic_sees_its_coefficient() {
    let params = common::standard(30, 2.0);
    let scheme = scheme_for(&params, 0.05, 60);
    let model = CubicMonomial::new(0.25, 0.25, 0.2, cutoff_time(&params).unwrap());
    let rep = check_a3(&model, &scheme, &params, 200, 5).unwrap();
    assert!(rep.m_hat >= 0.25, "{}", rep.m_hat);
    assert!(rep.pass, "{rep:?}");
    let again = check_a3(&model, &scheme, &params, 200, 5).unwrap();
    assert_eq!(rep, again);
}

#[test]
fn assumption_reports_are_reproducible() {
    let params = common::random_admissible(4);
    let cut = cutoff_time(&params).unwrap();
    assert_eq!(check_a1(&params, 500).unwrap(), check_a1(&params, 500).unwrap());
    let a = check_a2(&params, &cut, 500).unwrap();
    assert!(a.pass, "{}", a.summary());
    assert_eq!(a, check_a2(&params, &cut, 500).unwrap());
}

fn random_sequence(x: &FlowSequence, seed: u64, scale: f64) -> FlowSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = x.zeros_like();
    for j in 0..y.len() {
        for k in y.k[j].iter_mut() {
            *k = scale * rng.gen_range(-1.0..1.0);
        }
        y.v[j] = VTriple::new(
            scale * rng.gen_range(-1.0..1.0),
            scale * rng.gen_range(-1.0..1.0),
            scale * rng.gen_range(-1.0..1.0),
        );
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chi_steps_by_one_or_omega(k in 0usize..200, omega in 1.1f64..5.0, j in 0usize..400) {
        let cut = CutoffData { j_omega: Some(k), omega };
        let r = chi(j, &cut) / chi(j + 1, &cut);
        prop_assert!(r == 1.0 || (r - omega).abs() <= 1e-12 * omega);
        prop_assert!(chi(j + 1, &cut) <= chi(j, &cut));
    }

    #[test]
    fn weighted_norm_is_a_norm(seed in 0u64..1000, s in -5.0f64..5.0) {
        let params = common::standard(20, 2.0);
        let scheme = scheme_for(&params, 0.03, 40);
        let base = FlowSequence::zeros(&vec![2; 41]);
        let x = random_sequence(&base, seed, 1e-3);
        let y = random_sequence(&base, seed + 7919, 1e-3);
        for which in [Which::W, Which::V] {
            let nx = weighted_norm(&x, &scheme, which).unwrap();
            let ny = weighted_norm(&y, &scheme, which).unwrap();
            let mut sx = x.clone();
            sx.scale(s);
            let nsx = weighted_norm(&sx, &scheme, which).unwrap();
            prop_assert!((nsx - s.abs() * nx).abs() <= 1e-12 * nsx.max(1e-300));
            let mut sum = x.clone();
            sum.axpy(1.0, &y);
            let ns = weighted_norm(&sum, &scheme, which).unwrap();
            prop_assert!(ns <= (nx + ny) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn cutoff_monotone_in_omega(prefix in proptest::collection::vec(-2.0f64..2.0, 1..60),
                                o1 in 1.1f64..4.0, o2 in 1.1f64..4.0) {
        let (lo, hi) = if o1 <= o2 { (o1, o2) } else { (o2, o1) };
        let mk = |omega| ParamSeq {
            beta: Sequence::new(prefix.clone(), TailRule::Zero),
            omega,
            ..ParamSeq::default()
        };
        let a = cutoff_time(&mk(lo)).unwrap().j_omega.unwrap();
        let b = cutoff_time(&mk(hi)).unwrap().j_omega.unwrap();
        prop_assert!(a <= b, "{a} > {b}");
    }

    #[test]
    fn cutoff_is_minimal(prefix in proptest::collection::vec(-2.0f64..2.0, 1..60), omega in 1.1f64..4.0) {
        let p = ParamSeq {
            beta: Sequence::new(prefix.clone(), TailRule::Zero),
            omega,
            ..ParamSeq::default()
        };
        let sup = prefix.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        let holds = |k: usize| prefix.iter().enumerate().all(|(j, b)| {
            b.abs() <= sup * omega.powi(-(j.saturating_sub(k) as i32)) * (1.0 + 1e-12)
        });
        let k = cutoff_time(&p).unwrap().j_omega.unwrap();
        prop_assert!(holds(k));
        prop_assert!(k == 0 || !holds(k - 1));
    }
}
