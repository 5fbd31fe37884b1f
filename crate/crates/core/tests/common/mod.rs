#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgflow::homotopy::FlowSpec;
use rgflow::linear::{BlockMatrices, WOperator};
use rgflow::params::cutoff_time;
use rgflow::{FlowSequence, ParamSeq, PerturbationModel, Sequence, VTriple};

/// Coefficients switched off after `cut`, with constant `lambda`.
pub fn standard(cut: usize, lambda: f64) -> ParamSeq {
    ParamSeq {
        beta: Sequence::cut(1.0, cut),
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

/// Seeded random coefficients with every clause of the assumptions intact.
pub fn random_admissible(seed: u64) -> ParamSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = rng.gen_range(20..80);
    let mut small = |s: f64| Sequence::cut(rng.gen_range(-s..=s), cut);
    let eta = small(0.5);
    let gamma = small(0.5);
    let theta = small(0.5);
    let ups_gg = small(0.2);
    let ups_gz = small(0.2);
    let ups_gmu = small(0.2);
    let ups_zz = small(0.2);
    let ups_zmu = small(0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
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

pub fn spec_with(params: ParamSeq, model: Arc<dyn PerturbationModel>, horizon: Option<usize>) -> FlowSpec {
    let mut s = FlowSpec::new(params, model);
    s.quad.horizon = horizon;
    s
}

pub fn cubic(params: &ParamSeq) -> Arc<dyn PerturbationModel> {
    Arc::new(rgflow::CubicMonomial::new(0.25, 0.25, 0.2, cutoff_time(params).unwrap()))
}

pub fn random_model(params: &ParamSeq, seed: u64) -> Arc<dyn PerturbationModel> {
    Arc::new(rgflow::RandomPolynomial::new(
        seed,
        1,
        0.2,
        0.3,
        0.1,
        0.2,
        cutoff_time(params).unwrap(),
    ))
}

pub fn random_forcing(dims: &[usize], seed: u64, scale: impl Fn(usize) -> [f64; 4]) -> FlowSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = FlowSequence::zeros(dims);
    for j in 1..dims.len() {
        let s = scale(j);
        for k in r.k[j].iter_mut() {
            *k = s[0] * rng.gen_range(-1.0..=1.0);
        }
        r.v[j] = VTriple::new(
            s[1] * rng.gen_range(-1.0..=1.0),
            s[2] * rng.gen_range(-1.0..=1.0),
            s[3] * rng.gen_range(-1.0..=1.0),
        );
    }
    r
}

/// Assemble the whole linear boundary-value problem
/// `y_{j+1} - (L_j + W_j) y_j = r_{j+1}`, `(K_0, g_0) = 0`, `(z_J, mu_J) = 0`
/// as one dense system and solve it directly.
pub fn dense_solve(r: &FlowSequence, blocks: &BlockMatrices, w: Option<&WOperator>) -> FlowSequence {
    let dims = &blocks.dims;
    let n = blocks.horizon();
    let mut off = vec![0usize; dims.len() + 1];
    for j in 0..dims.len() {
        off[j + 1] = off[j] + dims[j] + 3;
    }
    let size = off[dims.len()];
    let mut a = DMatrix::<f64>::zeros(size, size);
    let mut b = DVector::<f64>::zeros(size);
    let mut row = 0;
    for c in 0..=dims[0] {
        a[(row, off[0] + c)] = 1.0;
        row += 1;
    }
    for j in 0..n {
        let (d, d1) = (dims[j], dims[j + 1]);
        let bl = blocks.blocks[j];
        let mut m = DMatrix::<f64>::zeros(d1 + 3, d + 3);
        m[(d1, d)] = bl.a_gg;
        m[(d1 + 1, d)] = bl.b_zg;
        m[(d1 + 1, d + 1)] = bl.c_zz;
        m[(d1 + 2, d)] = bl.b_mug;
        m[(d1 + 2, d + 1)] = bl.c_muz;
        m[(d1 + 2, d + 2)] = bl.c_mumu;
        if let Some(w) = w {
            let wm = &w.mats[j];
            for p in 0..d1 + 3 {
                for q in 0..d + 3 {
                    m[(p, q)] += wm.get(p, q);
                }
            }
        }
        let rhs: Vec<f64> = r.k[j + 1].iter().copied().chain(r.v[j + 1].as_array()).collect();
        for p in 0..d1 + 3 {
            a[(row, off[j + 1] + p)] = 1.0;
            for q in 0..d + 3 {
                a[(row, off[j] + q)] -= m[(p, q)];
            }
            b[row] = rhs[p];
            row += 1;
        }
    }
    a[(row, off[n] + dims[n] + 1)] = 1.0;
    a[(row + 1, off[n] + dims[n] + 2)] = 1.0;
    assert_eq!(row + 2, size);
    let x = a.lu().solve(&b).expect("dense system is singular");
    let mut y = r.zeros_like();
    for j in 0..=n {
        let d = dims[j];
        for c in 0..d {
            y.k[j][c] = x[off[j] + c];
        }
        y.v[j] = VTriple::new(x[off[j] + d], x[off[j] + d + 1], x[off[j] + d + 2]);
    }
    y
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn rel_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}
