//! The linearised boundary-value problem `y_{j+1} = (L_j + W_j) y_j + r_{j+1}`
//! with `u_0 = 0` and `v` vanishing at the horizon.
//!
//! Forcing sequences carry `J + 1` entries; entry `j + 1` forces the step
//! `j -> j + 1` and entry `0` is ignored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::Mat;
use crate::model::{phi_jacobian, DomainSpec, PerturbationModel, CLAUSES};
use crate::params::ParamSeq;
use crate::quadratic::{quadratic_jacobian, VTriple};
use crate::spaces::{component_ratios, sup_norm, weighted_norm, Component, FlowSequence, Which, WeightScheme};

/// Nonzero entries of the frozen linearisation at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBlock {
    pub a_gg: f64,
    pub b_zg: f64,
    pub b_mug: f64,
    pub c_zz: f64,
    pub c_muz: f64,
    pub c_mumu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMatrices {
    pub blocks: Vec<StepBlock>,
    /// `d_K(j)` for `j = 0..=J`.
    pub dims: Vec<usize>,
    /// `max_j |c_mumu|^{-1}`.
    pub alpha: f64,
    pub alpha_index: usize,
}

impl BlockMatrices {
    pub fn horizon(&self) -> usize {
        self.blocks.len()
    }
}

/// Freeze the quadratic Jacobian along the reference trajectory.
pub fn build_l(xring: &FlowSequence, params: &ParamSeq) -> Result<BlockMatrices> {
    if xring.is_empty() {
        return Err(FlowError::EmptySequence);
    }
    let n = xring.horizon();
    let mut blocks = Vec::with_capacity(n);
    let mut alpha: f64 = 0.0;
    let mut alpha_index = 0;
    for j in 0..n {
        let q = quadratic_jacobian(xring.v[j], &params.at(j));
        let b = StepBlock {
            a_gg: q[0][0],
            b_zg: q[1][0],
            b_mug: q[2][0],
            c_zz: q[1][1],
            c_muz: q[2][1],
            c_mumu: q[2][2],
        };
        if !(b.c_zz.is_finite() && b.c_zz != 0.0) {
            return Err(FlowError::InvalidInput(format!("1 - zeta g vanishes at j = {j}")));
        }
        let a = 1.0 / b.c_mumu.abs();
        if a > alpha {
            alpha = a;
            alpha_index = j;
        }
        blocks.push(b);
    }
    if !(alpha < 1.0) {
        return Err(FlowError::Expansivity {
            alpha,
            index: alpha_index,
        });
    }
    Ok(BlockMatrices {
        blocks,
        dims: xring.dims(),
        alpha,
        alpha_index,
    })
}

/// `A_{j-1} ... A_l` restricted to the `(g, g)` entry (empty product is 1).
pub fn a_product(blocks: &BlockMatrices, l: usize, j: usize) -> f64 {
    blocks.blocks[l..j].iter().map(|b| b.a_gg).product()
}

/// `C_j^{-1} C_{j+1}^{-1} ... C_l^{-1}` as a 2x2 matrix on `(z, mu)`.
pub fn c_inverse_product(blocks: &BlockMatrices, j: usize, l: usize) -> [[f64; 2]; 2] {
    let mut p = [[1.0, 0.0], [0.0, 1.0]];
    for b in &blocks.blocks[j..=l] {
        // inverse of [[c_zz, 0], [c_muz, c_mumu]]
        let inv = [[1.0 / b.c_zz, 0.0], [-b.c_muz / (b.c_zz * b.c_mumu), 1.0 / b.c_mumu]];
        p = [
            [
                p[0][0] * inv[0][0] + p[0][1] * inv[1][0],
                p[0][0] * inv[0][1] + p[0][1] * inv[1][1],
            ],
            [
                p[1][0] * inv[0][0] + p[1][1] * inv[1][0],
                p[1][0] * inv[0][1] + p[1][1] * inv[1][1],
            ],
        ];
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct S0Report {
    /// Size of the backward sums' neglected continuation past the horizon,
    /// estimated from the last forcing as a geometric series.
    pub tail_estimate: f64,
}

fn check_forcing(r: &FlowSequence, blocks: &BlockMatrices) -> Result<()> {
    if r.len() != blocks.horizon() + 1 || r.dims() != blocks.dims {
        return Err(FlowError::InvalidInput(format!(
            "forcing has {} entries with dims {:?}, blocks expect {} entries",
            r.len(),
            r.dims().iter().take(4).collect::<Vec<_>>(),
            blocks.horizon() + 1
        )));
    }
    if !r.is_finite() {
        return Err(FlowError::InvalidInput("forcing is not finite".into()));
    }
    Ok(())
}

/// Solve `y_{j+1} = L_j y_j + r_{j+1}` with `u_0 = 0`, `v_J = 0`.
///
/// With `tail_tol` set, fails when the tail estimate exceeds it.
pub fn apply_s0(r: &FlowSequence, blocks: &BlockMatrices, tail_tol: Option<f64>) -> Result<(FlowSequence, S0Report)> {
    check_forcing(r, blocks)?;
    let n = blocks.horizon();
    let mut y = r.zeros_like();
    for j in 0..n {
        y.k[j + 1].copy_from_slice(&r.k[j + 1]);
        y.v[j + 1].g = blocks.blocks[j].a_gg * y.v[j].g + r.v[j + 1].g;
    }
    for j in (0..n).rev() {
        let b = &blocks.blocks[j];
        let g = y.v[j].g;
        let z = (y.v[j + 1].z - b.b_zg * g - r.v[j + 1].z) / b.c_zz;
        let mu = (y.v[j + 1].mu - b.b_mug * g - b.c_muz * z - r.v[j + 1].mu) / b.c_mumu;
        y.v[j].z = z;
        y.v[j].mu = mu;
    }
    let tail_estimate = if n == 0 {
        0.0
    } else {
        let b = &blocks.blocks[n - 1];
        let g = y.v[n - 1].g;
        let fz = (b.b_zg * g + r.v[n].z).abs();
        let fmu = (b.b_mug * g + r.v[n].mu).abs();
        (fz + fmu) / (1.0 - blocks.alpha)
    };
    if let Some(tol) = tail_tol {
        if tail_estimate > tol {
            return Err(FlowError::ExtendHorizon {
                estimate: tail_estimate,
                tol,
            });
        }
    }
    Ok((y, S0Report { tail_estimate }))
}

fn rel(num: f64, scale: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / scale
    }
}

/// Largest relative residual of `y_{j+1} - L_j y_j - r_{j+1}` over all
/// steps and components.
pub fn s0_residual(y: &FlowSequence, r: &FlowSequence, blocks: &BlockMatrices) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, b) in blocks.blocks.iter().enumerate() {
        let (v0, v1, f) = (y.v[j], y.v[j + 1], r.v[j + 1]);
        for (i, x) in y.k[j + 1].iter().enumerate() {
            let e = x - r.k[j + 1][i];
            worst = worst.max(rel(e.abs(), x.abs() + r.k[j + 1][i].abs()));
        }
        let terms = [
            (v1.g, vec![b.a_gg * v0.g, f.g]),
            (v1.z, vec![b.b_zg * v0.g, b.c_zz * v0.z, f.z]),
            (v1.mu, vec![b.b_mug * v0.g, b.c_muz * v0.z, b.c_mumu * v0.mu, f.mu]),
        ];
        for (lhs, rhs) in terms {
            let e = lhs - rhs.iter().sum::<f64>();
            let scale = lhs.abs() + rhs.iter().map(|x| x.abs()).sum::<f64>();
            worst = worst.max(rel(e.abs(), scale));
        }
    }
    worst
}

/// The correction `W_j = D Phi^t_j(x_j) - L_j`, stored per step in the full
/// `(K, g, z, mu)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct WOperator {
    pub t: f64,
    pub mats: Vec<Mat>,
}

/// Weighted block norms of `W` as a map from the `w`-space to the `v`-space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WBlockNorms {
    pub kk: f64,
    pub kv: f64,
    pub vk: f64,
    pub vv: f64,
}

impl WOperator {
    pub fn zero(dims: &[usize]) -> Self {
        WOperator {
            t: 0.0,
            mats: (0..dims.len().saturating_sub(1))
                .map(|j| Mat::zeros(dims[j + 1] + 3, dims[j] + 3))
                .collect(),
        }
    }

    /// `(W y)_{j+1} = W_j y_j`, entry `0` zero.
    pub fn apply(&self, y: &FlowSequence) -> FlowSequence {
        let mut out = y.zeros_like();
        for (j, m) in self.mats.iter().enumerate() {
            let mut x = y.k[j].clone();
            x.extend_from_slice(&y.v[j].as_array());
            let o = m.mul_vec(&x);
            let d1 = out.k[j + 1].len();
            out.k[j + 1].copy_from_slice(&o[..d1]);
            out.v[j + 1] = VTriple::new(o[d1], o[d1 + 1], o[d1 + 2]);
        }
        out
    }

    pub fn block_norms(&self, scheme: &WeightScheme) -> WBlockNorms {
        let mut n = WBlockNorms {
            kk: 0.0,
            kv: 0.0,
            vk: 0.0,
            vv: 0.0,
        };
        let vc = [Component::G, Component::Z, Component::Mu];
        for (j, m) in self.mats.iter().enumerate() {
            let d = m.cols - 3;
            let d1 = m.rows - 3;
            for r in 0..m.rows {
                let out_c = if r < d1 { Component::K } else { vc[r - d1] };
                let vw = scheme.v(out_c, j + 1);
                let (mut sk, mut sv) = (0.0, 0.0);
                for c in 0..m.cols {
                    let in_c = if c < d { Component::K } else { vc[c - d] };
                    let x = m.get(r, c).abs() * scheme.w(in_c, j) / vw;
                    if c < d {
                        sk += x;
                    } else {
                        sv += x;
                    }
                }
                if r < d1 {
                    n.kk = n.kk.max(sk);
                    n.kv = n.kv.max(sv);
                } else {
                    n.vk = n.vk.max(sk);
                    n.vv = n.vv.max(sv);
                }
            }
        }
        n
    }
}

/// Check `||x - xring||_w <= radius`, reporting the worst clause otherwise.
pub fn check_ball(x: &FlowSequence, xring: &FlowSequence, scheme: &WeightScheme, radius: f64) -> Result<f64> {
    let cr = component_ratios(&x.sub(xring), scheme, Which::W)?;
    let m = cr.max();
    if !(m <= radius) {
        return Err(FlowError::Domain {
            index: cr.argmax_j,
            clause: CLAUSES[cr.argmax_component as usize],
            ratio: m,
        });
    }
    Ok(m)
}

/// Build `W(t, x)` along the whole trajectory. With `ball` set, `x` must lie
/// within that `w`-distance of `xring`.
#[allow(clippy::too_many_arguments)]
pub fn build_w(
    t: f64,
    x: &FlowSequence,
    model: &dyn PerturbationModel,
    params: &ParamSeq,
    xring: &FlowSequence,
    dom: &DomainSpec,
    scheme: &WeightScheme,
    ball: Option<f64>,
) -> Result<WOperator> {
    if !x.same_shape(xring) {
        return Err(FlowError::InvalidInput("trajectory and reference differ in shape".into()));
    }
    if let Some(radius) = ball {
        check_ball(x, xring, scheme, radius)?;
    }
    let mut mats = Vec::with_capacity(x.horizon());
    for j in 0..x.horizon() {
        let mut m = phi_jacobian(t, &x.k[j], x.v[j], j, params, model, dom);
        let q = quadratic_jacobian(xring.v[j], &params.at(j));
        let d = x.k[j].len();
        let d1 = x.k[j + 1].len();
        if m.rows != d1 + 3 || m.cols != d + 3 {
            return Err(FlowError::InvalidInput(format!(
                "Jacobian at j = {j} is {}x{}, expected {}x{}",
                m.rows,
                m.cols,
                d1 + 3,
                d + 3
            )));
        }
        for (r, row) in q.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                m.add(d1 + r, d + c, -v);
            }
        }
        mats.push(m);
    }
    Ok(WOperator { t, mats })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Last increment in the `w`-norm.
    pub increment: f64,
    /// `v`-weighted residual of the full linear equation.
    pub residual: f64,
    /// Largest ratio of successive increments (0 when fewer than two
    /// increments were above round-off).
    pub contraction: f64,
    pub tail_estimate: f64,
}

/// `v`-weighted residual of `y_{j+1} - (L_j + W_j) y_j - r_{j+1}`.
///
/// The right-hand side is summed first, in the order the solver uses, so a
/// forcing entry below the resolution of `y_{j+1}` is absorbed the same way
/// on both sides instead of showing up as a residual.
pub fn linear_residual(
    y: &FlowSequence,
    r: &FlowSequence,
    blocks: &BlockMatrices,
    w: &WOperator,
    scheme: &WeightScheme,
) -> Result<f64> {
    let mut rhs = w.apply(y);
    rhs.axpy(1.0, r);
    let mut full = l_apply(y, blocks);
    full.axpy(1.0, &rhs);
    let mut e = y.clone();
    e.axpy(-1.0, &full);
    e.k[0].iter_mut().for_each(|x| *x = 0.0);
    e.v[0] = VTriple::default();
    weighted_norm(&e, scheme, Which::V)
}

/// `(L y)_{j+1} = L_j y_j`, entry `0` zero.
pub fn l_apply(y: &FlowSequence, blocks: &BlockMatrices) -> FlowSequence {
    let mut out = y.zeros_like();
    for (j, b) in blocks.blocks.iter().enumerate() {
        let v = y.v[j];
        out.v[j + 1] = VTriple::new(
            b.a_gg * v.g,
            b.b_zg * v.g + b.c_zz * v.z,
            b.b_mug * v.g + b.c_muz * v.z + b.c_mumu * v.mu,
        );
    }
    out
}

/// Solve `y = S0 (r + W y)` by fixed-point iteration.
pub fn apply_s(
    r: &FlowSequence,
    blocks: &BlockMatrices,
    w: &WOperator,
    scheme: &WeightScheme,
    tol: f64,
    max_iter: usize,
) -> Result<(FlowSequence, SolveReport)> {
    let (mut y, _) = apply_s0(r, blocks, None)?;
    let mut tail_estimate;
    let mut prev_inc: Option<f64> = None;
    let mut contraction: f64 = 0.0;
    let mut growing = 0usize;
    for it in 1..=max_iter {
        let mut f = w.apply(&y);
        f.axpy(1.0, r);
        let (y_new, rep) = apply_s0(&f, blocks, None)?;
        tail_estimate = rep.tail_estimate;
        let inc = weighted_norm(&y_new.sub(&y), scheme, Which::W)?;
        let size = weighted_norm(&y_new, scheme, Which::W)?;
        y = y_new;
        if !inc.is_finite() {
            return Err(FlowError::NoContraction {
                iterations: it,
                factor: f64::INFINITY,
            });
        }
        let floor = 1e-14 * size;
        if let Some(p) = prev_inc {
            if p > floor && inc > floor {
                let ratio = inc / p;
                contraction = contraction.max(ratio);
                growing = if ratio >= 1.0 { growing + 1 } else { 0 };
                if growing >= 3 {
                    return Err(FlowError::NoContraction {
                        iterations: it,
                        factor: ratio,
                    });
                }
            }
        }
        if inc <= tol || inc <= floor {
            let residual = linear_residual(&y, r, blocks, w, scheme)?;
            return Ok((
                y,
                SolveReport {
                    iterations: it,
                    increment: inc,
                    residual,
                    contraction,
                    tail_estimate,
                },
            ));
        }
        prev_inc = Some(inc);
    }
    Err(FlowError::NoContraction {
        iterations: max_iter,
        factor: contraction,
    })
}

/// Randomised lower bound for `sup ||op r||_out / ||r||_in`.
///
/// Probes are weight-scaled: half with uniform entries in `[-1, 1]`, half
/// with random signs.
pub fn operator_norm_estimate(
    op: &dyn Fn(&FlowSequence) -> Result<FlowSequence>,
    dims: &[usize],
    scheme: &WeightScheme,
    in_norm: Which,
    out_norm: Which,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for p in 0..probes {
        let signs = p % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if signs {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            } else {
                rng.gen_range(-1.0..=1.0)
            }
        };
        let mut r = FlowSequence::zeros(dims);
        for j in 0..dims.len() {
            for x in r.k[j].iter_mut() {
                *x = draw(&mut rng) * scheme.weight(in_norm, Component::K, j);
            }
            r.v[j] = VTriple::new(
                draw(&mut rng) * scheme.weight(in_norm, Component::G, j),
                draw(&mut rng) * scheme.weight(in_norm, Component::Z, j),
                draw(&mut rng) * scheme.weight(in_norm, Component::Mu, j),
            );
        }
        let n_in = weighted_norm(&r, scheme, in_norm)?;
        if n_in == 0.0 {
            continue;
        }
        let out = op(&r)?;
        best = best.max(weighted_norm(&out, scheme, out_norm)? / n_in);
    }
    Ok(best)
}

/// Plain sup norm over every coordinate, for diagnostics.
pub fn max_abs(x: &FlowSequence) -> f64 {
    x.k.iter()
        .map(|k| sup_norm(k))
        .chain(x.v.iter().map(|v| v.max_abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{cutoff_time, Sequence};

    fn instance() -> (ParamSeq, FlowSequence, BlockMatrices, WeightScheme) {
        let p = ParamSeq {
            beta: Sequence::constant(1.0),
            theta: Sequence::constant(0.3),
            zeta: Sequence::constant(-0.5),
            eta: Sequence::constant(0.4),
            gamma: Sequence::constant(0.2),
            ups_gg: Sequence::constant(0.1),
            ups_gmu: Sequence::constant(0.3),
            ..ParamSeq::default()
        };
        let cut = cutoff_time(&p).unwrap();
        let scheme = WeightScheme::from_reference(0.05, &p, &cut, 1.0, 0.5, 1.0, 50).unwrap();
        let mut x = FlowSequence::zeros(&vec![1; 51]);
        for j in 0..=50 {
            x.v[j] = VTriple::new(scheme.gring[j], 0.01 * scheme.gring[j], -0.02 * scheme.gring[j]);
        }
        let b = build_l(&x, &p).unwrap();
        (p, x, b, scheme)
    }

    #[test]
    fn trivial_blocks() {
        let p = ParamSeq::default();
        let x = FlowSequence::zeros(&[1, 1, 1]);
        let b = build_l(&x, &p).unwrap();
        for s in &b.blocks {
            assert_eq!((s.b_zg, s.b_mug, s.c_muz), (0.0, 0.0, 0.0));
            assert_eq!((s.c_zz, s.c_mumu), (1.0, 2.0));
        }
    }

    #[test]
    fn zero_and_k_forcing() {
        let (_, x, b, _) = instance();
        let (y, _) = apply_s0(&x.zeros_like(), &b, None).unwrap();
        assert_eq!(y, x.zeros_like());
        let mut r = x.zeros_like();
        r.k[1][0] = 3.0;
        let (y, _) = apply_s0(&r, &b, None).unwrap();
        let mut want = x.zeros_like();
        want.k[1][0] = 3.0;
        assert_eq!(y, want);
    }

    #[test]
    fn residual_is_tiny() {
        let (_, x, b, _) = instance();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = x.zeros_like();
        for j in 1..r.len() {
            r.k[j][0] = rng.gen_range(-1.0..1.0);
            r.v[j] = VTriple::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let (y, _) = apply_s0(&r, &b, None).unwrap();
        assert!(s0_residual(&y, &r, &b) < 1e-13);
        assert_eq!(y.v[0].g, 0.0);
        assert_eq!(y.v[50].z, 0.0);
        assert_eq!(y.v[50].mu, 0.0);
    }

    #[test]
    fn identity_and_zero_norms() {
        let (_, x, _, s) = instance();
        let dims = x.dims();
        let id = |r: &FlowSequence| Ok(r.clone());
        let zero = |r: &FlowSequence| Ok(r.zeros_like());
        let n = operator_norm_estimate(&id, &dims, &s, Which::W, Which::W, 20, 1).unwrap();
        assert!((n - 1.0).abs() < 1e-15);
        let n = operator_norm_estimate(&zero, &dims, &s, Which::W, Which::W, 20, 1).unwrap();
        assert_eq!(n, 0.0);
    }

    #[test]
    fn zero_w_converges_in_one_iteration() {
        let (_, x, b, s) = instance();
        let mut r = x.zeros_like();
        r.v[5].mu = s.v(Component::Mu, 5);
        let w = WOperator::zero(&x.dims());
        let (y, rep) = apply_s(&r, &b, &w, &s, 1e-12, 50).unwrap();
        let (y0, _) = apply_s0(&r, &b, None).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(y, y0);
    }

    #[test]
    fn c_inverse_product_matches_steps() {
        let (_, _, b, _) = instance();
        let p = c_inverse_product(&b, 3, 3);
        let s = b.blocks[3];
        assert!((p[0][0] * s.c_zz - 1.0).abs() < 1e-15);
        assert!((p[1][1] * s.c_mumu - 1.0).abs() < 1e-15);
        assert_eq!(a_product(&b, 4, 4), 1.0);
    }
}
