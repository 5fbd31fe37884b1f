//! Perturbations `(psi, rho)` of the quadratic flow, the domains they live
//! on, and the approximate flow obtained by switching `rho` off.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::linalg::Mat;
use crate::params::{CutoffData, ParamSeq};
use crate::quadratic::{quadratic_jacobian, quadratic_step, solve_quadratic_bvp, QuadraticOptions, QuadraticSolution, VTriple};
use crate::spaces::{sup_norm, FlowSequence};

/// Declared envelope constants `(kappa, R, M)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub kappa: f64,
    pub r: f64,
    pub m: f64,
}

/// The maps `psi_j : (K, V) -> K'` and `rho_j : (K, V) -> V'`.
///
/// Jacobians, when supplied, have rows `(psi_0, .., psi_{d'-1}, rho_g,
/// rho_z, rho_mu)` and columns `(K_0, .., K_{d-1}, g, z, mu)` with
/// `d = d_k(j)` and `d' = d_k(j + 1)`.
pub trait PerturbationModel: Send + Sync {
    fn name(&self) -> &str;
    fn d_k(&self, j: usize) -> usize;
    fn psi(&self, j: usize, k: &[f64], v: VTriple) -> Vec<f64>;
    fn rho(&self, j: usize, k: &[f64], v: VTriple) -> VTriple;
    fn jacobian(&self, _j: usize, _k: &[f64], _v: VTriple) -> Option<Mat> {
        None
    }
    fn declared(&self) -> Envelope;
}

/// The domains `D_j` around a quadratic reference flow.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub gbar: Vec<f64>,
    pub zbar: Vec<f64>,
    pub mubar: Vec<f64>,
    pub chi: Vec<f64>,
    pub a: f64,
    pub h: f64,
}

pub const CLAUSES: [&str; 4] = ["K", "g", "z", "mu"];

impl DomainSpec {
    pub fn new(sol: &QuadraticSolution, cutoff: &CutoffData, a: f64, h: f64) -> Self {
        let gbar = sol.gbar();
        let chi = (0..gbar.len()).map(|j| cutoff.chi(j)).collect();
        DomainSpec {
            zbar: sol.zbar(),
            mubar: sol.mubar(),
            gbar,
            chi,
            a,
            h,
        }
    }

    pub fn horizon(&self) -> usize {
        self.gbar.len() - 1
    }

    pub fn gbar(&self, j: usize) -> f64 {
        self.gbar[j]
    }

    pub fn chi(&self, j: usize) -> f64 {
        self.chi[j]
    }

    pub fn center(&self, j: usize) -> VTriple {
        VTriple::new(self.gbar[j], self.zbar[j], self.mubar[j])
    }

    /// Radii of the four clauses at scale `j`.
    pub fn radii(&self, j: usize) -> [f64; 4] {
        let g = self.gbar[j];
        let chi = self.chi[j];
        let lg = g * g * g.ln().abs();
        [self.a * chi * g * g * g, self.h * lg, self.h * chi * lg, self.h * chi * lg]
    }

    /// Each clause's left side divided by its radius.
    pub fn clause_ratios(&self, k: &[f64], v: VTriple, j: usize) -> [f64; 4] {
        let r = self.radii(j);
        let c = self.center(j);
        [
            sup_norm(k) / r[0],
            (v.g - c.g).abs() / r[1],
            (v.z - c.z).abs() / r[2],
            (v.mu - c.mu).abs() / r[3],
        ]
    }
}

pub fn in_domain(k: &[f64], v: VTriple, j: usize, dom: &DomainSpec) -> bool {
    dom.clause_ratios(k, v, j).iter().all(|&r| r <= 1.0)
}

/// Full Jacobian of `(psi_j, rho_j)` by central differences with the given
/// per-clause steps.
pub fn fd_jacobian(model: &dyn PerturbationModel, j: usize, k: &[f64], v: VTriple, steps: [f64; 4]) -> Mat {
    let d = k.len();
    let d1 = model.d_k(j + 1);
    let mut jac = Mat::zeros(d1 + 3, d + 3);
    let eval = |k: &[f64], v: VTriple| {
        let mut out = model.psi(j, k, v);
        out.extend_from_slice(&model.rho(j, k, v).as_array());
        out
    };
    for c in 0..d + 3 {
        let s = if c < d { steps[0] } else { steps[c - d + 1] };
        let (mut kp, mut km) = (k.to_vec(), k.to_vec());
        let (mut vp, mut vm) = (v.as_array(), v.as_array());
        if c < d {
            kp[c] += s;
            km[c] -= s;
        } else {
            vp[c - d] += s;
            vm[c - d] -= s;
        }
        let fp = eval(&kp, VTriple::from_array(vp));
        let fm = eval(&km, VTriple::from_array(vm));
        for r in 0..d1 + 3 {
            jac.set(r, c, (fp[r] - fm[r]) / (2.0 * s));
        }
    }
    jac
}

/// Analytic Jacobian when the model has one, otherwise central differences
/// with steps `1e-6` times the domain radii.
pub fn model_jacobian(model: &dyn PerturbationModel, j: usize, k: &[f64], v: VTriple, dom: &DomainSpec) -> Mat {
    if let Some(m) = model.jacobian(j, k, v) {
        return m;
    }
    let r = dom.radii(j.min(dom.horizon()));
    fd_jacobian(model, j, k, v, r.map(|x| 1e-6 * x))
}

/// One step of the interpolated map: `(psi_j(x), phibar_j(V) + t rho_j(x))`.
pub fn phi_step(t: f64, k: &[f64], v: VTriple, j: usize, params: &ParamSeq, model: &dyn PerturbationModel) -> (Vec<f64>, VTriple) {
    let c = params.at(j);
    let q = quadratic_step(v, &c);
    let psi = model.psi(j, k, v);
    if t == 0.0 {
        return (psi, q);
    }
    let r = model.rho(j, k, v);
    (psi, VTriple::new(q.g + t * r.g, q.z + t * r.z, q.mu + t * r.mu))
}

/// Jacobian of [`phi_step`] in the same layout as [`PerturbationModel::jacobian`].
pub fn phi_jacobian(
    t: f64,
    k: &[f64],
    v: VTriple,
    j: usize,
    params: &ParamSeq,
    model: &dyn PerturbationModel,
    dom: &DomainSpec,
) -> Mat {
    let d = k.len();
    let d1 = model.d_k(j + 1);
    let mut jac = model_jacobian(model, j, k, v, dom);
    jac.scale_rows(d1..d1 + 3, t);
    let q = quadratic_jacobian(v, &params.at(j));
    for (r, row) in q.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            jac.add(d1 + r, d + c, *x);
        }
    }
    jac
}

/// `K_{j+1} = psi_j(K_j, Vbar_j)` with the containment certificate
/// `||K_j|| <= a_star chi_j gbar_j^3`.
pub fn kbar_iterate(
    k0: &[f64],
    sol: &QuadraticSolution,
    model: &dyn PerturbationModel,
    cutoff: &CutoffData,
    a_star: f64,
) -> Result<Vec<Vec<f64>>> {
    let g = sol.gbar();
    let z = sol.zbar();
    let mu = sol.mubar();
    if k0.len() != model.d_k(0) {
        return Err(FlowError::InvalidInput(format!(
            "K0 has {} coordinates, model expects {}",
            k0.len(),
            model.d_k(0)
        )));
    }
    let bound0 = a_star * g[0].powi(3);
    if sup_norm(k0) > bound0 * (1.0 + 1e-12) {
        return Err(FlowError::InvalidInput(format!(
            "||K0|| = {} exceeds a_star g0^3 = {bound0}",
            sup_norm(k0)
        )));
    }
    let mut out = Vec::with_capacity(g.len());
    out.push(k0.to_vec());
    for j in 0..g.len() - 1 {
        let next = model.psi(j, &out[j], VTriple::new(g[j], z[j], mu[j]));
        if next.len() != model.d_k(j + 1) {
            return Err(FlowError::InvalidInput(format!(
                "psi_{j} returned {} coordinates, expected {}",
                next.len(),
                model.d_k(j + 1)
            )));
        }
        let ratio = sup_norm(&next) / (cutoff.chi(j + 1) * g[j + 1].powi(3));
        if !(ratio <= a_star * (1.0 + 1e-12)) {
            return Err(FlowError::ModelViolatesA3 { index: j + 1, ratio });
        }
        out.push(next);
    }
    Ok(out)
}

/// The approximate flow `(Kbar, Vbar)` together with its quadratic part.
pub fn xbar_assemble(
    k0: &[f64],
    g0: f64,
    params: &ParamSeq,
    model: &dyn PerturbationModel,
    a_star: f64,
    opts: &QuadraticOptions,
) -> Result<(QuadraticSolution, FlowSequence)> {
    let sol = solve_quadratic_bvp(g0, params, opts)?;
    let k = kbar_iterate(k0, &sol, model, &sol.cutoff, a_star)?;
    let v = sol.vbar.clone();
    Ok((sol, FlowSequence { k, v }))
}

/// `d_K(j)` cycling through a fixed pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KDims(pub Vec<usize>);

impl Default for KDims {
    fn default() -> Self {
        KDims(vec![1])
    }
}

impl KDims {
    pub fn at(&self, j: usize) -> usize {
        if self.0.is_empty() {
            return 1;
        }
        self.0[j % self.0.len()]
    }
}

/// `psi = 0`, `rho = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroPerturbation {
    pub dims: KDims,
    pub declared: Envelope,
}

impl Default for ZeroPerturbation {
    fn default() -> Self {
        ZeroPerturbation {
            dims: KDims::default(),
            declared: Envelope {
                kappa: 0.25,
                r: 0.1,
                m: 1.0,
            },
        }
    }
}

impl PerturbationModel for ZeroPerturbation {
    fn name(&self) -> &str {
        "zero"
    }

    fn d_k(&self, j: usize) -> usize {
        self.dims.at(j)
    }

    fn psi(&self, j: usize, _k: &[f64], _v: VTriple) -> Vec<f64> {
        vec![0.0; self.d_k(j + 1)]
    }

    fn rho(&self, _j: usize, _k: &[f64], _v: VTriple) -> VTriple {
        VTriple::default()
    }

    fn jacobian(&self, j: usize, _k: &[f64], _v: VTriple) -> Option<Mat> {
        Some(Mat::zeros(self.d_k(j + 1) + 3, self.d_k(j) + 3))
    }

    fn declared(&self) -> Envelope {
        self.declared
    }
}

fn copy_scaled(k: &[f64], d_out: usize, s: f64) -> Vec<f64> {
    (0..d_out).map(|i| k.get(i).map_or(0.0, |x| s * x)).collect()
}

/// `psi(K, V) = kappa0 K`, `rho = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPsi {
    pub kappa0: f64,
    pub dims: KDims,
    pub declared: Envelope,
}

impl LinearPsi {
    pub fn new(kappa0: f64) -> Self {
        LinearPsi {
            kappa0,
            dims: KDims::default(),
            declared: Envelope {
                kappa: kappa0.max(1e-3),
                r: 0.1,
                m: 1.0,
            },
        }
    }
}

impl PerturbationModel for LinearPsi {
    fn name(&self) -> &str {
        "linear"
    }

    fn d_k(&self, j: usize) -> usize {
        self.dims.at(j)
    }

    fn psi(&self, j: usize, k: &[f64], _v: VTriple) -> Vec<f64> {
        copy_scaled(k, self.d_k(j + 1), self.kappa0)
    }

    fn rho(&self, _j: usize, _k: &[f64], _v: VTriple) -> VTriple {
        VTriple::default()
    }

    fn jacobian(&self, j: usize, _k: &[f64], _v: VTriple) -> Option<Mat> {
        let (d, d1) = (self.d_k(j), self.d_k(j + 1));
        let mut m = Mat::zeros(d1 + 3, d + 3);
        for i in 0..d.min(d1) {
            m.set(i, i, self.kappa0);
        }
        Some(m)
    }

    fn declared(&self) -> Envelope {
        self.declared
    }
}

/// `g^3 / (1 + g)` and its derivative.
fn cubic_shape(g: f64) -> (f64, f64) {
    let s = 1.0 + g;
    (g * g * g / s, g * g * (3.0 + 2.0 * g) / (s * s))
}

/// `rho = (c_rho chi_{j+1} g^3/(1+g), 0, 0)` and
/// `psi = kappa0 K + c_psi chi_{j+1} g^3/(1+g)` in every coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicMonomial {
    pub c_rho: f64,
    pub c_psi: f64,
    pub kappa0: f64,
    pub dims: KDims,
    pub cutoff: CutoffData,
    pub declared: Envelope,
}

impl CubicMonomial {
    pub fn new(c_rho: f64, c_psi: f64, kappa0: f64, cutoff: CutoffData) -> Self {
        let big = c_rho.abs().max(c_psi.abs());
        CubicMonomial {
            c_rho,
            c_psi,
            kappa0,
            dims: KDims::default(),
            cutoff,
            declared: Envelope {
                kappa: kappa0.max(1e-3),
                r: (2.0 * c_psi.abs()).max(1e-6),
                m: (8.0 * big).max(1e-6),
            },
        }
    }
}

impl PerturbationModel for CubicMonomial {
    fn name(&self) -> &str {
        "cubic"
    }

    fn d_k(&self, j: usize) -> usize {
        self.dims.at(j)
    }

    fn psi(&self, j: usize, k: &[f64], v: VTriple) -> Vec<f64> {
        let add = self.c_psi * self.cutoff.chi(j + 1) * cubic_shape(v.g).0;
        let mut out = copy_scaled(k, self.d_k(j + 1), self.kappa0);
        for x in &mut out {
            *x += add;
        }
        out
    }

    fn rho(&self, j: usize, _k: &[f64], v: VTriple) -> VTriple {
        VTriple::new(self.c_rho * self.cutoff.chi(j + 1) * cubic_shape(v.g).0, 0.0, 0.0)
    }

    fn jacobian(&self, j: usize, _k: &[f64], v: VTriple) -> Option<Mat> {
        let (d, d1) = (self.d_k(j), self.d_k(j + 1));
        let chi = self.cutoff.chi(j + 1);
        let ds = cubic_shape(v.g).1;
        let mut m = Mat::zeros(d1 + 3, d + 3);
        for i in 0..d1 {
            if i < d {
                m.set(i, i, self.kappa0);
            }
            m.set(i, d, self.c_psi * chi * ds);
        }
        m.set(d1, d, self.c_rho * chi * ds);
        Some(m)
    }

    fn declared(&self) -> Envelope {
        self.declared
    }
}

const MONOMIALS: [[i32; 3]; 10] = [
    [3, 0, 0],
    [2, 1, 0],
    [2, 0, 1],
    [1, 2, 0],
    [1, 1, 1],
    [1, 0, 2],
    [0, 3, 0],
    [0, 2, 1],
    [0, 1, 2],
    [0, 0, 3],
];

fn monomial(e: [i32; 3], v: [f64; 3]) -> f64 {
    v[0].powi(e[0]) * v[1].powi(e[1]) * v[2].powi(e[2])
}

fn monomial_grad(e: [i32; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| {
        if e[i] == 0 {
            return 0.0;
        }
        let mut f = e;
        f[i] -= 1;
        e[i] as f64 * monomial(f, v)
    })
}

/// Seeded cubic polynomials in `V` scaled by `chi_{j+1}`, plus linear terms
/// in `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomPolynomial {
    pub seed: u64,
    pub dim: usize,
    pub cutoff: CutoffData,
    /// `rho` coefficients, one row of ten per output.
    pub rho_cubic: [[f64; 10]; 3],
    /// `rho` linear response to `K`, `3 x dim`.
    pub rho_linear: Vec<Vec<f64>>,
    /// `psi` linear part, `dim x dim`, rows summing in absolute value to at
    /// most `kappa0`.
    pub psi_linear: Vec<Vec<f64>>,
    pub psi_cubic: Vec<[f64; 10]>,
    pub declared: Envelope,
}

impl RandomPolynomial {
    pub fn new(seed: u64, dim: usize, kappa0: f64, scale_rho: f64, scale_psi: f64, coupling: f64, cutoff: CutoffData) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cubic = |rng: &mut ChaCha8Rng, s: f64| -> [f64; 10] { std::array::from_fn(|_| s * rng.gen_range(-1.0..=1.0)) };
        let rho_cubic = [cubic(&mut rng, scale_rho), cubic(&mut rng, scale_rho), cubic(&mut rng, scale_rho)];
        let psi_cubic = (0..dim).map(|_| cubic(&mut rng, scale_psi)).collect();
        let rho_linear = (0..3)
            .map(|_| (0..dim).map(|_| coupling * rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        let psi_linear = (0..dim)
            .map(|_| {
                let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let total: f64 = row.iter().map(|x: &f64| x.abs()).sum();
                let target = kappa0 * rng.gen_range(0.5..=1.0);
                row.into_iter().map(|x| if total > 0.0 { x * target / total } else { 0.0 }).collect()
            })
            .collect();
        let mut model = RandomPolynomial {
            seed,
            dim,
            cutoff,
            rho_cubic,
            rho_linear,
            psi_linear,
            psi_cubic,
            declared: Envelope {
                kappa: kappa0.max(1e-3),
                r: 0.0,
                m: 0.0,
            },
        };
        let sum = |c: &[f64; 10]| c.iter().map(|x| x.abs()).sum::<f64>();
        let r = model.psi_cubic.iter().map(sum).fold(0.0, f64::max);
        let m_rho = model.rho_cubic.iter().map(sum).fold(0.0, f64::max);
        let m_lin = model
            .rho_linear
            .iter()
            .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        model.declared.r = (4.0 * r).max(1e-6);
        model.declared.m = (10.0 * m_rho.max(r)).max(2.0 * m_lin).max(1e-6);
        model
    }
}

impl PerturbationModel for RandomPolynomial {
    fn name(&self) -> &str {
        "random"
    }

    fn d_k(&self, _j: usize) -> usize {
        self.dim
    }

    fn psi(&self, j: usize, k: &[f64], v: VTriple) -> Vec<f64> {
        let chi = self.cutoff.chi(j + 1);
        let va = v.as_array();
        (0..self.dim)
            .map(|i| {
                let lin: f64 = self.psi_linear[i].iter().zip(k).map(|(a, b)| a * b).sum();
                let cub: f64 = MONOMIALS.iter().zip(&self.psi_cubic[i]).map(|(e, c)| c * monomial(*e, va)).sum();
                lin + chi * cub
            })
            .collect()
    }

    fn rho(&self, j: usize, k: &[f64], v: VTriple) -> VTriple {
        let chi = self.cutoff.chi(j + 1);
        let va = v.as_array();
        VTriple::from_array(std::array::from_fn(|a| {
            let lin: f64 = self.rho_linear[a].iter().zip(k).map(|(x, y)| x * y).sum();
            let cub: f64 = MONOMIALS.iter().zip(&self.rho_cubic[a]).map(|(e, c)| c * monomial(*e, va)).sum();
            lin + chi * cub
        }))
    }

    fn jacobian(&self, j: usize, _k: &[f64], v: VTriple) -> Option<Mat> {
        let d = self.dim;
        let chi = self.cutoff.chi(j + 1);
        let va = v.as_array();
        let grads: Vec<[f64; 3]> = MONOMIALS.iter().map(|e| monomial_grad(*e, va)).collect();
        let mut m = Mat::zeros(d + 3, d + 3);
        let cubic_row = |coef: &[f64; 10]| -> [f64; 3] {
            std::array::from_fn(|c| chi * coef.iter().zip(&grads).map(|(a, g)| a * g[c]).sum::<f64>())
        };
        for i in 0..d {
            for l in 0..d {
                m.set(i, l, self.psi_linear[i][l]);
            }
            let g = cubic_row(&self.psi_cubic[i]);
            for c in 0..3 {
                m.set(i, d + c, g[c]);
            }
        }
        for a in 0..3 {
            for l in 0..d {
                m.set(d + a, l, self.rho_linear[a][l]);
            }
            let g = cubic_row(&self.rho_cubic[a]);
            for c in 0..3 {
                m.set(d + a, d + c, g[c]);
            }
        }
        Some(m)
    }

    fn declared(&self) -> Envelope {
        self.declared
    }
}
