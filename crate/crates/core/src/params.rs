//! Coefficient sequences and the cut-off machinery.
//!
//! Every coefficient is an infinite sequence stored as a finite prefix plus a
//! tail rule, so any index can be queried and suprema are resolved in closed
//! form.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};

/// How a sequence continues past its stored prefix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum TailRule {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// `value * ratio^(j - prefix_len)` for `j >= prefix_len`.
    Geometric {
        value: f64,
        ratio: f64,
    },
}

/// A real sequence indexed by `j >= 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Sequence {
    #[serde(default)]
    pub prefix: Vec<f64>,
    #[serde(default)]
    pub tail: TailRule,
}

impl Sequence {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        Sequence {
            prefix: Vec::new(),
            tail: TailRule::Constant { value },
        }
    }

    pub fn new(prefix: Vec<f64>, tail: TailRule) -> Self {
        Sequence { prefix, tail }
    }

    /// `value` for `j <= last`, zero afterwards.
    pub fn cut(value: f64, last: usize) -> Self {
        Sequence {
            prefix: vec![value; last + 1],
            tail: TailRule::Zero,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    pub fn at(&self, j: usize) -> f64 {
        if let Some(&x) = self.prefix.get(j) {
            return x;
        }
        match self.tail {
            TailRule::Zero => 0.0,
            TailRule::Constant { value } => value,
            TailRule::Geometric { value, ratio } => value * int_pow(ratio, j - self.prefix.len()),
        }
    }

    /// Checks finiteness and boundedness; `name` ends up in the message.
    pub fn validate(&self, name: &str) -> Result<()> {
        if let Some(i) = self.prefix.iter().position(|x| !x.is_finite()) {
            return Err(FlowError::InvalidParameters(format!(
                "{name}.prefix[{i}] is not finite"
            )));
        }
        match self.tail {
            TailRule::Zero => Ok(()),
            TailRule::Constant { value } if value.is_finite() => Ok(()),
            TailRule::Constant { .. } => Err(FlowError::InvalidParameters(format!(
                "{name}.tail.value is not finite"
            ))),
            TailRule::Geometric { value, ratio } => {
                if !value.is_finite() || !ratio.is_finite() {
                    Err(FlowError::InvalidParameters(format!(
                        "{name}.tail is not finite"
                    )))
                } else if ratio.abs() > 1.0 && value != 0.0 {
                    Err(FlowError::InvalidParameters(format!(
                        "{name}.tail.ratio = {ratio} makes the sequence unbounded"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// `sup_j |s_j|`, resolved analytically on the tail.
    pub fn sup_abs(&self) -> f64 {
        let head = self.prefix.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let tail = match self.tail {
            TailRule::Zero => 0.0,
            TailRule::Constant { value } => value.abs(),
            TailRule::Geometric { value, ratio } => {
                if ratio.abs() > 1.0 && value != 0.0 {
                    f64::INFINITY
                } else {
                    value.abs()
                }
            }
        };
        head.max(tail)
    }

    /// `inf_{j >= from} s_j` over the tail region (`from >= prefix_len`).
    pub fn tail_inf(&self, from: usize) -> f64 {
        let from = from.max(self.prefix.len());
        match self.tail {
            TailRule::Zero => 0.0,
            TailRule::Constant { value } => value,
            TailRule::Geometric { value, ratio } => {
                let first = value * int_pow(ratio, from - self.prefix.len());
                if ratio.abs() < 1.0 {
                    first.min(first * ratio).min(0.0)
                } else {
                    first.min(first * ratio)
                }
            }
        }
    }

    /// Whether the tail stays constant from `prefix_len` on.
    pub fn tail_is_constant(&self) -> bool {
        matches!(self.tail, TailRule::Zero | TailRule::Constant { .. })
            || matches!(self.tail, TailRule::Geometric { value, ratio } if value == 0.0 || ratio == 1.0)
    }

    /// Constant tail value if the tail is constant.
    pub fn tail_constant(&self) -> Option<f64> {
        match self.tail {
            TailRule::Zero => Some(0.0),
            TailRule::Constant { value } => Some(value),
            TailRule::Geometric { value, .. } if value == 0.0 => Some(0.0),
            TailRule::Geometric { value, ratio } if ratio == 1.0 => Some(value),
            _ => None,
        }
    }

    /// Multiply every entry by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let prefix = self.prefix.iter().map(|x| x * s).collect();
        let tail = match self.tail {
            TailRule::Zero => TailRule::Zero,
            TailRule::Constant { value } => TailRule::Constant { value: value * s },
            TailRule::Geometric { value, ratio } => TailRule::Geometric {
                value: value * s,
                ratio,
            },
        };
        Sequence { prefix, tail }
    }
}

pub(crate) fn int_pow(x: f64, n: usize) -> f64 {
    if n <= i32::MAX as usize {
        x.powi(n as i32)
    } else {
        x.powf(n as f64)
    }
}

/// Coefficient values at a single step `j`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize)]
pub struct StepCoeffs {
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub theta: f64,
    pub zeta: f64,
    pub ups_gg: f64,
    pub ups_gz: f64,
    pub ups_gmu: f64,
    pub ups_zz: f64,
    pub ups_zmu: f64,
}

/// The full set of coefficient sequences plus the decay base `omega`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSeq {
    #[serde(default)]
    pub beta: Sequence,
    #[serde(default)]
    pub eta: Sequence,
    #[serde(default)]
    pub gamma: Sequence,
    #[serde(default = "default_lambda")]
    pub lambda: Sequence,
    #[serde(default)]
    pub theta: Sequence,
    #[serde(default)]
    pub zeta: Sequence,
    #[serde(default)]
    pub ups_gg: Sequence,
    #[serde(default)]
    pub ups_gz: Sequence,
    #[serde(default)]
    pub ups_gmu: Sequence,
    #[serde(default)]
    pub ups_zz: Sequence,
    #[serde(default)]
    pub ups_zmu: Sequence,
    #[serde(alias = "Omega", default = "default_omega")]
    pub omega: f64,
}

fn default_lambda() -> Sequence {
    Sequence::constant(2.0)
}

fn default_omega() -> f64 {
    2.0
}

impl Default for ParamSeq {
    fn default() -> Self {
        ParamSeq {
            beta: Sequence::zero(),
            eta: Sequence::zero(),
            gamma: Sequence::zero(),
            lambda: default_lambda(),
            theta: Sequence::zero(),
            zeta: Sequence::zero(),
            ups_gg: Sequence::zero(),
            ups_gz: Sequence::zero(),
            ups_gmu: Sequence::zero(),
            ups_zz: Sequence::zero(),
            ups_zmu: Sequence::zero(),
            omega: default_omega(),
        }
    }
}

impl ParamSeq {
    /// Named view over all sequences, in a fixed order.
    pub fn named(&self) -> [(&'static str, &Sequence); 11] {
        [
            ("beta", &self.beta),
            ("eta", &self.eta),
            ("gamma", &self.gamma),
            ("lambda", &self.lambda),
            ("theta", &self.theta),
            ("zeta", &self.zeta),
            ("ups_gg", &self.ups_gg),
            ("ups_gz", &self.ups_gz),
            ("ups_gmu", &self.ups_gmu),
            ("ups_zz", &self.ups_zz),
            ("ups_zmu", &self.ups_zmu),
        ]
    }

    /// The sequences whose size is tied to the cut-off envelope.
    pub fn enveloped(&self) -> [(&'static str, &Sequence); 9] {
        [
            ("eta", &self.eta),
            ("gamma", &self.gamma),
            ("theta", &self.theta),
            ("zeta", &self.zeta),
            ("ups_gg", &self.ups_gg),
            ("ups_gz", &self.ups_gz),
            ("ups_gmu", &self.ups_gmu),
            ("ups_zz", &self.ups_zz),
            ("ups_zmu", &self.ups_zmu),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega > 1.0) {
            return Err(FlowError::InvalidParameters(format!(
                "omega must be a finite number > 1, got {}",
                self.omega
            )));
        }
        for (name, s) in self.named() {
            s.validate(name)?;
        }
        Ok(())
    }

    pub fn at(&self, j: usize) -> StepCoeffs {
        StepCoeffs {
            beta: self.beta.at(j),
            eta: self.eta.at(j),
            gamma: self.gamma.at(j),
            lambda: self.lambda.at(j),
            theta: self.theta.at(j),
            zeta: self.zeta.at(j),
            ups_gg: self.ups_gg.at(j),
            ups_gz: self.ups_gz.at(j),
            ups_gmu: self.ups_gmu.at(j),
            ups_zz: self.ups_zz.at(j),
            ups_zmu: self.ups_zmu.at(j),
        }
    }

    /// Length beyond which every sequence follows its tail rule.
    pub fn prefix_len(&self) -> usize {
        self.named().iter().map(|(_, s)| s.prefix_len()).max().unwrap_or(0)
    }

    pub fn beta_sup(&self) -> f64 {
        self.beta.sup_abs()
    }
}

/// Cut-off index together with the decay base.
///
/// `j_omega == None` encodes an infinite cut-off time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffData {
    pub j_omega: Option<usize>,
    pub omega: f64,
}

impl CutoffData {
    pub fn infinite(omega: f64) -> Self {
        CutoffData {
            j_omega: None,
            omega,
        }
    }

    pub fn chi(&self, j: usize) -> f64 {
        chi(j, self)
    }

    /// `Omega^{(j - j_omega)_+}`, the reciprocal of `chi`.
    pub fn chi_inv(&self, j: usize) -> f64 {
        match self.j_omega {
            Some(k) if j > k => int_pow(self.omega, j - k),
            _ => 1.0,
        }
    }
}

pub fn chi(j: usize, cutoff: &CutoffData) -> f64 {
    match cutoff.j_omega {
        Some(k) if j > k => int_pow(cutoff.omega, j - k).recip(),
        _ => 1.0,
    }
}

/// Smallest `k` with `|b| * omega^{(j-k)_+} <= sup` for a single entry.
fn min_index_for(j: usize, b: f64, sup: f64, omega: f64) -> usize {
    if b == 0.0 {
        return 0;
    }
    let mut e = ((sup / b).ln() / omega.ln()).floor().max(0.0) as usize;
    e = e.min(j);
    while e < j && b * int_pow(omega, e + 1) <= sup {
        e += 1;
    }
    while e > 0 && b * int_pow(omega, e) > sup {
        e -= 1;
    }
    j - e
}

/// Minimal `k` such that `|beta_j| <= omega^{-(j-k)_+} sup|beta|` for all `j`.
pub fn cutoff_time(params: &ParamSeq) -> Result<CutoffData> {
    params.validate()?;
    let omega = params.omega;
    let beta = &params.beta;
    let sup = beta.sup_abs();
    if !sup.is_finite() {
        return Err(FlowError::InvalidParameters("beta is unbounded".into()));
    }
    if sup == 0.0 {
        return Ok(CutoffData {
            j_omega: Some(0),
            omega,
        });
    }
    let mut k = 0usize;
    for (j, &b) in beta.prefix.iter().enumerate() {
        k = k.max(min_index_for(j, b.abs(), sup, omega));
    }
    let l = beta.prefix.len();
    match beta.tail {
        TailRule::Zero => {}
        TailRule::Constant { value } => {
            if value != 0.0 {
                return Ok(CutoffData::infinite(omega));
            }
        }
        TailRule::Geometric { value, ratio } => {
            if value != 0.0 {
                if ratio == 0.0 || ratio.abs() * omega <= 1.0 {
                    k = k.max(min_index_for(l, value.abs(), sup, omega));
                } else {
                    return Ok(CutoffData::infinite(omega));
                }
            }
        }
    }
    Ok(CutoffData {
        j_omega: Some(k),
        omega,
    })
}

/// Default working horizon: long enough that `chi_J <= tol` once the cut-off
/// is finite, and never shorter than 1000 steps.
pub fn default_horizon(cutoff: &CutoffData, tol: f64) -> usize {
    const FLOOR: usize = 1000;
    match cutoff.j_omega {
        Some(k) => {
            let n = ((1.0 / tol).ln() / cutoff.omega.ln()).ceil().max(0.0) as usize;
            (k + n).max(FLOOR)
        }
        None => FLOOR,
    }
}
