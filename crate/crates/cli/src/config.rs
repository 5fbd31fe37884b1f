//! Run configuration: one JSON file per run, overridable from the command line.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use rgflow::params::cutoff_time;
use rgflow::{
    CubicMonomial, FlowSpec, HomotopyConfig, LinearPsi, ParamSeq, PerturbationModel, QuadraticOptions,
    RandomPolynomial, Sequence, TailRule, ZeroPerturbation,
};

use crate::CliError;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub params: ParamSeq,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub g0: Option<f64>,
    /// Initial `K`; zero of the model's dimension when absent.
    #[serde(default)]
    pub k0: Option<Vec<f64>>,
    #[serde(default)]
    pub quadratic: QuadraticOptions,
    #[serde(default)]
    pub homotopy: HomotopyConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    #[default]
    Zero,
    LinearPsi {
        kappa: f64,
    },
    Cubic {
        c_rho: f64,
        c_psi: f64,
        kappa: f64,
    },
    /// Coefficients drawn from the run seed.
    RandomPolynomial {
        dim: usize,
        kappa: f64,
        scale_rho: f64,
        scale_psi: f64,
        coupling: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub a: f64,
    pub a_star: f64,
    pub h: f64,
    pub b: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            a: 1.0,
            a_star: 0.5,
            h: 1.0,
            b: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// One flow per initial coupling, with `g0`-derivatives.
    #[default]
    G0,
    /// `beta` scaled by each `m` at fixed `g0`.
    BetaScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub g0_grid: Vec<f64>,
    pub m_grid: Vec<f64>,
    pub derivatives: bool,
    /// Finite-difference step as a fraction of `g0`.
    pub dg0_fraction: f64,
    pub j_report: usize,
    pub min_success_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: SweepKind::G0,
            g0_grid: Vec::new(),
            m_grid: Vec::new(),
            derivatives: true,
            dg0_fraction: 0.05,
            j_report: 0,
            min_success_fraction: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub shooting_tol: f64,
    pub sweep_tol: f64,
    pub max_sweeps: usize,
    pub gap_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            shooting_tol: 1e-13,
            sweep_tol: 1e-13,
            max_sweeps: 500,
            gap_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub only: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from(".") }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub g0: Option<f64>,
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
    pub env_seed: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub only: Option<String>,
    pub force: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Precedence is file, then `RGFLOW_SEED`, then flags.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = &o.env_seed {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("RGFLOW_SEED: not an unsigned integer: {s:?}")))?;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(g) = o.g0 {
            self.g0 = Some(g);
        }
        if let Some(h) = o.horizon {
            self.quadratic.horizon = Some(h);
        }
        if let Some(d) = &o.out_dir {
            self.output.dir = d.clone();
        }
        if let Some(n) = &o.only {
            self.verify.only = Some(n.clone());
        }
        if o.force {
            self.quadratic.enforce_assumptions = false;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Err(e) = self.params.validate() {
            return bad(format!("params: {e}"));
        }
        if let Some(g) = self.g0 {
            check_g0("g0", g)?;
        }
        let s = &self.scheme;
        if !(s.a_star > 0.0 && s.a > s.a_star && s.a.is_finite()) {
            return bad(format!("scheme: need 0 < a_star < a, got a = {}, a_star = {}", s.a, s.a_star));
        }
        if !(s.h > 0.0 && s.h.is_finite()) {
            return bad(format!("scheme.h must be positive, got {}", s.h));
        }
        if !(s.b > 0.0 && s.b <= 1.0) {
            return bad(format!("scheme.b must lie in (0, 1], got {}", s.b));
        }
        if !(self.quadratic.tol > 0.0) {
            return bad(format!("quadratic.tol must be positive, got {}", self.quadratic.tol));
        }
        if self.quadratic.horizon == Some(0) {
            return bad("quadratic.horizon must be at least 1".into());
        }
        if let Err(e) = self.homotopy.validate() {
            return bad(format!("homotopy: {e}"));
        }
        self.validate_model()?;
        for (i, &g) in self.sweep.g0_grid.iter().enumerate() {
            check_g0(&format!("sweep.g0_grid[{i}]"), g)?;
        }
        if let Some(i) = self.sweep.m_grid.iter().position(|m| !m.is_finite()) {
            return bad(format!("sweep.m_grid[{i}] is not finite"));
        }
        if !(self.sweep.dg0_fraction > 0.0 && self.sweep.dg0_fraction < 1.0) {
            return bad(format!("sweep.dg0_fraction must lie in (0, 1), got {}", self.sweep.dg0_fraction));
        }
        if !(0.0..=1.0).contains(&self.sweep.min_success_fraction) {
            return bad(format!(
                "sweep.min_success_fraction must lie in [0, 1], got {}",
                self.sweep.min_success_fraction
            ));
        }
        let o = &self.oracle;
        if !(o.shooting_tol > 0.0 && o.sweep_tol > 0.0 && o.gap_tol > 0.0) || o.max_sweeps == 0 {
            return bad("oracle: tolerances and max_sweeps must be positive".into());
        }
        Ok(())
    }

    fn validate_model(&self) -> Result<(), CliError> {
        let ok = match self.model {
            ModelConfig::Zero => true,
            ModelConfig::LinearPsi { kappa } => (0.0..1.0).contains(&kappa),
            ModelConfig::Cubic { c_rho, c_psi, kappa } => {
                (0.0..1.0).contains(&kappa) && c_rho.is_finite() && c_psi.is_finite()
            }
            ModelConfig::RandomPolynomial {
                dim,
                kappa,
                scale_rho,
                scale_psi,
                coupling,
            } => {
                dim > 0
                    && (0.0..1.0).contains(&kappa)
                    && scale_rho >= 0.0
                    && scale_psi >= 0.0
                    && coupling >= 0.0
                    && scale_rho.is_finite()
                    && scale_psi.is_finite()
                    && coupling.is_finite()
            }
        };
        if !ok {
            return Err(CliError::Config(format!(
                "model: coefficients out of range in {:?} (kappa must lie in [0, 1), scales non-negative)",
                self.model
            )));
        }
        if let Some(k0) = &self.k0 {
            if k0.iter().any(|x| !x.is_finite()) {
                return Err(CliError::Config("k0 entries must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn require_g0(&self) -> Result<f64, CliError> {
        self.g0
            .ok_or_else(|| CliError::Config("g0 is required (set it in the config or pass --g0)".into()))
    }

    pub fn build_model(&self, params: &ParamSeq) -> rgflow::Result<Arc<dyn PerturbationModel>> {
        Ok(match self.model {
            ModelConfig::Zero => Arc::new(ZeroPerturbation::default()),
            ModelConfig::LinearPsi { kappa } => Arc::new(LinearPsi::new(kappa)),
            ModelConfig::Cubic { c_rho, c_psi, kappa } => {
                Arc::new(CubicMonomial::new(c_rho, c_psi, kappa, cutoff_time(params)?))
            }
            ModelConfig::RandomPolynomial {
                dim,
                kappa,
                scale_rho,
                scale_psi,
                coupling,
            } => Arc::new(RandomPolynomial::new(
                self.seed,
                dim,
                kappa,
                scale_rho,
                scale_psi,
                coupling,
                cutoff_time(params)?,
            )),
        })
    }

    pub fn flow_spec_for(&self, params: ParamSeq) -> rgflow::Result<FlowSpec> {
        let model = self.build_model(&params)?;
        let mut spec = FlowSpec::new(params, model);
        if let Some(k0) = &self.k0 {
            spec.k0 = k0.clone();
        }
        spec.a = self.scheme.a;
        spec.a_star = self.scheme.a_star;
        spec.h = self.scheme.h;
        spec.b = self.scheme.b;
        spec.quad = self.quadratic;
        spec.homotopy = self.homotopy;
        Ok(spec)
    }

    pub fn flow_spec(&self) -> rgflow::Result<FlowSpec> {
        self.flow_spec_for(self.params.clone())
    }
}

fn check_g0(name: &str, g: f64) -> Result<(), CliError> {
    if g > 0.0 && g < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must lie in (0, 1), got {g}")))
    }
}

/// `m * s`, keeping the tail rule.
pub fn scale_sequence(s: &Sequence, m: f64) -> Sequence {
    let tail = match s.tail {
        TailRule::Zero => TailRule::Zero,
        TailRule::Constant { value } => TailRule::Constant { value: m * value },
        TailRule::Geometric { value, ratio } => TailRule::Geometric { value: m * value, ratio },
    };
    Sequence::new(s.prefix.iter().map(|x| m * x).collect(), tail)
}
