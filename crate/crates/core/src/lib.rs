//! Discrete renormalisation-group flows: the quadratic approximate flow, the
//! perturbation models around it, the linearised boundary-value operator,
//! and the homotopy that connects them.

pub mod assumptions;
pub mod error;
pub mod homotopy;
pub mod linalg;
pub mod linear;
pub mod model;
pub mod params;
pub mod quadratic;
pub mod spaces;

pub use error::{FlowError, Result};
pub use homotopy::{integrate_homotopy, FlowProblem, FlowResult, FlowSpec, HomotopyConfig, Integrator};
pub use model::{CubicMonomial, Envelope, LinearPsi, PerturbationModel, RandomPolynomial, ZeroPerturbation};
pub use params::{CutoffData, ParamSeq, Sequence, TailRule};
pub use quadratic::{solve_quadratic_bvp, QuadraticOptions, QuadraticSolution, VTriple};
pub use spaces::{Component, FlowSequence, WeightScheme, Which};
