//! Weighted least-squares identification: inverse-FRF weighting,
//! Sanathanan-Koerner iterations on the LMFD structure and
//! Levenberg-Marquardt refinement of LMFD or modal parameters.

mod cost;
mod extend;
mod lm;
mod param;
mod report;
mod sk;
mod weighting;

pub use cost::{cost, cost_of_responses, try_cost};
pub use extend::{append_outputs, extend_outputs, Extension};
pub use lm::{lm_refine, normal_equations, LmOptions};
pub use param::{LmfdParam, ModalParam, Parametrization};
pub use report::{trace_from_text, trace_to_text, SolveReport, Termination, TraceEntry};
pub use sk::{levy_estimate, refit_numerator, sk_regression, sk_solve, sk_step, BasisKind, Regression, SkOptions};
pub use weighting::{uniform_weighting, w_max_heuristic, weighting_inv_truncated, WeightSource, WeightingSpec};
