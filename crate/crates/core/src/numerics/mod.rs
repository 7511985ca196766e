//! Dense and CSR matrices, the reverse-mode tape and its optimizer.

mod adam;
pub(crate) mod dense;
mod gradcheck;
mod sparse;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use dense::{row_l2_normalize, DenseMat, NORM_EPS};
pub use gradcheck::{grad_check, grad_check_strided, GradCheckError, GradCheckReport, Scope, GRAD_CHECK_FLOOR};
pub use sparse::{spmm, SparseCsr};
pub use tape::{AttnMask, Grads, ParamId, ParamSet, Tape, Var};
