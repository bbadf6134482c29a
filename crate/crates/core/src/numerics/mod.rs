//! Dense and sparse linear algebra, spectral norms, and PCA.

mod dense;
mod pca;
mod sparse;
mod spectral;

pub use dense::{argmax, matmul, softmax, DenseMatrix};
pub(crate) use dense::{dist2, norm2};
pub use pca::{pca_fit, pca_transform, PcaModel};
pub use sparse::{spmm, CsrMatrix};
pub use spectral::spectral_norm;
