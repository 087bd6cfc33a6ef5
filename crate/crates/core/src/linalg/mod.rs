//! Dense linear algebra used by the quantizers.

mod eig;
mod gen;
mod haar;
mod kron;
mod ldl;
mod perm;

pub use eig::{psd_sqrt, pseudo_inverse, sym_eig, sym_eig_jacobi, sym_eigvals, SymEig};
pub use gen::{generate_lowrank_psd, gaussian_matrix, SpectrumSpec, geometric_spectrum, uniform_matrix};
pub use haar::{haar_from_rng, orthogonality_error, sample_haar_orthogonal};
pub use kron::{factor_pair, KroneckerOrthogonal, Side};
pub use ldl::{
    cholesky_lower, cholesky_lower_semidefinite, ldl_decompose, spd_inverse, unit_upper_inverse,
    LdlFactors,
};
pub use perm::Permutation;
