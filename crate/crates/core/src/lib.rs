//! Estimation of fiber orientation distribution functions (fODFs) from
//! diffusion-weighted MRI signals, with two estimators — constrained
//! spherical deconvolution and a 3D-patch neural regressor trained with a
//! scan-rescan consistency loss — plus synthetic phantoms, angular
//! correlation evaluation, and connectome graph measures.
//!
//! Everything is seed-deterministic: the same inputs and seeds reproduce
//! bit-identical outputs regardless of thread count.

pub mod io;
pub mod net;
pub mod phantom;
pub mod sh;
pub mod sphere;
