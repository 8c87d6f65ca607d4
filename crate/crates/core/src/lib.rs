//! Desk-scale inverse renderer for glossy Gaussian surfels.
//!
//! Forward path: 2D Gaussian surfels with a microfacet specular model whose
//! NDF is an anisotropically warped spherical Gaussian, lit by a 16x32
//! environment map plus per-surfel indirect SH, with ray-traced visibility
//! over icosahedron-bounded surfel proxies. Inverse path: hand-written
//! analytic gradients through the whole pipeline and a three-stage fitting
//! schedule.

pub mod brdf;
pub mod io;
pub mod lighting;
pub mod math;
pub mod optimize;
pub mod rasterize;
pub mod raytrace;
pub mod scene;
pub mod surfel;
