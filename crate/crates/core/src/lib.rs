//! Generalized Sierpinski gaskets on Riemannian surfaces.
//!
//! A base geodesic triangle is subdivided by joining side midpoints with
//! minimal geodesics; the corner children form the cells `Δ_I`. The crate
//! builds those systems on flat, spherical, hyperbolic and custom charts,
//! audits the almost-similarity maps, and estimates dimensions through the
//! Moran equation, box counting and invariant measures.
//!
//! Everything numeric is generic over [`Real`]; the aliases below fix `f64`.

pub mod dimension;
pub mod error;
pub mod export;
pub mod expr;
pub mod gasket;
pub mod metric;
pub mod ode;
pub mod scalar;
pub mod surface;
pub mod transport;
pub mod triangle;

pub use error::{Error, Result};
pub use scalar::Real;

pub type SurfacePoint = surface::SurfacePoint<f64>;
pub type TangentVector = surface::TangentVector<f64>;
pub type SurfaceModel = surface::SurfaceModel<f64>;
pub type GeodesicSegment = surface::GeodesicSegment<f64>;
pub type GeodesicTriangleRegion = triangle::GeodesicTriangleRegion<f64>;
pub type TriangleSystem = gasket::TriangleSystem<f64>;
pub type Cell = gasket::Cell<f64>;
pub type RatioList = dimension::RatioList<f64>;
pub type MoranSolution = dimension::MoranSolution<f64>;
pub type DiscreteMeasure = transport::DiscreteMeasure<SurfacePoint, f64>;
pub type PointCloud = metric::PointCloud<SurfacePoint, f64>;
