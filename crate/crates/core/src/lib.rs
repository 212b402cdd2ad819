//! Points-based oriented object detection toolkit.
//!
//! Predictions are sets of representative points rather than angle-regressed
//! boxes. Training compares point sets with ground-truth corners through
//! their convex hulls; inference fits a minimum-area rectangle.

pub mod error;
pub mod eval;
pub mod formats;
pub mod geom;
pub mod loss;
pub mod matching;
pub mod querymodel;
pub mod rng;
pub mod synth;

pub use error::{CheckpointError, EvalError, GeomError, LossError, ModelError, ParseError};
pub use geom::{ConvexPolygon, Point2, PointSet, RotatedBox};
