//! Joint rigid motion estimation and reconstruction for 3D Cartesian MRI,
//! guided by a motion-free reference contrast through structure-guided
//! total variation.

pub mod bench;
pub mod error;
pub mod fft;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod motion_prior;
pub mod nufft;
pub mod optimizer;
pub mod pattern;
pub mod regularization;
pub mod simulation;
pub mod volume;

pub use error::{MocoError, Result};
pub use geometry::{MotionTrace, RigidParams};
pub use volume::{ComplexVolume3D, RealVolume3D, C64};
