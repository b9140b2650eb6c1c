//! Identification of the constraint, grasp mode and slip axis behind a
//! manipulation demonstration, from end-effector pose and wrench recordings
//! plus optional two-pad grip forces.
//!
//! The pipeline fits nine constraint models (axial, prismatic or planar
//! motion, each with a rigid, slipping or free grasp), scores each against
//! the recording through position, force, orientation and moment residuals,
//! and picks the base articulation first and the grasp mode second, the
//! latter combining kinematic evidence with a friction-coefficient posterior.
//!
//! ```no_run
//! use slipfit::{classify, io, Config};
//!
//! let cfg = Config::default();
//! let demo = io::ingest("demo.csv".as_ref(), &cfg)?;
//! let report = classify(&demo, &cfg)?;
//! println!("{}", report.model());
//! # Ok::<(), slipfit::Error>(())
//! ```

pub mod config;
pub mod error;
pub mod evidence;
pub mod fitting;
pub mod friction;
pub mod geometry;
pub mod io;
pub mod models;
pub mod selection;
pub mod synth;

pub use config::{Config, IngestionConfig};
pub use error::{Error, Result};
pub use evidence::{ErrorModelConfig, EvidenceSeries, Thresholds, ViolationCounts};
pub use fitting::{FitResult, LagrangeSolution, ProjectedPose, SolverConfig};
pub use friction::{FrictionPriorConfig, FrictionSeries, RigConfig, TongSample};
pub use geometry::{Demonstration, ExpCoords, PoseSample, Quat, Vec3, WrenchSample};
pub use models::{BaseArticulation, ModelId, ModelParams, OrientationMode};
pub use selection::{classify, Analysis, ModePosterior, ModelReport};
pub use synth::{GroundTruth, NoisePreset, ScenarioSpec};
