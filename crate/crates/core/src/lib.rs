//! Counterfactual preference data for local navigation: trajectory geometry,
//! candidate generation, preference storage and aggregation, safety metrics,
//! a small simulator, the trajectory policy and its asynchronous executor.

pub mod annotation;
pub mod counterfactual;
pub mod executor;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod policy;
pub mod preference;
pub mod scalar;
pub mod sim;

pub use scalar::Scalar;

pub type Pose2 = geometry::Pose2<f64>;
pub type Trajectory = geometry::Trajectory<f64>;
pub type Transform2 = geometry::Transform2<f64>;
pub type CandidateSet = counterfactual::CandidateSet<f64>;
pub type Candidate = counterfactual::Candidate<f64>;
pub type LaserScan = metrics::LaserScan<f64>;
pub type ObstacleCloud = metrics::ObstacleCloud<f64>;
