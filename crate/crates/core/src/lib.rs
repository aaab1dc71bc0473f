//! Physics-driven GraphSAGE: a graph network over the nodes of a P2
//! triangle mesh, trained on the Galerkin residual of a linear second-order
//! PDE with Dirichlet values imposed exactly.

pub mod autodiff;
pub mod case;
pub mod error;
pub mod fem;
pub mod graphrep;
pub mod grf;
pub mod linalg;
pub mod mesh;
pub mod model;
pub mod physics;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use case::{CaseConfig, CaseSetup, FieldSpec, ReferenceSpec};
pub use error::{Error, Result};
pub use fem::{Field, P2Space, PdeCoefficients, Source};
pub use graphrep::{Adjacency, EdgeFeatureKind, GraphTopology};
pub use grf::{ExponentMode, GrfConfig, GrfField};
pub use mesh::{BBox, Mesh, Point};
pub use model::{Architecture, GraphContext, MappingSpec, Model, ModelConfig};
pub use physics::ResidualSystem;
pub use training::{Evaluation, Problem, Sample, TrainConfig, TrainHistory, TrainMode};
