//! Growing-geometry finite-element toolkit for part-scale thermal analysis
//! of powder-bed additive manufacturing.

pub mod benchmark;
pub mod collision;
pub mod config;
pub mod domain;
pub mod fe_space;
pub mod geometry;
pub mod laser_path;
pub mod octree;
pub mod partition;
pub mod pipeline;
pub mod search;
pub mod solver;
pub mod status;
pub mod thermal;
pub mod transport;
pub mod vtk;

pub use geometry::{GeometryMap, Point3};
pub use octree::{
    morton_encode, LeafOrigin, MortonIndex, OctantKey, OctreeError, OctreeMesh, RefinementFlag,
    MAX_LEVEL,
};
pub use partition::{Partition, WeightFunction};
pub use status::{CellStatus, InactiveTag};
pub use transport::{Transport, TransportMode};
pub use config::PipelineConfig;
pub use pipeline::{run, RunArtifacts, RunOptions, RunReport};
