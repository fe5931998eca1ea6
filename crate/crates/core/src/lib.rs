//! Node embeddings for heterogeneous graphs built from learned set functions
//! over per-type neighborhoods, weighted by a learned spectral filter.

pub mod checks;
pub mod diffnet;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod spectral;
pub mod synthetic;

pub use error::{GesfError, Result};
pub use graph::{load_graph, make_split, write_graph, Graph, Label, LabelMode, Split};
pub use spectral::{SpectralBasis, SpectralOptions};
