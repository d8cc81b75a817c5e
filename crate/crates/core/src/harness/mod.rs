//! Instance generation, census sweeps, bipartite scans and output formats.

pub mod census;
pub mod instance;
pub mod output;
pub mod scan;
pub mod spec;

pub use census::{run_census, run_census_with, CensusRecord};
pub use instance::random_instance;
pub use scan::{scan_bipartite, ScanRow, ScanTable};
pub use spec::{ExperimentSpec, ScanMode};
