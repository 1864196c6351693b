pub mod curation;
pub mod eval;
pub mod preference;
pub mod sandbox;
pub mod syntax;
pub mod task;
