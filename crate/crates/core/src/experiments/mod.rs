//! Command runners. Each returns a serializable report.

pub mod ablate;
pub mod gradcheck;
pub mod oracle;
pub mod train;
