//! Test helpers shared by the integration tests and the acceptance runner.

pub mod checks;
pub mod oracles;
