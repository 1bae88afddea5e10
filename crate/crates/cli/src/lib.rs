//! Batch driver for the `dama` library: spec parsing, grid runs and the
//! verification suite behind the `dama` binary.

pub mod experiment;
pub mod spec;
pub mod verify;

use std::path::Path;

use spec::{ExperimentSpec, Overrides, SpecError};

pub const EXIT_OK: i32 = 0;
/// Verification failure or a runtime error.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_SPEC: i32 = 2;
/// Every cell of the grid diverged.
pub const EXIT_ALL_DIVERGED: i32 = 3;

/// Reads and parses a spec file.
pub fn load_spec(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec, SpecError> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| SpecError::single(&name, 0, format!("cannot read: {e}")))?;
    spec::parse(&text, &name, overrides)
}
