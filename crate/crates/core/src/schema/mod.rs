//! Unified query-processing data model: entities, segments, term weights,
//! taxonomy labels and intent description, with canonical JSON and
//! validation.

mod json;
mod types;
mod validate;

pub use json::{
    parse_output, parse_output_with, serialize_covered, serialize_output, ParseError, ParseMode, Repair,
    ValidationError, KEYS,
};
pub use types::*;
pub use validate::{validate, validate_covered, Violation};
