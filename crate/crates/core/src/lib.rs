//! Poison-perturbation defense against facial manipulation models.
//!
//! A perturbation generator learns bounded noise that, once added to face
//! data, spoils what a manipulation model produces from it. Two settings are
//! covered: attribute editing with an already-trained editor, and
//! landmark-driven reenactment where the forger trains on the poisoned
//! frames.

pub mod autograd;
pub mod dataio;
pub mod evaluation;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};

/// Manipulation scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    AttributeEditing,
    Reenactment,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::AttributeEditing => "attribute_editing",
            Task::Reenactment => "reenactment",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute_editing" | "editing" => Ok(Task::AttributeEditing),
            "reenactment" => Ok(Task::Reenactment),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}
