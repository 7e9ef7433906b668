//! Compositional diffusion world model over a symbolic gridworld.
//!
//! Instructions are parsed into primitives ([`instr`]), each primitive
//! conditions one evaluation of a shared noise-prediction network
//! ([`nn`]), and the per-primitive predictions are composed at sampling time
//! ([`diffusion`]). Sampled plans are decoded back to world states
//! ([`encoding`]) and executed through an inverse-dynamics model
//! ([`invdyn`]) in a deterministic gridworld ([`gridworld`]).

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoding;
pub mod evalsuite;
pub mod gridworld;
pub mod instr;
pub mod invdyn;
pub mod nn;
pub mod pipeline;
pub mod util;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] instr::ParseError),
    #[error(transparent)]
    Lexicon(#[from] instr::LexiconError),
    #[error(transparent)]
    World(#[from] gridworld::WorldError),
    #[error(transparent)]
    Encoding(#[from] encoding::EncodingError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error("config digest mismatch: {what} was produced under {found}, expected {expected}")]
    ConfigMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
