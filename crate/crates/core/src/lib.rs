//! Teacher-free knowledge distillation toolkit.
//!
//! The crate bundles a small float64 autodiff engine ([`tensor`]), every
//! target construction and loss used by label smoothing and knowledge
//! distillation ([`losses`]), desk-scale models ([`nn`]), SGD with step
//! schedules ([`optim`]), dataset ingestion ([`data`]), training protocols
//! ([`trainer`]), the config-driven experiment layer used by the CLI
//! ([`experiment`]) and numerical self-checks ([`verify`]).

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use nn::{Architecture, Model, ModelDescriptor};
pub use tensor::{Gradients, Tape, Tensor, Var};
