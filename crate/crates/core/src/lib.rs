//! Training and evaluation stack for multi-party cognitive-stimulation
//! dialogue between one assistant and several elderly participants.

pub mod autograd;
pub mod corpus;
pub mod dialogue;
pub mod dpsm;
pub mod metrics;
pub mod model;
pub mod mrpo;
pub mod objectives;
pub mod optim;
pub mod pgss;
pub mod pipeline;
pub mod tensor;
