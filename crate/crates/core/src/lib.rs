//! Annotation, agreement and modelling toolkit for studying which visual
//! traits make image memes spread.

pub mod agreement;
pub mod codebook;
pub mod features;
pub mod learners;
pub mod pipeline;
pub mod store;
pub mod synthetic;
