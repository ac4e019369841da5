//! Model backends: anything that turns decode states into per-position
//! token distributions.

mod planted;
pub mod protocol;
mod remote;
mod stub;

pub use planted::{
    generate_instance, planted_predict, PlantedBackend, PlantedInstance, PlantedModelParams,
};
pub use remote::{serve, spawn_loopback, LoopbackWorker, WorkerConnection, DEFAULT_TIMEOUT};
pub use stub::{StubBackend, UniformBackend};

use crate::error::Result;
use crate::state::{DecodeState, PredictionMatrix, Vocabulary};

/// A denoising model.
///
/// Returned matrices must cover exactly each state's masked set, and
/// identical inputs must yield identical outputs.
pub trait ModelBackend {
    fn vocabulary(&self) -> Vocabulary;

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &mut B {
    fn vocabulary(&self) -> Vocabulary {
        (**self).vocabulary()
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        (**self).predict_batch(states, topk)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn vocabulary(&self) -> Vocabulary {
        (**self).vocabulary()
    }

    fn predict_batch(
        &mut self,
        states: &[DecodeState],
        topk: usize,
    ) -> Result<Vec<PredictionMatrix>> {
        (**self).predict_batch(states, topk)
    }
}
