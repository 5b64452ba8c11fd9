//! Flow models built from coupling stacks: the hierarchical RG flow and a
//! flat flow on 2-D points.

mod flat;
mod prior;
mod rgflow;

#[cfg(test)]
mod tests;

pub use flat::{FlatFlow2d, FlatFlowConfig};
pub use prior::{Prior, PriorKind, TemperatureSchedule};
pub use rgflow::{LatentPyramid, Level, ModelConfig, RgFlowModel, EVAL_CHUNK};

use crate::error::Result;
use crate::nn::{Binding, Checkpoint, ParamStore, Real, Var};

/// What the trainer needs from a density model.
pub trait FlowModel<T: Real> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    /// Values per data row.
    fn dim(&self) -> usize;
    /// `log p(x)` per row (`B x 1`), recorded on `b`'s tape.
    fn log_prob_var(&self, b: &Binding<'_, T>, x: &Var<T>) -> Result<Var<T>>;
    fn to_checkpoint(&self) -> Checkpoint;
    fn load_params(&mut self, ck: &Checkpoint) -> Result<()>;
}
