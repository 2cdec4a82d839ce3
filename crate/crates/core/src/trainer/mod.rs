//! Optimization, model selection and checkpoints.

mod adam;
mod checkpoint;
mod fit;
mod grid;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{Checkpoint, RngState, VERSION as CHECKPOINT_VERSION};
pub use fit::{fit, EpochRecord, FitOutcome, TrainPhase, TrainReport, SHUFFLE_STREAM, TRAIN_SELECTION_STREAM};
pub use grid::{expand_grid, grid_search, GridCell, GridResult, GridRow};
