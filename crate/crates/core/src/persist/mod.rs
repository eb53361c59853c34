//! Checkpoints and reports.

mod checkpoint;
mod report;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, write_atomic, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use report::{round4, sweep_csv, sweep_table, EvalReport, RunReport, DECIMALS};
