//! Training loop, checkpoints and experiment protocols.

pub mod checkpoint;
mod grid;
mod optim;
mod run;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use grid::{
    intermediate_run, multi_task_run, persist, prompt_length_sweep, read_jsonl, run_grid, sweep_table, write_jsonl, GridReport,
    IntermediateReport, MeanStderr, PairedExperiment, SweepPoint, ZeroShot, DEV_BLEU_KEY, SWEEP_LENGTHS, WORKERS_ENV,
};
pub use optim::Adam;
pub use run::{
    build_backbone, build_vocab, check_delimiters, dims_for, sampling_seed, train_run, train_run_with_model, training_pairs, EvalSet,
    Experiment, RunResult, RunStatus,
};
pub use spec::{ExperimentSpec, Shots};
