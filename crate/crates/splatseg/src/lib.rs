//! Desk-scale toolkit for lifting 2D instance masks into 2D-Gaussian-splat scenes.
//!
//! The pipeline, end to end: [`scene::generate_scene`] builds a labeled synthetic
//! scene; [`render`] rasterizes it with analytic appearance gradients;
//! [`trace`] reverse-rasterizes splat mass into per-view patch distributions;
//! [`instance`] decomposes masks into patches, injects controlled mask
//! inconsistencies, and repairs them by similarity voting ([`merge`]);
//! [`refine`] scores attribution ambiguity and runs split/prune density control;
//! [`lift`] trains per-Gaussian contrastive features and segments or extracts
//! objects from feature queries or iterative self-prompting; [`metrics`] and
//! [`pipeline`] provide evaluation and the staged CLI orchestration.
//!
//! Run an example with `cargo run --release --example <name>`; see `examples/`
//! for one runnable entry point per capability. The `splatseg` binary exposes
//! the same stages as subcommands.

pub mod formats;
pub mod instance;
pub mod lift;
pub mod math;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod scene;
pub mod trace;
