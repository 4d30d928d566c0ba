//! Synthetic shapes world: renderer, oracle, captions, tasks and mixed streams.

pub mod caption;
mod mix;
mod tasks;
mod world;

pub use mix::{mix_stream, sample_seed, MixSpec, MixStream, StreamItem};
pub use tasks::{
    gen_sample, read_snapshot, regenerate, scored_len, write_snapshot, Sample, SnapshotRecord, TaskKind, World,
    WorldConfig, FIT_BACKGROUNDS,
};
pub use world::{attribute_oracle, render, render_blank, AttributeField, Attributes, Color, Position, Shape};
#[cfg(test)]
pub(crate) use tasks::tests::world as tasks_fixture;
