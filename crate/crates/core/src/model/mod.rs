//! Dual-expert transformer: routing, parameters, forward pass and loss.

mod checkpoint;
mod decode;
mod forward;
mod params;
mod sequence;

pub use checkpoint::{write_atomic, Checkpoint, TensorArchive, TensorData, TensorEntry, VERSION as CHECKPOINT_VERSION};
pub use decode::IncrementalDecoder;
pub use forward::{
    assert_frozen, build_forward, build_loss, collect_gradients, compute_loss, encode_und_image, forward,
    register_params, sequence_nll, ForwardVars, FrozenReport, HeadLogits, PositionLogits,
};
pub use params::{
    param_infos, param_shapes, Architecture, BlockWeights, ExpertWeights, Group, ModelConfig, MoTParams, MoTWeights, ParamInfo,
};
pub use sequence::{
    classify_id, head_for_target, route_tokens, Expert, MultimodalSequence, RoutingPolicy, SequenceBuilder, Token,
    TokenClass,
};

#[cfg(test)]
mod tests;
