//! Oracle-scored toy benchmarks and the ablation harness.

mod ablation;
mod metrics;

pub use ablation::{
    ablate_architecture, ablate_representation, ablate_routing, assert_single_variable, config_diff,
    pretrained_base, transplant, AblationBudget, AblationRow, AblationTable, Backbone, LegConfig, Representation,
    TOY_LR_SCALE,
};
pub use metrics::{
    concepts, edit_accuracy, eval_generation, evaluate, gen_accuracy_on, harmonic_mean, harmonic_und,
    pixel_perplexity, soft_score, und_accuracy, EvalConfig, EvalReport, EVAL_STREAM,
};
