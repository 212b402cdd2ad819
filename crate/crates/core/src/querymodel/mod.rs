//! Dynamic-query decoder: query scheduling, top-k pruning, the decoupled
//! class/box decoder layer, training and checkpoints.

pub mod checkpoint;
pub mod memory;
pub mod model;
pub mod schedule;
pub mod tape;
pub mod train;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint};
pub use memory::{memory_feature_dim, raster_memory, SceneMemory};
pub use model::{
    predictions_from, Decoder, DecoderConfig, ForwardOutput, LayerAttention, LayerOps, LayerOutput, OpCounts,
    ParamGroup,
};
pub use schedule::{fuse_features, select_topk, topk_indices, QuerySchedule, QueryState};
pub use tape::{Matrix, ParamStore};
pub use train::{
    detect, evaluate, ground_truth, gradient_check, layer_matched_ious, scene_pass, train_from, train_toy,
    Decisions, GradCheck, PreparedScene, ScenePass, StepRecord, TrainConfig, TrainOutcome, GRAD_CHECK_TOL,
};
