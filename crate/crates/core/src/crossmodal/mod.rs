//! Joint sketch/raster embedding space for sketch-based image retrieval.
//!
//! Vector sketches go through the frozen sketch encoder `E`, rasters through
//! a frozen convolutional encoder `P`; small dense heads map both into one
//! unit-normalized space trained with a triplet loss.

mod heads;
mod joint;
mod raster_encoder;
mod triplet;

pub use heads::{Branch, HeadsCache, HeadsConfig, JointHeads, JOINT_DIM};
pub use joint::{
    evaluate_joint, params_digest, sbir_query, train_joint, JointConfig, JointData, JointMetrics,
    JointModel, JointOutcome, JointStepReport, CLASS_REG_WEIGHT, JOINT_MAGIC,
};
pub use raster_encoder::{raster_input, RasterEncoder, RasterTrainConfig, RASTER_LINE_WIDTH, RASTER_SIDE};
pub use triplet::{sample_triplets, triplet_batch, triplet_loss, Phase, TripletBatch, TripletGrads};
