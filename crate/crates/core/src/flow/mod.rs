//! Rectified-flow machinery: the conditional velocity network, flow-sample
//! construction, CFM training, Euler inference and pose recovery.

pub mod infer;
pub mod model;
pub mod sample;
pub mod train;

pub use infer::{draw_noise, euler_integrate, infer, inference_sample, recover_poses, Prediction};
pub use model::{flow_init, positional_encode, time_embedding, ModelConfig};
pub use sample::{interpolate_noise, make_flow_sample, sample_timestep, FlowSample};
pub use train::{
    build_tokens, cfm_loss, forward_velocity, gather_features, sample_loss_grads, train,
    TrainConfig,
};
