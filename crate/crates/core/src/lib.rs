//! NMS-aware detection loss.
//!
//! Greedy NMS is run with two extra bookkeeping rules: a kept box whose
//! ground truth already has a kept box is a duplicate (pull loss), and a
//! removed box belonging to a different ground truth than its suppressor is
//! a wrongly removed detection (push loss). Both losses come with analytic
//! gradients. Around that core sit a synthetic crowded-scene generator, a
//! toy trainer that optimises boxes directly, miss-rate/FPPI evaluation, a
//! finite-difference oracle, and an experiment runner.
//!
//! Batch work (scenes, gradient suites) is data-parallel through [`par`]
//! when the `parallel` feature is enabled.

pub mod assignment;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod flat;
pub mod geometry;
pub mod gradcheck;
pub mod nms;
pub mod nms_loss;
pub mod par;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{iou, iou_grad, BBox, IoUGrad};
pub use nms::{nms_greedy, NmsInput};
pub use nms_loss::{
    nms_loss_forward_backward, pull_loss, push_loss, Detection, LossConfig, NmsLossResult, PullEvent, PushEvent,
    Reduction,
};
pub use par::Execution;
