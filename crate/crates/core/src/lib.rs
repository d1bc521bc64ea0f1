//! Planar manipulation-tracking workbench.
//!
//! A deterministic 2-D contact simulator with a floating-base two-finger
//! hand, a tracking MDP with residual position targets, a PPO+imitation
//! learner, demonstration mining through homotopy optimization, a conditional
//! denoising generator for homotopy paths, a three-stage training flywheel,
//! and the evaluation kit that scores all of it.

pub mod env;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod io;
pub mod learner;
pub mod miner;
pub mod nn;
pub mod par;
pub mod retarget;
pub mod sim;
pub mod synth;
pub mod types;
pub mod util;

pub use error::{Error, Result};
pub use types::{
    Demonstration, FullState, HandDof, ObjectGeometry, ObjectPose, TaskEmbedding, TrackingTask,
};
