//! Deterministic planar pick-and-place simulator, task suites, the scripted
//! expert and the vectorized wrapper.

mod expert;
mod suite;
mod vec_env;
mod world;

pub use expert::expert_action;
pub use suite::{make_suite, Suite, SuiteConfig, SuiteId, TaskSpec, COLORS};
pub use vec_env::{EnvSlot, EnvSlotState, TaskSampler, UniformSampler, VecEnv};
pub use world::{Env, ObjectState, Observation, Region, StepInfo, StepResult, WorldState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Objects present in every scene.
pub const NUM_OBJECTS: usize = 3;
/// Target regions present in every scene.
pub const NUM_REGIONS: usize = 2;
/// Distinct object kinds (colors).
pub const NUM_KINDS: usize = 6;
/// Longest stage chain of any task.
pub const MAX_STAGES: usize = 2;
/// Per-object features: relative position, yaw error, attached flag, kind one-hot.
const OBJECT_FEATURES: usize = 3 + 1 + 1 + NUM_KINDS;
/// Length of the observation feature vector.
pub const FEATURE_DIM: usize = 5 + NUM_OBJECTS * OBJECT_FEATURES + 3 + MAX_STAGES;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("batch length mismatch: expected {expected}, got {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("invalid task: {0}")]
    InvalidTask(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: usize,
    /// Translation per unit action per step.
    pub scale_t: f64,
    /// Yaw change (radians) per unit action per step.
    pub scale_r: f64,
    /// Grasp radius.
    pub rho: f64,
    pub yaw_tol: f64,
    pub region_radius: f64,
    /// Maximum gripper height above a region at which a release places the object.
    pub h_place: f64,
    /// Uniform jitter half-width applied to object placements at reset.
    pub placement_jitter: f64,
    /// Objects spawn with yaw in `[-yaw_range, yaw_range]`.
    pub yaw_range: f64,
    pub gripper_start: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 60,
            scale_t: 0.08,
            scale_r: 0.3,
            rho: 0.08,
            yaw_tol: 0.4,
            region_radius: 0.12,
            h_place: 0.15,
            placement_jitter: 0.08,
            yaw_range: 0.8,
            gripper_start: [0.0, 0.0, 0.3],
        }
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut x = (a + PI).rem_euclid(TAU) - PI;
    if x < -PI {
        x += TAU;
    }
    x
}
