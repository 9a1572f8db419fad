use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::suite::TaskSpec;
use super::{wrap_angle, SimConfig, SimError, FEATURE_DIM, MAX_STAGES, NUM_KINDS};
use crate::tokenizer::{ActionVector, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub pos: [f64; 3],
    pub yaw: f64,
    pub attached: bool,
    pub kind: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Region {
    pub fn contains_xy(&self, p: &[f64; 3]) -> bool {
        horizontal_dist(p, &self.center) <= self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_pos: [f64; 3],
    pub gripper_yaw: f64,
    pub gripper_open: f64,
    pub objects: Vec<ObjectState>,
    pub target_regions: Vec<Region>,
    pub step_index: usize,
    /// Index of the active stage; equals the stage count once solved.
    pub stage: usize,
    pub done: bool,
    pub success: bool,
}

impl WorldState {
    pub fn attached(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.attached)
    }
}

/// Featurized state plus the tokenized instruction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub instruction_tokens: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub success: bool,
    pub stage: usize,
    pub truncated: bool,
    /// Task of the episode this step belongs to.
    pub task_id: usize,
    /// Steps taken so far in that episode, including this one.
    pub episode_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_obs: Observation,
    pub sparse_reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One environment instance bound to a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    pub config: SimConfig,
    pub task: Arc<TaskSpec>,
    pub state: WorldState,
}

fn horizontal_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl Env {
    /// Samples the initial state of `task` from `seed`.
    pub fn reset(config: &SimConfig, task: Arc<TaskSpec>, seed: u64) -> (Self, Observation) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(task.task_id as u64);
        let j = config.placement_jitter;
        let objects = task
            .object_kinds
            .iter()
            .zip(&task.object_centers)
            .map(|(&kind, c)| ObjectState {
                pos: [c[0] + rng.gen_range(-j..=j), c[1] + rng.gen_range(-j..=j), 0.0],
                yaw: rng.gen_range(-config.yaw_range..=config.yaw_range),
                attached: false,
                kind,
            })
            .collect();
        let target_regions = task
            .region_centers
            .iter()
            .map(|c| Region { center: *c, radius: config.region_radius })
            .collect();
        let state = WorldState {
            gripper_pos: config.gripper_start,
            gripper_yaw: 0.0,
            gripper_open: 1.0,
            objects,
            target_regions,
            step_index: 0,
            stage: 0,
            done: false,
            success: false,
        };
        let env = Self { config: config.clone(), task, state };
        let obs = env.observe();
        (env, obs)
    }

    pub fn observe(&self) -> Observation {
        observe(&self.state, &self.task)
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepResult, SimError> {
        if self.state.done {
            return Err(SimError::EpisodeDone);
        }
        let cfg = &self.config;
        let a = action.clamped();
        let s = &mut self.state;
        for i in 0..3 {
            s.gripper_pos[i] = (s.gripper_pos[i] + cfg.scale_t * a.0[i]).clamp(-1.0, 1.0);
        }
        // Roll and pitch components are inert.
        s.gripper_yaw = wrap_angle(s.gripper_yaw + cfg.scale_r * a.dyaw());
        if let Some(k) = s.attached() {
            s.objects[k].pos = s.gripper_pos;
            s.objects[k].yaw = s.gripper_yaw;
        }

        if a.grip() >= 0.0 {
            s.gripper_open = 0.0;
            if s.attached().is_none() {
                let g = s.gripper_pos;
                let yaw = s.gripper_yaw;
                let candidate = s
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| dist(&o.pos, &g) < cfg.rho && wrap_angle(o.yaw - yaw).abs() < cfg.yaw_tol)
                    .min_by(|a, b| dist(&a.1.pos, &g).total_cmp(&dist(&b.1.pos, &g)))
                    .map(|(i, _)| i);
                if let Some(k) = candidate {
                    s.objects[k].attached = true;
                    s.objects[k].pos = g;
                    s.objects[k].yaw = yaw;
                }
            }
        } else {
            s.gripper_open = 1.0;
            if let Some(k) = s.attached() {
                let g = s.gripper_pos;
                let placeable = s
                    .target_regions
                    .iter()
                    .any(|r| r.contains_xy(&g) && g[2] - r.center[2] <= cfg.h_place);
                if placeable {
                    let o = &mut s.objects[k];
                    o.attached = false;
                    o.pos = [g[0], g[1], 0.0];
                }
            }
        }

        // Advance through every stage whose object now rests in its region.
        while let Some(&(obj, region)) = self.task.stages.get(s.stage) {
            let o = &s.objects[obj];
            if !o.attached && s.target_regions[region].contains_xy(&o.pos) {
                s.stage += 1;
            } else {
                break;
            }
        }
        s.step_index += 1;
        s.success = s.stage == self.task.stages.len();
        let truncated = !s.success && s.step_index >= cfg.horizon;
        s.done = s.success || truncated;
        let info = StepInfo {
            success: s.success,
            stage: s.stage,
            truncated,
            task_id: self.task.task_id,
            episode_len: s.step_index,
        };
        Ok(StepResult {
            next_obs: self.observe(),
            sparse_reward: if info.success { 1.0 } else { 0.0 },
            done: truncated || info.success,
            info,
        })
    }
}

fn observe(s: &WorldState, task: &TaskSpec) -> Observation {
    use std::f64::consts::PI;
    let g = s.gripper_pos;
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.extend_from_slice(&g);
    f.push(s.gripper_yaw / PI);
    f.push(s.gripper_open);
    for o in &s.objects {
        f.extend((0..3).map(|i| o.pos[i] - g[i]));
        f.push(wrap_angle(o.yaw - s.gripper_yaw) / PI);
        f.push(if o.attached { 1.0 } else { 0.0 });
        f.extend((0..NUM_KINDS).map(|k| if k == o.kind { 1.0 } else { 0.0 }));
    }
    let stage = s.stage.min(task.stages.len() - 1);
    let region = &s.target_regions[task.stages[stage].1];
    f.extend((0..3).map(|i| region.center[i] - g[i]));
    f.extend((0..MAX_STAGES).map(|k| if k == stage { 1.0 } else { 0.0 }));
    debug_assert_eq!(f.len(), FEATURE_DIM);
    Observation { features: f, instruction_tokens: task.instruction_tokens.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{make_suite, SuiteConfig, SuiteId};

    fn env_for(suite: SuiteId, seed: u64) -> Env {
        let s = make_suite(&SuiteConfig::default());
        let task = s.tasks.iter().find(|t| t.suite == suite).unwrap().clone();
        Env::reset(&SimConfig::default(), Arc::new(task), seed).0
    }

    fn act(v: [f64; 7]) -> ActionVector {
        ActionVector(v)
    }

    #[test]
    fn reset_is_deterministic_and_seed_dependent() {
        let s = make_suite(&SuiteConfig::default());
        let task = Arc::new(s.tasks[0].clone());
        let (_, a) = Env::reset(&SimConfig::default(), task.clone(), 5);
        let (_, b) = Env::reset(&SimConfig::default(), task.clone(), 5);
        assert_eq!(a, b);
        let (e1, c) = Env::reset(&SimConfig::default(), task.clone(), 6);
        assert_ne!(a.features, c.features);
        let cfg = SimConfig::default();
        for (o, center) in e1.state.objects.iter().zip(&task.object_centers) {
            assert!((o.pos[0] - center[0]).abs() <= cfg.placement_jitter);
            assert!((o.pos[1] - center[1]).abs() <= cfg.placement_jitter);
        }
        // Stage 0 active at reset.
        let n = a.features.len();
        assert_eq!(&a.features[n - MAX_STAGES..], &[1.0, 0.0]);
    }

    #[test]
    fn features_bounded() {
        let e = env_for(SuiteId::Long, 3);
        let o = e.observe();
        assert_eq!(o.features.len(), FEATURE_DIM);
        assert!(o.features.iter().all(|x| (-2.0..=2.0).contains(x)));
    }

    #[test]
    fn grasp_when_at_object_and_aligned() {
        let mut e = env_for(SuiteId::Spatial, 1);
        let o = e.state.objects[0].clone();
        e.state.gripper_pos = o.pos;
        e.state.gripper_yaw = o.yaw;
        let r = e.step(&act([0., 0., 0., 0., 0., 0., 1.])).unwrap();
        assert!(e.state.objects[0].attached);
        assert_eq!(e.state.gripper_open, 0.0);
        assert!(!r.done);
        // Attached object follows the gripper.
        e.step(&act([1., 0., 0.5, 0., 0., 0.3, 1.])).unwrap();
        assert_eq!(e.state.objects[0].pos, e.state.gripper_pos);
    }

    #[test]
    fn misaligned_yaw_blocks_grasp() {
        let mut e = env_for(SuiteId::Spatial, 1);
        let o = e.state.objects[0].clone();
        e.state.gripper_pos = o.pos;
        e.state.gripper_yaw = wrap_angle(o.yaw + 1.0);
        e.step(&act([0., 0., 0., 0., 0., 0., 1.])).unwrap();
        assert!(e.state.attached().is_none());
    }

    #[test]
    fn clamps_at_workspace_boundary() {
        let mut e = env_for(SuiteId::Goal, 2);
        e.state.gripper_pos = [0.99, -0.98, 0.97];
        e.step(&act([1., -1., 1., 0., 0., 0., -1.])).unwrap();
        assert_eq!(e.state.gripper_pos, [1.0, -1.0, 1.0]);
    }

    #[test]
    fn roll_and_pitch_are_inert() {
        let mut a = env_for(SuiteId::Goal, 2);
        let mut b = a.clone();
        a.step(&act([0.3, 0.1, -0.2, 0.9, -0.7, 0.4, -1.])).unwrap();
        b.step(&act([0.3, 0.1, -0.2, 0.0, 0.0, 0.4, -1.])).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn place_in_region_succeeds_and_step_after_done_fails() {
        let mut e = env_for(SuiteId::Object, 4);
        let (obj, region) = e.task.stages[0];
        let c = e.state.target_regions[region].center;
        e.state.objects[obj].attached = true;
        e.state.gripper_pos = [c[0], c[1], 0.05];
        e.state.objects[obj].pos = e.state.gripper_pos;
        let r = e.step(&act([0., 0., 0., 0., 0., 0., -1.])).unwrap();
        assert!(r.done && r.info.success);
        assert_eq!(r.sparse_reward, 1.0);
        assert!(!e.state.objects[obj].attached);
        assert_eq!(e.step(&ActionVector::ZERO), Err(SimError::EpisodeDone));
    }

    #[test]
    fn opening_outside_regions_keeps_hold() {
        let mut e = env_for(SuiteId::Object, 4);
        e.state.objects[0].attached = true;
        e.state.gripper_pos = [0.0, 0.0, 0.5];
        e.step(&act([0., 0., 0., 0., 0., 0., -1.])).unwrap();
        assert!(e.state.objects[0].attached);
        assert_eq!(e.state.gripper_open, 1.0);
    }

    #[test]
    fn horizon_truncates() {
        let mut e = env_for(SuiteId::Spatial, 9);
        let mut last = None;
        for _ in 0..e.config.horizon {
            last = Some(e.step(&act([0., 0., 0., 0., 0., 0., -1.])).unwrap());
        }
        let r = last.unwrap();
        assert!(r.done && r.info.truncated && !r.info.success);
        assert_eq!(r.sparse_reward, 0.0);
    }
}
