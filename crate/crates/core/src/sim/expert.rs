use super::suite::TaskSpec;
use super::world::WorldState;
use super::{wrap_angle, SimConfig};
use crate::tokenizer::ActionVector;

/// Carry height above the region center while transporting.
const CARRY_HEIGHT: f64 = 0.05;

/// Scripted proportional controller: reach the active stage's object, align
/// yaw, close, carry to the stage's region and open.
pub fn expert_action(state: &WorldState, task: &TaskSpec, cfg: &SimConfig) -> ActionVector {
    let stage = state.stage.min(task.stages.len() - 1);
    let (obj, region) = task.stages[stage];
    let g = state.gripper_pos;
    let toward = |target: [f64; 3]| -> [f64; 3] {
        [0, 1, 2].map(|i| ((target[i] - g[i]) / cfg.scale_t).clamp(-1.0, 1.0))
    };
    let mut a = [0.0; 7];
    match state.attached() {
        Some(k) if k == obj => {
            let c = state.target_regions[region].center;
            let target = [c[0], c[1], c[2] + CARRY_HEIGHT];
            let dxy = ((c[0] - g[0]).powi(2) + (c[1] - g[1]).powi(2)).sqrt();
            let radius = state.target_regions[region].radius;
            if dxy <= radius * 0.5 && g[2] - c[2] <= cfg.h_place * 0.5 {
                a[6] = -1.0;
            } else {
                a[..3].copy_from_slice(&toward(target));
                a[6] = 1.0;
            }
        }
        Some(_) => {
            // Holding the wrong object: drop it in the nearest region.
            let c = state
                .target_regions
                .iter()
                .min_by(|a, b| {
                    let da = (a.center[0] - g[0]).hypot(a.center[1] - g[1]);
                    let db = (b.center[0] - g[0]).hypot(b.center[1] - g[1]);
                    da.total_cmp(&db)
                })
                .expect("scene has regions")
                .center;
            let dxy = (c[0] - g[0]).hypot(c[1] - g[1]);
            if dxy <= cfg.region_radius * 0.5 && g[2] - c[2] <= cfg.h_place * 0.5 {
                a[6] = -1.0;
            } else {
                a[..3].copy_from_slice(&toward([c[0], c[1], c[2] + CARRY_HEIGHT]));
                a[6] = 1.0;
            }
        }
        None => {
            let o = &state.objects[obj];
            let yaw_err = wrap_angle(o.yaw - state.gripper_yaw);
            a[5] = (yaw_err / cfg.scale_r).clamp(-1.0, 1.0);
            let d = ((o.pos[0] - g[0]).powi(2) + (o.pos[1] - g[1]).powi(2) + (o.pos[2] - g[2]).powi(2)).sqrt();
            if d < cfg.rho * 0.5 && yaw_err.abs() < cfg.yaw_tol * 0.5 {
                a[6] = 1.0;
            } else {
                a[..3].copy_from_slice(&toward(o.pos));
                a[6] = -1.0;
            }
        }
    }
    ActionVector(a)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sim::{make_suite, Env, SuiteConfig};

    #[test]
    fn moves_toward_object_on_the_right() {
        let s = make_suite(&SuiteConfig::default());
        let (mut env, _) = Env::reset(&SimConfig::default(), Arc::new(s.tasks[0].clone()), 0);
        let (obj, _) = env.task.stages[0];
        let p = env.state.objects[obj].pos;
        env.state.gripper_pos = [p[0] - 0.6, p[1], p[2]];
        let a = expert_action(&env.state, &env.task, &env.config);
        assert!(a.dx() > 0.0 && a.dx().abs() >= a.dy().abs() && a.dx().abs() >= a.dz().abs());
        assert!(a.grip() < 0.0);
    }

    #[test]
    fn opens_over_region_when_attached() {
        let s = make_suite(&SuiteConfig::default());
        let (mut env, _) = Env::reset(&SimConfig::default(), Arc::new(s.tasks[3].clone()), 0);
        let (obj, region) = env.task.stages[0];
        let c = env.state.target_regions[region].center;
        env.state.gripper_pos = [c[0] + 0.01, c[1], c[2] + 0.05];
        env.state.objects[obj].attached = true;
        env.state.objects[obj].pos = env.state.gripper_pos;
        let a = expert_action(&env.state, &env.task, &env.config);
        assert!(a.grip() < 0.0);
    }

    #[test]
    fn expert_solves_every_task_quickly() {
        let s = make_suite(&SuiteConfig::default());
        let cfg = SimConfig::default();
        for t in &s.tasks {
            let (mut env, _) = Env::reset(&cfg, Arc::new(t.clone()), 17);
            let mut steps = 0;
            loop {
                let r = env.step(&expert_action(&env.state, &env.task, &cfg)).unwrap();
                steps += 1;
                if r.done {
                    assert!(r.info.success, "task {} `{}` failed", t.task_id, t.instruction);
                    break;
                }
            }
            assert!(steps <= cfg.horizon);
        }
    }
}
