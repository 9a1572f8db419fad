use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SimConfig, MAX_STAGES, NUM_KINDS, NUM_OBJECTS, NUM_REGIONS};
use crate::rng::{stream, Purpose};
use crate::tokenizer::{TokenSequence, Vocabulary, INSTRUCTION_LEN};

pub const COLORS: [&str; NUM_KINDS] = ["red", "green", "blue", "yellow", "purple", "orange"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteId {
    Spatial,
    Object,
    Goal,
    Long,
}

impl SuiteId {
    pub const ALL: [SuiteId; 4] = [SuiteId::Spatial, SuiteId::Object, SuiteId::Goal, SuiteId::Long];

    pub fn name(self) -> &'static str {
        match self {
            SuiteId::Spatial => "spatial",
            SuiteId::Object => "object",
            SuiteId::Goal => "goal",
            SuiteId::Long => "long",
        }
    }
}

impl fmt::Display for SuiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SuiteId::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub suite: SuiteId,
    /// Global index within the generated suite set.
    pub task_id: usize,
    pub instruction: String,
    /// `(object index, region index)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub object_kinds: Vec<usize>,
    /// Nominal object placements (x, y); reset adds jitter.
    pub object_centers: Vec<[f64; 2]>,
    pub region_centers: Vec<[f64; 3]>,
    pub instruction_tokens: TokenSequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub master_seed: u64,
    /// Tasks per suite, in `spatial, object, goal, long` order.
    pub tasks_per_suite: [usize; 4],
    /// Restrict generation to these suites (all when empty).
    #[serde(default)]
    pub only: Vec<SuiteId>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { master_seed: 0, tasks_per_suite: [10; 4], only: Vec::new() }
    }
}

/// Generated tasks with their shared vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub tasks: Vec<TaskSpec>,
    pub vocab: Vocabulary,
}

impl Suite {
    pub fn task_ids(&self, suite: SuiteId) -> Vec<usize> {
        self.tasks.iter().filter(|t| t.suite == suite).map(|t| t.task_id).collect()
    }

    /// Keeps only the tasks of `suite`, renumbering task ids from zero.
    pub fn restricted(&self, suites: &[SuiteId]) -> Suite {
        let tasks = self
            .tasks
            .iter()
            .filter(|t| suites.contains(&t.suite))
            .enumerate()
            .map(|(i, t)| TaskSpec { task_id: i, ..t.clone() })
            .collect();
        Suite { tasks, vocab: self.vocab.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }
}

fn region_word(c: &[f64; 3]) -> &'static str {
    if c[0].abs() >= c[1].abs() {
        if c[0] < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if c[1] < 0.0 {
        "front"
    } else {
        "back"
    }
}

fn zone_word(c: &[f64; 2]) -> &'static str {
    if c[0].abs() >= c[1].abs() {
        if c[0] < 0.0 {
            "west"
        } else {
            "east"
        }
    } else if c[1] < 0.0 {
        "south"
    } else {
        "north"
    }
}

/// Candidate region anchors on a ring around the workspace center.
fn sample_regions(rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let base: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..NUM_REGIONS)
        .map(|i| {
            let a = base + std::f64::consts::PI * i as f64 + rng.gen_range(-0.4..0.4);
            let r = rng.gen_range(0.5..0.65);
            [r * a.cos(), r * a.sin(), 0.0]
        })
        .collect()
}

/// Object placements at least `sep` apart and clear of every region.
fn sample_objects(rng: &mut ChaCha8Rng, regions: &[[f64; 3]], cfg: &SimConfig) -> Vec<[f64; 2]> {
    let clear = cfg.region_radius + cfg.placement_jitter * 1.5 + 0.1;
    let sep = 0.2 + 2.0 * cfg.placement_jitter;
    loop {
        let mut out: Vec<[f64; 2]> = Vec::with_capacity(NUM_OBJECTS);
        for _ in 0..200 {
            let p = [rng.gen_range(-0.55..0.55), rng.gen_range(-0.55..0.55)];
            let ok_regions = regions.iter().all(|r| ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt() > clear);
            let ok_objects = out.iter().all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > sep);
            if ok_regions && ok_objects {
                out.push(p);
                if out.len() == NUM_OBJECTS {
                    return out;
                }
            }
        }
    }
}

struct Draft {
    instruction: String,
    stages: Vec<(usize, usize)>,
    object_kinds: Vec<usize>,
    object_centers: Vec<[f64; 2]>,
    region_centers: Vec<[f64; 3]>,
}

fn draft_task(suite: SuiteId, rng: &mut ChaCha8Rng, fixed: &(Vec<[f64; 2]>, Vec<[f64; 3]>), cfg: &SimConfig) -> Draft {
    let default_kinds: Vec<usize> = (0..NUM_OBJECTS).collect();
    match suite {
        SuiteId::Spatial => {
            // Same objects and regions; placements vary per task.
            let regions = fixed.1.clone();
            let objects = sample_objects(rng, &regions, cfg);
            let obj = rng.gen_range(0..NUM_OBJECTS);
            let region = rng.gen_range(0..NUM_REGIONS);
            Draft {
                instruction: format!(
                    "pick {} {} place {}",
                    COLORS[obj],
                    zone_word(&objects[obj]),
                    region_word(&regions[region])
                ),
                stages: vec![(obj, region)],
                object_kinds: default_kinds,
                object_centers: objects,
                region_centers: regions,
            }
        }
        SuiteId::Object => {
            // Fixed layout; the set of object kinds varies.
            let mut kinds: Vec<usize> = (0..NUM_KINDS).collect();
            kinds.shuffle(rng);
            let mut kinds = kinds[..NUM_OBJECTS].to_vec();
            kinds.sort_unstable();
            let obj = rng.gen_range(0..NUM_OBJECTS);
            let region = rng.gen_range(0..NUM_REGIONS);
            Draft {
                instruction: format!("pick {} place {}", COLORS[kinds[obj]], region_word(&fixed.1[region])),
                stages: vec![(obj, region)],
                object_kinds: kinds,
                object_centers: fixed.0.clone(),
                region_centers: fixed.1.clone(),
            }
        }
        SuiteId::Goal => {
            // Fixed objects; target regions vary.
            let regions = loop {
                let r = sample_regions(rng);
                let clear = cfg.region_radius + cfg.placement_jitter * 1.5 + 0.1;
                if fixed.0.iter().all(|p| {
                    r.iter().all(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() > clear)
                }) {
                    break r;
                }
            };
            let obj = rng.gen_range(0..NUM_OBJECTS);
            let region = rng.gen_range(0..NUM_REGIONS);
            Draft {
                instruction: format!("put {} in {}", COLORS[obj], region_word(&regions[region])),
                stages: vec![(obj, region)],
                object_kinds: default_kinds,
                object_centers: fixed.0.clone(),
                region_centers: regions,
            }
        }
        SuiteId::Long => {
            let regions = sample_regions(rng);
            let objects = sample_objects(rng, &regions, cfg);
            let mut order: Vec<usize> = (0..NUM_OBJECTS).collect();
            order.shuffle(rng);
            let (a, b) = (order[0], order[1]);
            let (ra, rb) = (rng.gen_range(0..NUM_REGIONS), rng.gen_range(0..NUM_REGIONS));
            Draft {
                instruction: format!(
                    "pick {} place {} then pick {} place {}",
                    COLORS[a],
                    region_word(&regions[ra]),
                    COLORS[b],
                    region_word(&regions[rb])
                ),
                stages: vec![(a, ra), (b, rb)],
                object_kinds: default_kinds,
                object_centers: objects,
                region_centers: regions,
            }
        }
    }
}

/// Generates the task suites. Instructions are unique across all suites and
/// the result depends only on the config.
pub fn make_suite(config: &SuiteConfig) -> Suite {
    let sim = SimConfig::default();
    let mut drafts: Vec<(SuiteId, Draft)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (si, suite) in SuiteId::ALL.into_iter().enumerate() {
        if !config.only.is_empty() && !config.only.contains(&suite) {
            continue;
        }
        let mut rng = stream(config.master_seed, Purpose::Suite, si as u64);
        let regions = sample_regions(&mut rng);
        let objects = sample_objects(&mut rng, &regions, &sim);
        let fixed = (objects, regions);
        let mut made = 0;
        let mut attempts = 0;
        while made < config.tasks_per_suite[si] {
            attempts += 1;
            assert!(attempts < 100_000, "cannot generate {} unique {suite} tasks", config.tasks_per_suite[si]);
            let d = draft_task(suite, &mut rng, &fixed, &sim);
            debug_assert!(d.stages.len() <= MAX_STAGES);
            if seen.insert(d.instruction.clone()) {
                drafts.push((suite, d));
                made += 1;
            }
        }
    }
    let vocab = Vocabulary::from_instructions(drafts.iter().map(|(_, d)| d.instruction.as_str()));
    let tasks = drafts
        .into_iter()
        .enumerate()
        .map(|(task_id, (suite, d))| TaskSpec {
            instruction_tokens: vocab
                .tokenize_instruction(&d.instruction, INSTRUCTION_LEN)
                .expect("vocabulary built from these instructions"),
            suite,
            task_id,
            instruction: d.instruction,
            stages: d.stages,
            object_kinds: d.object_kinds,
            object_centers: d.object_centers,
            region_centers: d.region_centers,
        })
        .collect();
    Suite { tasks, vocab }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_has_forty_unique_tasks() {
        let s = make_suite(&SuiteConfig::default());
        assert_eq!(s.tasks.len(), 40);
        let unique: BTreeSet<_> = s.tasks.iter().map(|t| t.instruction.as_str()).collect();
        assert_eq!(unique.len(), 40);
        for suite in SuiteId::ALL {
            assert_eq!(s.task_ids(suite).len(), 10);
        }
        for t in &s.tasks {
            let want = if t.suite == SuiteId::Long { 2 } else { 1 };
            assert_eq!(t.stages.len(), want, "{}", t.instruction);
            assert!(t.instruction.split_whitespace().count() <= INSTRUCTION_LEN);
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let c = SuiteConfig { master_seed: 11, ..Default::default() };
        assert_eq!(make_suite(&c), make_suite(&c));
        let other = make_suite(&SuiteConfig { master_seed: 12, ..Default::default() });
        assert_ne!(make_suite(&c).tasks[0].object_centers, other.tasks[0].object_centers);
    }

    #[test]
    fn restricted_renumbers() {
        let s = make_suite(&SuiteConfig::default()).restricted(&[SuiteId::Goal]);
        assert_eq!(s.tasks.len(), 10);
        assert!(s.tasks.iter().enumerate().all(|(i, t)| t.task_id == i && t.suite == SuiteId::Goal));
    }

    #[test]
    fn json_export_round_trips() {
        let s = make_suite(&SuiteConfig::default());
        let back: Suite = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
