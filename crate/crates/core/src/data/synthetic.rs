//! Tabletop scenes of colored point-cluster blocks with scripted reach and
//! pick demonstrations.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::{Episode, KeyframeAction, Step};
use super::keyframes::extract_keyframes;
use crate::error::{bad_config, Error, Result};
use crate::geom::{Mat3, PointCloud, Vec3, WorkspaceBox};
use crate::seed;

pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.85, 0.1, 0.85]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("orange", [1.0, 0.55, 0.05]),
    ("white", [1.0, 1.0, 1.0]),
];
pub const TABLE_COLOR: [f64; 3] = [0.45, 0.35, 0.25];
/// Height of the reach pose above the block center.
pub const HOVER: f64 = 0.05;
const PLACEMENT_TRIES: usize = 100;
const MOVE_STEPS: usize = 8;
const DESCEND_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reach,
    Pick,
}

impl Task {
    pub fn verb(self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::Pick => "pick",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    pub n_distractors: usize,
    /// palette names blocks may take
    pub colors: Vec<String>,
    /// table points per square meter
    pub table_density: f64,
    pub block_points: usize,
    pub block_size: f64,
    pub table_height: f64,
    /// half-width of the square region block centers are drawn from
    pub placement_half: f64,
    pub bounds: WorkspaceBox,
    /// pick only: append a lift back to the hover pose after the grasp
    pub lift: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task: Task::Reach,
            n_distractors: 2,
            colors: PALETTE.iter().map(|(n, _)| n.to_string()).collect(),
            table_density: 4000.0,
            block_points: 300,
            block_size: 0.06,
            table_height: -0.2,
            placement_half: 0.3,
            bounds: WorkspaceBox::default(),
            lift: false,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        for c in &self.colors {
            if color_rgb(c).is_none() {
                return Err(bad_config(format!("unknown block color {c}")));
            }
        }
        if self.n_distractors + 1 > self.colors.len() {
            return Err(bad_config(format!(
                "{} blocks need distinct colors but only {} are allowed",
                self.n_distractors + 1,
                self.colors.len()
            )));
        }
        if !(self.block_size > 0.0) || !(self.table_density >= 0.0) || self.block_points == 0 {
            return Err(bad_config("block size, point count and table density must be positive"));
        }
        let (lo, hi) = (self.bounds.min, self.bounds.max);
        let top = self.table_height + self.block_size + HOVER;
        if self.table_height < lo.z || top > hi.z {
            return Err(bad_config("table and hover poses must lie inside the workspace"));
        }
        let reach = self.placement_half + self.block_size;
        if reach > (hi.x - lo.x) / 2.0 || reach > (hi.y - lo.y) / 2.0 {
            return Err(bad_config("placement region exceeds the workspace"));
        }
        Ok(())
    }
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub color: String,
    pub center: Vec3,
    pub yaw_deg: f64,
    /// range of this block's points in the scene cloud
    pub points: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub blocks: Vec<Block>,
}

impl Scene {
    pub fn target(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn block_centroid(&self, i: usize) -> Vec3 {
        let r = self.blocks[i].points.clone();
        let n = r.len() as f64;
        self.cloud.positions[r].iter().fold(Vec3::ZERO, |a, &p| a + p) / n
    }
}

/// Table plane plus `1 + n_distractors` blocks; block 0 is the target.
pub fn gen_scene(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let center = spec.bounds.center();
    let mut centers: Vec<Vec3> = Vec::new();
    let min_gap = spec.block_size * std::f64::consts::SQRT_2 + 0.02;
    let z = spec.table_height + 0.5 * spec.block_size;
    for _ in 0..=spec.n_distractors {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let c = Vec3::new(
                center.x + rng.random_range(-spec.placement_half..=spec.placement_half),
                center.y + rng.random_range(-spec.placement_half..=spec.placement_half),
                z,
            );
            if centers.iter().all(|o| o.distance(c) >= min_gap) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Unplaceable(format!(
                "could not place {} blocks after {PLACEMENT_TRIES} tries",
                spec.n_distractors + 1
            )));
        }
    }

    let mut names: Vec<&String> = spec.colors.iter().collect();
    for i in 0..centers.len() {
        let j = rng.random_range(i..names.len());
        names.swap(i, j);
    }

    let (lo, hi) = (spec.bounds.min, spec.bounds.max);
    let n_table = (spec.table_density * (hi.x - lo.x) * (hi.y - lo.y)).round() as usize;
    let mut positions = Vec::with_capacity(n_table + centers.len() * spec.block_points);
    let mut colors = Vec::with_capacity(positions.capacity());
    for _ in 0..n_table {
        positions.push(Vec3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            spec.table_height,
        ));
        colors.push(TABLE_COLOR);
    }

    let mut blocks = Vec::with_capacity(centers.len());
    for (c, name) in centers.iter().zip(names) {
        let yaw = rng.random_range(0.0..90.0);
        let rot = Mat3::rot_z(yaw);
        let rgb = color_rgb(name).unwrap();
        let start = positions.len();
        let h = 0.5 * spec.block_size;
        for _ in 0..spec.block_points {
            // top face or one of the four sides, all of equal area
            let face = rng.random_range(0..5);
            let (a, b) = (rng.random_range(-h..=h), rng.random_range(-h..=h));
            let local = match face {
                0 => Vec3::new(a, b, h),
                1 => Vec3::new(h, a, b),
                2 => Vec3::new(-h, a, b),
                3 => Vec3::new(a, h, b),
                _ => Vec3::new(a, -h, b),
            };
            positions.push(*c + rot.mul_vec(local));
            colors.push(rgb);
        }
        blocks.push(Block {
            color: name.clone(),
            center: *c,
            yaw_deg: yaw,
            points: start..positions.len(),
        });
    }
    Ok(Scene {
        cloud: PointCloud::new(positions, colors)?,
        blocks,
    })
}

fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    a + (b - a) * t
}

/// Scripted demonstration: move to the hover pose and pause; for pick,
/// descend and close; optionally lift back up.
fn demonstrate(task: Task, lift: bool, home: Vec3, hover: Vec3, grasp: Vec3) -> Vec<(Vec3, bool)> {
    let mut traj = vec![(home, true)];
    for i in 1..=MOVE_STEPS {
        traj.push((lerp(home, hover, i as f64 / MOVE_STEPS as f64), true));
    }
    let pause = if task == Task::Reach { 2 } else { 3 };
    traj.extend(std::iter::repeat((hover, true)).take(pause));
    if task == Task::Pick {
        for i in 1..=DESCEND_STEPS {
            traj.push((lerp(hover, grasp, i as f64 / DESCEND_STEPS as f64), true));
        }
        traj.push((grasp, false));
        if lift {
            for i in 1..=DESCEND_STEPS {
                traj.push((lerp(grasp, hover, i as f64 / DESCEND_STEPS as f64), false));
            }
        }
    }
    traj
}

/// Hand-labeled keyframes of `demonstrate`.
pub fn scripted_keyframes(task: Task, lift: bool) -> Vec<usize> {
    let pause_end = MOVE_STEPS + if task == Task::Reach { 2 } else { 3 };
    match (task, lift) {
        (Task::Reach, _) => vec![pause_end],
        (Task::Pick, false) => vec![pause_end, pause_end + DESCEND_STEPS + 1],
        (Task::Pick, true) => vec![
            pause_end,
            pause_end + DESCEND_STEPS + 1,
            pause_end + 2 * DESCEND_STEPS + 1,
        ],
    }
}

pub fn gen_episode(spec: &SyntheticTaskSpec, index: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[index as u64]));
    let scene = gen_scene(spec, &mut rng)?;
    let target = scene.target();
    let centroid = scene.block_centroid(0);
    let hover = centroid + Vec3::new(0.0, 0.0, HOVER);
    let euler = Vec3::new(0.0, 0.0, target.yaw_deg);
    let home = Vec3::new(
        spec.bounds.center().x,
        spec.bounds.center().y,
        spec.bounds.max.z - 0.1 * (spec.bounds.max.z - spec.bounds.min.z),
    );
    let traj = demonstrate(spec.task, spec.lift, home, hover, centroid);
    let keyframes = extract_keyframes(&traj);
    let cloud = Arc::new(scene.cloud.clone());
    let steps = traj
        .iter()
        .enumerate()
        .map(|(i, &(p, open))| Step {
            cloud: cloud.clone(),
            gripper_open: open,
            ee_translation: p,
            ee_euler: euler,
            index: i,
        })
        .collect();
    let actions = keyframes
        .iter()
        .map(|&k| KeyframeAction {
            translation: traj[k].0,
            euler,
            gripper_open: traj[k].1,
            collision_allowed: false,
        })
        .collect();
    let ep = Episode {
        language: format!("{} the {} block", spec.task.verb(), target.color),
        steps,
        keyframes,
        actions,
    };
    ep.validate()?;
    Ok(ep)
}

/// `n` episodes; episode `i` depends only on `(spec, i)`.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Episode>> {
    spec.validate()?;
    (0..n).map(|i| gen_episode(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::crop_to_workspace;

    #[test]
    fn reach_has_one_keyframe_and_pick_two() {
        let reach = gen_synthetic(&SyntheticTaskSpec::default(), 3).unwrap();
        assert!(reach.iter().all(|e| e.actions.len() == 1));
        let pick = gen_synthetic(
            &SyntheticTaskSpec {
                task: Task::Pick,
                ..SyntheticTaskSpec::default()
            },
            3,
        )
        .unwrap();
        for e in &pick {
            assert_eq!(e.actions.len(), 2);
            assert!(e.actions[0].gripper_open && !e.actions[1].gripper_open);
            let d = e.actions[0].translation - e.actions[1].translation;
            assert!((d - Vec3::new(0.0, 0.0, HOVER)).norm() < 1e-12);
        }
    }

    #[test]
    fn keyframes_match_script() {
        for (task, lift) in [(Task::Reach, false), (Task::Pick, false), (Task::Pick, true)] {
            let spec = SyntheticTaskSpec {
                task,
                lift,
                ..SyntheticTaskSpec::default()
            };
            let e = gen_episode(&spec, 0).unwrap();
            assert_eq!(e.keyframes, scripted_keyframes(task, lift), "{task:?} {lift}");
        }
    }

    #[test]
    fn reach_target_is_centroid_plus_hover() {
        let spec = SyntheticTaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[4]));
        let scene = gen_scene(&spec, &mut rng).unwrap();
        let e = gen_episode(&spec, 4).unwrap();
        let r = scene.target().points.clone();
        let mut sum = Vec3::ZERO;
        for p in &scene.cloud.positions[r.clone()] {
            sum = sum + *p;
        }
        let expect = sum * (1.0 / r.len() as f64) + Vec3::new(0.0, 0.0, 0.05);
        assert!((e.actions[0].translation - expect).norm() < 1e-9);
        assert_eq!(e.language, format!("reach the {} block", scene.target().color));
    }

    #[test]
    fn deterministic_and_inside_workspace() {
        let spec = SyntheticTaskSpec {
            seed: 11,
            n_distractors: 4,
            ..SyntheticTaskSpec::default()
        };
        let a = gen_synthetic(&spec, 4).unwrap();
        assert_eq!(a, gen_synthetic(&spec, 4).unwrap());
        for e in &a {
            let c = &e.steps[0].cloud;
            assert_eq!(&crop_to_workspace(c, &spec.bounds), c.as_ref());
        }
    }

    #[test]
    fn target_color_is_unique() {
        let spec = SyntheticTaskSpec {
            n_distractors: 7,
            ..SyntheticTaskSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = gen_scene(&spec, &mut rng).unwrap();
        let t = &s.target().color;
        assert_eq!(s.blocks.iter().filter(|b| &b.color == t).count(), 1);
    }

    #[test]
    fn crowded_scene_is_unplaceable() {
        let spec = SyntheticTaskSpec {
            n_distractors: 7,
            block_size: 0.2,
            placement_half: 0.05,
            ..SyntheticTaskSpec::default()
        };
        assert!(matches!(gen_synthetic(&spec, 1), Err(Error::Unplaceable(_))));
    }

    #[test]
    fn too_many_distractors_for_palette() {
        let spec = SyntheticTaskSpec {
            n_distractors: 3,
            colors: vec!["red".into(), "blue".into()],
            ..SyntheticTaskSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
