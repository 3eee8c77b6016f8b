use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::geom::{PointCloud, Vec3};
use crate::model::GripperState;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// world frame; steps of a static scene share one cloud
    pub cloud: Arc<PointCloud>,
    pub gripper_open: bool,
    pub ee_translation: Vec3,
    pub ee_euler: Vec3,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeAction {
    pub translation: Vec3,
    pub euler: Vec3,
    pub gripper_open: bool,
    pub collision_allowed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub language: String,
    pub steps: Vec<Step>,
    pub keyframes: Vec<usize>,
    /// one per keyframe
    pub actions: Vec<KeyframeAction>,
}

/// What the policy sees when asked for keyframe `k`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub cloud: Arc<PointCloud>,
    pub gripper: GripperState,
    pub step: usize,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(invalid("episode has no steps"));
        }
        if self.keyframes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("keyframe indices must be strictly increasing"));
        }
        if self.keyframes.last() != Some(&(self.steps.len() - 1)) {
            return Err(invalid("the last step must be a keyframe"));
        }
        if self.actions.len() != self.keyframes.len() {
            return Err(invalid(format!(
                "{} actions for {} keyframes",
                self.actions.len(),
                self.keyframes.len()
            )));
        }
        Ok(())
    }

    /// Observation preceding keyframe `k`: the first step for `k = 0`,
    /// otherwise the previous keyframe.
    pub fn observation(&self, k: usize) -> Observation {
        let step = if k == 0 { 0 } else { self.keyframes[k - 1] };
        let s = &self.steps[step];
        let last = (self.steps.len() - 1).max(1) as f64;
        Observation {
            cloud: s.cloud.clone(),
            gripper: GripperState {
                open: s.gripper_open,
                time_fraction: step as f64 / last,
            },
            step,
        }
    }

    pub fn trajectory(&self) -> Vec<(Vec3, bool)> {
        self.steps.iter().map(|s| (s.ee_translation, s.gripper_open)).collect()
    }
}
