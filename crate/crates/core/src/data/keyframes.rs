use crate::geom::Vec3;

/// End-effector speed below which a step counts as stationary, m/step.
pub const STILL_SPEED: f64 = 1e-3;

/// Keyframes of a trajectory of `(end-effector position, gripper open)`.
///
/// Step `i` is a keyframe when the gripper state changes at `i`, when `i`
/// ends a run of at least two stationary steps, or when it is the last step.
pub fn extract_keyframes(traj: &[(Vec3, bool)]) -> Vec<usize> {
    let n = traj.len();
    if n == 0 {
        return Vec::new();
    }
    let still: Vec<bool> = (0..n)
        .map(|i| i > 0 && traj[i].0.distance(traj[i - 1].0) < STILL_SPEED)
        .collect();
    let mut keys = Vec::new();
    let mut run = 0;
    for i in 0..n {
        run = if still[i] { run + 1 } else { 0 };
        let gripper_change = i > 0 && traj[i].1 != traj[i - 1].1;
        let run_end = run >= 2 && (i + 1 == n || !still[i + 1]);
        if gripper_change || run_end || i + 1 == n {
            keys.push(i);
        }
    }
    keys
}
