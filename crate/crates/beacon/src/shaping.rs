//! Temporal reward shaping within milestone segments.
//!
//! A step `t` in completed segment `k` (one that ends at milestone `t_k`)
//! earns `R_ms * gamma^(t_k - t)`; steps in the trailing incomplete segment
//! earn 0. Credit therefore rises geometrically toward each milestone, and
//! any trajectory that completed at least one milestone carries positive
//! shaped reward even when the terminal reward is 0.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{SegmentView, Trajectory};

/// Shaped per-step rewards for one trajectory, aligned with its steps
/// (index `t-1` holds the reward of 1-based step `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct ShapedTrajectory<F> {
    rewards: Vec<F>,
}

impl<F: Scalar> ShapedTrajectory<F> {
    pub fn rewards(&self) -> &[F] {
        &self.rewards
    }

    /// Reward of 1-based step `t`.
    pub fn reward(&self, t: usize) -> F {
        self.rewards[t - 1]
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total(&self) -> F {
        self.rewards.iter().fold(F::zero(), |acc, &r| acc + r)
    }
}

/// Shape a trajectory's rewards against a segment view.
///
/// `gamma` must lie in [0, 1]. `gamma = 0` degenerates to milestone-only
/// reward (`0^0 = 1`, so the milestone step itself still earns `R_ms`);
/// `gamma = 1` is uniform credit across each completed segment.
pub fn shape<F: Scalar>(
    traj: &Trajectory<F>,
    view: &SegmentView,
    milestone_reward: F,
    gamma: F,
) -> Result<ShapedTrajectory<F>> {
    if view.len() != traj.len() {
        return Err(Error::ShapeMismatch(format!(
            "segment view covers {} steps but trajectory has {}",
            view.len(),
            traj.len()
        )));
    }
    shape_view(view, milestone_reward, gamma)
}

/// Same as [`shape`] but keyed off the view alone; useful when an estimator
/// substitutes a perturbed milestone set for the trajectory's own.
pub fn shape_view<F: Scalar>(
    view: &SegmentView,
    milestone_reward: F,
    gamma: F,
) -> Result<ShapedTrajectory<F>> {
    if milestone_reward <= F::zero() {
        return Err(Error::InvalidParam(format!(
            "milestone reward must be > 0, got {milestone_reward}"
        )));
    }
    if !(gamma >= F::zero() && gamma <= F::one()) {
        return Err(Error::InvalidParam(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let mut rewards = vec![F::zero(); view.len()];
    for k in 1..=view.num_milestones() {
        let t_k = *view.segment_steps(k).end();
        for t in view.segment_steps(k) {
            // powi(0) == 1 even for gamma == 0.
            rewards[t - 1] = milestone_reward * gamma.powi((t_k - t) as i32);
        }
    }
    Ok(ShapedTrajectory { rewards })
}

/// Sum of shaped rewards over segment `k` (1-based), in step order.
pub fn segment_return<F: Scalar>(shaped: &ShapedTrajectory<F>, view: &SegmentView, k: usize) -> F {
    view.segment_steps(k)
        .fold(F::zero(), |acc, t| acc + shaped.reward(t))
}
