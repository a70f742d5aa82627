//! Dual-scale advantage estimation.
//!
//! Trajectory level: group-normalized terminal reward, `(R - mu)/(sigma + eps)`
//! with population sigma over the group.
//! Segment level: for milestone `k`, only trajectories that reached it form
//! the comparison group `G_k = {i : K_i >= k}`; each of their segment-`k`
//! steps is scored against the group's mean per-step segment return
//! `b_k = mean_j R_k^(j) / |Seg_k^(j)|`. Steps of the trailing incomplete
//! segment carry zero segment advantage.
//! The combined signal is `A_traj + lambda * A_seg`, kept layer-separable in
//! [`AdvantageTensor`] for diagnostics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::shaping::{shape_view, ShapedTrajectory};
use crate::types::{AdvantageTensor, BeaconConfig, GroupBatch, SegmentView};

/// Pipeline stages emitted by [`estimate_observed`], in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Partition,
    Shape,
    TrajAdvantage,
    SegAdvantage,
    Combine,
}

/// Comparison group for milestone `k`: the trajectories that reached it and
/// their shared per-step baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonGroup<F> {
    pub k: usize,
    pub members: Vec<usize>,
    pub baseline: F,
}

/// Group-relative normalization of a score vector: `(x - mu)/(sigma + eps)`
/// with population sigma. All-equal scores normalize to exactly zero.
pub fn normalized_scores<F: Scalar>(scores: &[F], eps: F) -> Vec<F> {
    let n = F::cast_usize(scores.len());
    let mean = scores.iter().fold(F::zero(), |acc, &r| acc + r) / n;
    let var = scores
        .iter()
        .fold(F::zero(), |acc, &r| acc + (r - mean) * (r - mean))
        / n;
    let denom = var.sqrt() + eps;
    scores.iter().map(|&r| (r - mean) / denom).collect()
}

/// Trajectory-level advantage of each group member.
pub fn traj_advantage<F: Scalar>(batch: &GroupBatch<F>, eps: F) -> Result<Vec<F>> {
    if eps <= F::zero() {
        return Err(Error::InvalidParam("epsilon_norm must be > 0".into()));
    }
    let rewards: Vec<F> = batch
        .trajectories()
        .iter()
        .map(|t| t.terminal_reward())
        .collect();
    Ok(normalized_scores(&rewards, eps))
}

/// Comparison groups `G_k` and baselines `b_k` for `k = 1..=max_i K_i`,
/// derived from the segment views and shaped rewards (which may reflect a
/// perturbed milestone set rather than the trajectories' own).
pub fn comparison_groups<F: Scalar>(
    views: &[SegmentView],
    shaped: &[ShapedTrajectory<F>],
) -> Vec<ComparisonGroup<F>> {
    let max_k = views.iter().map(|v| v.num_milestones()).max().unwrap_or(0);
    let mut groups = Vec::with_capacity(max_k);
    for k in 1..=max_k {
        let members: Vec<usize> = (0..views.len())
            .filter(|&i| views[i].num_milestones() >= k)
            .collect();
        debug_assert!(!members.is_empty());
        // Left-to-right reduction keeps results bit-stable under any
        // parallel caller.
        let mut sum = F::zero();
        for &i in &members {
            let seg_len = views[i].segment_len(k);
            debug_assert!(seg_len > 0, "completed segment contains its milestone");
            let ret = views[i]
                .segment_steps(k)
                .fold(F::zero(), |acc, t| acc + shaped[i].reward(t));
            sum = sum + ret / F::cast_usize(seg_len);
        }
        let baseline = sum / F::cast_usize(members.len());
        groups.push(ComparisonGroup {
            k,
            members,
            baseline,
        });
    }
    groups
}

/// Segment-level advantage per step. Entries default to zero: trailing
/// incomplete segments and trajectories outside a milestone's comparison
/// group contribute nothing.
pub fn seg_advantage<F: Scalar>(
    batch: &GroupBatch<F>,
    shaped: &[ShapedTrajectory<F>],
    views: &[SegmentView],
) -> Result<Vec<Vec<F>>> {
    let g = batch.group_size();
    if shaped.len() != g || views.len() != g {
        return Err(Error::ShapeMismatch(format!(
            "group has {g} trajectories but got {} shaped / {} views",
            shaped.len(),
            views.len()
        )));
    }
    for (i, traj) in batch.trajectories().iter().enumerate() {
        if shaped[i].len() != traj.len() || views[i].len() != traj.len() {
            return Err(Error::ShapeMismatch(format!(
                "trajectory {i} has {} steps but shaped/view cover {}/{}",
                traj.len(),
                shaped[i].len(),
                views[i].len()
            )));
        }
    }

    let mut adv: Vec<Vec<F>> = batch
        .trajectories()
        .iter()
        .map(|t| vec![F::zero(); t.len()])
        .collect();
    for group in comparison_groups(views, shaped) {
        for &i in &group.members {
            for t in views[i].segment_steps(group.k) {
                adv[i][t - 1] = shaped[i].reward(t) - group.baseline;
            }
        }
    }
    Ok(adv)
}

/// Combine the two scales into a per-step advantage tensor, keeping all
/// layers separable.
pub fn combine<F: Scalar>(
    traj_adv: Vec<F>,
    seg_adv: Vec<Vec<F>>,
    shaped_rewards: Vec<Vec<F>>,
    lambda_weight: F,
) -> Result<AdvantageTensor<F>> {
    if traj_adv.len() != seg_adv.len() || traj_adv.len() != shaped_rewards.len() {
        return Err(Error::ShapeMismatch(format!(
            "layers disagree on trajectory count: {} traj, {} seg, {} shaped",
            traj_adv.len(),
            seg_adv.len(),
            shaped_rewards.len()
        )));
    }
    let combined = traj_adv
        .iter()
        .zip(&seg_adv)
        .map(|(&a, seg)| seg.iter().map(|&s| a + lambda_weight * s).collect())
        .collect();
    Ok(AdvantageTensor {
        traj_adv,
        seg_adv,
        combined,
        shaped_rewards,
        lambda_weight,
    })
}

/// Which advantage estimator to run. `BeaconNoSeg` is definitionally GRPO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorKind {
    Beacon,
    Grpo,
    BeaconNoTraj,
    BeaconNoSeg,
    RandomPartition,
    MilestoneDropout(f64),
}

/// Positions drawn per trajectory by the random-partition ablation
/// (fewer when the trajectory is shorter).
pub const RANDOM_PARTITION_POSITIONS: usize = 5;

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        if let EstimatorKind::MilestoneDropout(p) = *self {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!(
                    "dropout probability must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }

    /// Whether this estimator computes the segment-level layer.
    fn uses_segments(&self) -> bool {
        !matches!(self, EstimatorKind::Grpo | EstimatorKind::BeaconNoSeg)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Beacon => write!(f, "beacon"),
            EstimatorKind::Grpo => write!(f, "grpo"),
            EstimatorKind::BeaconNoTraj => write!(f, "no_traj"),
            EstimatorKind::BeaconNoSeg => write!(f, "no_seg"),
            EstimatorKind::RandomPartition => write!(f, "random_partition"),
            EstimatorKind::MilestoneDropout(p) => write!(f, "dropout={p}"),
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "beacon" => EstimatorKind::Beacon,
            "grpo" => EstimatorKind::Grpo,
            "no_traj" => EstimatorKind::BeaconNoTraj,
            "no_seg" => EstimatorKind::BeaconNoSeg,
            "random_partition" => EstimatorKind::RandomPartition,
            other => {
                if let Some(p) = other.strip_prefix("dropout=") {
                    let p: f64 = p.parse().map_err(|_| {
                        Error::InvalidParam(format!("bad dropout probability in '{other}'"))
                    })?;
                    EstimatorKind::MilestoneDropout(p)
                } else {
                    return Err(Error::InvalidParam(format!(
                        "unknown estimator '{other}' (expected beacon|grpo|no_traj|no_seg|random_partition|dropout=<p>)"
                    )));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Run the configured estimator over one group.
///
/// Milestone perturbations (random partitioning, dropout) draw from `rng`
/// per trajectory, in group order, so results are reproducible and
/// independent of parallelism outside the group.
pub fn estimate<F: Scalar>(
    batch: &GroupBatch<F>,
    kind: EstimatorKind,
    cfg: &BeaconConfig<F>,
    rng: &mut StreamRng,
) -> Result<AdvantageTensor<F>> {
    estimate_observed(batch, kind, cfg, rng, &mut |_| {})
}

/// [`estimate`] with a phase observer, used by the instrumented trainer to
/// assert pipeline order.
pub fn estimate_observed<F: Scalar>(
    batch: &GroupBatch<F>,
    kind: EstimatorKind,
    cfg: &BeaconConfig<F>,
    rng: &mut StreamRng,
    observe: &mut dyn FnMut(Phase),
) -> Result<AdvantageTensor<F>> {
    kind.validate()?;
    cfg.validate()?;

    let milestone_sets: Vec<Vec<usize>> = batch
        .trajectories()
        .iter()
        .map(|traj| match kind {
            EstimatorKind::RandomPartition => {
                rng.sample_distinct_sorted(traj.len(), RANDOM_PARTITION_POSITIONS)
            }
            EstimatorKind::MilestoneDropout(p) => traj
                .milestone_times()
                .iter()
                .copied()
                .filter(|_| !rng.bernoulli(p))
                .collect(),
            _ => traj.milestone_times().to_vec(),
        })
        .collect();

    observe(Phase::Partition);
    let views: Vec<SegmentView> = batch
        .trajectories()
        .iter()
        .zip(&milestone_sets)
        .map(|(traj, ms)| SegmentView::new(traj.len(), ms))
        .collect();

    observe(Phase::Shape);
    let shaped: Vec<ShapedTrajectory<F>> = if kind.uses_segments() {
        views
            .iter()
            .map(|v| shape_view(v, cfg.milestone_reward, cfg.gamma))
            .collect::<Result<_>>()?
    } else {
        batch
            .trajectories()
            .iter()
            .map(|t| {
                shape_view(
                    &SegmentView::new(t.len(), &[]),
                    cfg.milestone_reward,
                    cfg.gamma,
                )
            })
            .collect::<Result<_>>()?
    };

    observe(Phase::TrajAdvantage);
    let traj = if matches!(kind, EstimatorKind::BeaconNoTraj) {
        vec![F::zero(); batch.group_size()]
    } else {
        traj_advantage(batch, cfg.epsilon_norm)?
    };

    observe(Phase::SegAdvantage);
    let seg = if kind.uses_segments() {
        seg_advantage(batch, &shaped, &views)?
    } else {
        batch
            .trajectories()
            .iter()
            .map(|t| vec![F::zero(); t.len()])
            .collect()
    };

    observe(Phase::Combine);
    let shaped_rewards = shaped.into_iter().map(|s| s.rewards().to_vec()).collect();
    combine(traj, seg, shaped_rewards, cfg.lambda_weight)
}
