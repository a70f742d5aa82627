//! Credit-assignment diagnostics computed post hoc over immutable batches.
//!
//! CAR: fraction of shared state-action pairs that receive both positive and
//! negative combined advantages across trajectories.
//! EGR: `sum |g+ - g-| / sum (g+ + g-)` over shared pairs — the gradient
//! mass that survives cancellation (1 = fully consistent).
//! ZAR: fraction of near-zero advantages, per step and per trajectory.
//! CCR: mean |advantage| at milestone steps over mean |advantage| elsewhere.
//!
//! Every function has a `*_pooled` form that takes `(trajectory, combined
//! advantages)` pairs, so the harness can treat an iteration's groups as one
//! batch; the plain forms operate on a single group.

use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::types::{AdvantageTensor, GroupBatch, Trajectory};

/// Threshold below which an advantage counts as zero. The formulas treat
/// exactly-zero advantages as neither positive nor negative.
pub const TAU_ZERO: f64 = 1e-6;

/// Pair a group with its advantage tensor, step-aligned.
pub fn batch_items<'a, F: Scalar>(
    batch: &'a GroupBatch<F>,
    adv: &'a AdvantageTensor<F>,
) -> impl Iterator<Item = (&'a Trajectory<F>, &'a [F])> + 'a {
    debug_assert_eq!(batch.group_size(), adv.num_trajectories());
    batch
        .trajectories()
        .iter()
        .zip(adv.combined().iter().map(|v| v.as_slice()))
}

/// Combined advantages observed per state-action pair, tagged with the
/// trajectory ordinal that produced each occurrence. `S_shared` is the set
/// of pairs seen in at least two distinct trajectories.
#[derive(Debug, Clone)]
pub struct SharedPairTable<F> {
    pairs: BTreeMap<(usize, usize), Vec<(usize, F)>>,
}

impl<F: Scalar> SharedPairTable<F> {
    pub fn build<'a>(items: impl IntoIterator<Item = (&'a Trajectory<F>, &'a [F])>) -> Self {
        let mut pairs: BTreeMap<(usize, usize), Vec<(usize, F)>> = BTreeMap::new();
        for (ordinal, (traj, advs)) in items.into_iter().enumerate() {
            debug_assert_eq!(traj.len(), advs.len());
            for (step, &a) in traj.steps().iter().zip(advs) {
                pairs
                    .entry((step.state_id, step.action_id))
                    .or_default()
                    .push((ordinal, a));
            }
        }
        Self { pairs }
    }

    /// Pairs appearing in at least two distinct trajectories.
    pub fn shared(&self) -> impl Iterator<Item = (&(usize, usize), &Vec<(usize, F)>)> {
        self.pairs.iter().filter(|(_, occ)| {
            let first = occ[0].0;
            occ.iter().any(|&(o, _)| o != first)
        })
    }

    pub fn num_shared(&self) -> usize {
        self.shared().count()
    }
}

/// Contradictory Action Ratio over pooled items. A pair counts toward `A+`
/// (`A-`) in a trajectory when its mean advantage there exceeds `tau_zero`
/// (falls below `-tau_zero`). No shared pairs means no contradiction: 0.
pub fn car_pooled<'a, F: Scalar>(
    items: impl IntoIterator<Item = (&'a Trajectory<F>, &'a [F])>,
    tau_zero: f64,
) -> f64 {
    let table = SharedPairTable::build(items);
    let mut shared = 0usize;
    let mut contradictory = 0usize;
    for (_, occurrences) in table.shared() {
        shared += 1;
        let mut per_traj: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &(ordinal, a) in occurrences {
            let e = per_traj.entry(ordinal).or_insert((0.0, 0));
            e.0 += a.to_f64_lossy();
            e.1 += 1;
        }
        let mut pos = 0usize;
        let mut neg = 0usize;
        for (sum, count) in per_traj.values() {
            let mean = sum / *count as f64;
            if mean > tau_zero {
                pos += 1;
            } else if mean < -tau_zero {
                neg += 1;
            }
        }
        if pos > 0 && neg > 0 {
            contradictory += 1;
        }
    }
    if shared == 0 {
        0.0
    } else {
        contradictory as f64 / shared as f64
    }
}

pub fn car<F: Scalar>(batch: &GroupBatch<F>, adv: &AdvantageTensor<F>, tau_zero: f64) -> f64 {
    car_pooled(batch_items(batch, adv), tau_zero)
}

/// Effective Gradient Ratio over pooled items. With no advantage mass on
/// shared pairs there is nothing to cancel: 1 by convention.
pub fn egr_pooled<'a, F: Scalar>(
    items: impl IntoIterator<Item = (&'a Trajectory<F>, &'a [F])>,
    tau_zero: f64,
) -> f64 {
    let table = SharedPairTable::build(items);
    let mut surviving = 0.0f64;
    let mut total = 0.0f64;
    for (_, occurrences) in table.shared() {
        let mut g_pos = 0.0f64;
        let mut g_neg = 0.0f64;
        for &(_, a) in occurrences {
            let a = a.to_f64_lossy();
            if a > tau_zero {
                g_pos += a;
            } else if a < -tau_zero {
                g_neg += -a;
            }
        }
        surviving += (g_pos - g_neg).abs();
        total += g_pos + g_neg;
    }
    if total == 0.0 {
        1.0
    } else {
        surviving / total
    }
}

pub fn egr<F: Scalar>(batch: &GroupBatch<F>, adv: &AdvantageTensor<F>, tau_zero: f64) -> f64 {
    egr_pooled(batch_items(batch, adv), tau_zero)
}

/// Zero-Advantage Ratio, per step and per trajectory (a trajectory is
/// zero-advantage when all its steps are).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZarReport {
    pub step: f64,
    pub trajectory: f64,
}

pub fn zar_pooled<'a, F: Scalar>(
    rows: impl IntoIterator<Item = &'a [F]>,
    tau_zero: f64,
) -> ZarReport {
    let mut steps = 0usize;
    let mut zero_steps = 0usize;
    let mut trajs = 0usize;
    let mut zero_trajs = 0usize;
    for row in rows {
        trajs += 1;
        let mut all_zero = true;
        for &a in row {
            steps += 1;
            if a.to_f64_lossy().abs() < tau_zero {
                zero_steps += 1;
            } else {
                all_zero = false;
            }
        }
        zero_trajs += all_zero as usize;
    }
    ZarReport {
        step: if steps == 0 {
            0.0
        } else {
            zero_steps as f64 / steps as f64
        },
        trajectory: if trajs == 0 {
            0.0
        } else {
            zero_trajs as f64 / trajs as f64
        },
    }
}

pub fn zar<F: Scalar>(adv: &AdvantageTensor<F>, tau_zero: f64) -> ZarReport {
    zar_pooled(adv.combined().iter().map(|v| v.as_slice()), tau_zero)
}

/// Credit Concentration Ratio: mean |advantage| over milestone steps divided
/// by mean |advantage| over all other steps. `None` when either step class is
/// empty or the denominator is zero — undefined, distinct from 0.
pub fn ccr_pooled<'a, F: Scalar>(
    items: impl IntoIterator<Item = (&'a Trajectory<F>, &'a [F])>,
) -> Option<f64> {
    let mut ms_sum = 0.0f64;
    let mut ms_count = 0usize;
    let mut other_sum = 0.0f64;
    let mut other_count = 0usize;
    for (traj, advs) in items {
        let mut is_milestone = vec![false; traj.len()];
        for &t in traj.milestone_times() {
            is_milestone[t - 1] = true;
        }
        for (i, &a) in advs.iter().enumerate() {
            let mag = a.to_f64_lossy().abs();
            if is_milestone[i] {
                ms_sum += mag;
                ms_count += 1;
            } else {
                other_sum += mag;
                other_count += 1;
            }
        }
    }
    if ms_count == 0 || other_count == 0 {
        return None;
    }
    let denom = other_sum / other_count as f64;
    if denom == 0.0 {
        return None;
    }
    Some((ms_sum / ms_count as f64) / denom)
}

pub fn ccr<F: Scalar>(batch: &GroupBatch<F>, adv: &AdvantageTensor<F>) -> Option<f64> {
    ccr_pooled(batch_items(batch, adv))
}

/// Outcome taxonomy of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleCategory {
    FullSuccess,
    PartialSuccess,
    CompleteFailure,
}

pub fn categorize_one<F: Scalar>(traj: &Trajectory<F>) -> SampleCategory {
    if traj.terminal_reward() == F::one() {
        SampleCategory::FullSuccess
    } else if traj.num_milestones() >= 1 {
        SampleCategory::PartialSuccess
    } else {
        SampleCategory::CompleteFailure
    }
}

/// Per-category counts plus the fraction of trajectories whose combined
/// advantage is not all-zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryReport {
    pub full_success: usize,
    pub partial_success: usize,
    pub complete_failure: usize,
    pub effective_utilization: f64,
}

pub fn categorize_pooled<'a, F: Scalar>(
    items: impl IntoIterator<Item = (&'a Trajectory<F>, &'a [F])>,
    tau_zero: f64,
) -> CategoryReport {
    let mut report = CategoryReport {
        full_success: 0,
        partial_success: 0,
        complete_failure: 0,
        effective_utilization: 0.0,
    };
    let mut total = 0usize;
    let mut useful = 0usize;
    for (traj, advs) in items {
        total += 1;
        match categorize_one(traj) {
            SampleCategory::FullSuccess => report.full_success += 1,
            SampleCategory::PartialSuccess => report.partial_success += 1,
            SampleCategory::CompleteFailure => report.complete_failure += 1,
        }
        if advs.iter().any(|&a| a.to_f64_lossy().abs() >= tau_zero) {
            useful += 1;
        }
    }
    if total > 0 {
        report.effective_utilization = useful as f64 / total as f64;
    }
    report
}

pub fn categorize<F: Scalar>(
    batch: &GroupBatch<F>,
    adv: &AdvantageTensor<F>,
    tau_zero: f64,
) -> CategoryReport {
    categorize_pooled(batch_items(batch, adv), tau_zero)
}

// --- metrics rows ------------------------------------------------------------

/// Fixed CSV header of the per-iteration metrics stream.
pub const METRICS_HEADER: &str = "iteration,algo,seed,success_rate,zar_step,zar_traj,car,egr,ccr,n_full,n_partial,n_fail,effective_utilization,entropy,objective,clip_fraction,grad_norm";

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub algo: String,
    pub seed: u64,
    pub success_rate: f64,
    pub zar_step: f64,
    pub zar_traj: f64,
    pub car: f64,
    pub egr: f64,
    /// `None` renders as NaN: undefined, distinct from 0.
    pub ccr: Option<f64>,
    pub n_full: usize,
    pub n_partial: usize,
    pub n_fail: usize,
    pub effective_utilization: f64,
    pub entropy: f64,
    pub objective: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.algo,
            self.seed,
            self.success_rate,
            self.zar_step,
            self.zar_traj,
            self.car,
            self.egr,
            self.ccr.unwrap_or(f64::NAN),
            self.n_full,
            self.n_partial,
            self.n_fail,
            self.effective_utilization,
            self.entropy,
            self.objective,
            self.clip_fraction,
            self.grad_norm,
        )
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::advantage::{estimate, EstimatorKind};
    use crate::rng::{Role, StreamRng};
    use crate::types::{BeaconConfig, StepRecord};

    /// Trajectory visiting the given (state, action) pairs.
    fn traj(pairs: &[(usize, usize)], milestones: &[usize], reward: f64) -> Trajectory<f64> {
        let steps = pairs
            .iter()
            .map(|&(s, a)| StepRecord {
                state_id: s,
                action_id: a,
                behavior_log_prob: -0.5,
                env_reward: 0.0,
            })
            .collect();
        Trajectory::new(steps, reward, milestones.to_vec(), 0).unwrap()
    }

    #[test]
    fn car_flags_contradictory_shared_pair() {
        let t1 = traj(&[(0, 0)], &[], 1.0);
        let t2 = traj(&[(0, 0)], &[], 0.0);
        let items = [(&t1, &[1.0][..]), (&t2, &[-1.0][..])];
        assert_eq!(car_pooled(items, TAU_ZERO), 1.0);
    }

    #[test]
    fn car_zero_for_consistent_or_zero_advantages() {
        let t1 = traj(&[(0, 0), (1, 1)], &[], 1.0);
        let t2 = traj(&[(0, 0)], &[], 1.0);
        // Same sign on the shared pair.
        let items = [(&t1, &[0.5, 0.7][..]), (&t2, &[0.3][..])];
        assert_eq!(car_pooled(items, TAU_ZERO), 0.0);
        // All zero (the GRPO identical-outcome regime).
        let items = [(&t1, &[0.0, 0.0][..]), (&t2, &[0.0][..])];
        assert_eq!(car_pooled(items, TAU_ZERO), 0.0);
        // Unshared pairs only.
        let t3 = traj(&[(5, 0)], &[], 0.0);
        let items = [(&t1, &[1.0, -1.0][..]), (&t3, &[-1.0][..])];
        assert_eq!(car_pooled(items, TAU_ZERO), 0.0);
    }

    #[test]
    fn car_counts_trajectory_level_signs() {
        // Three trajectories share (0,0); signs (+, +, -) -> contradictory.
        let ts: Vec<Trajectory<f64>> = (0..3).map(|_| traj(&[(0, 0)], &[], 0.0)).collect();
        let advs = [[2.0], [0.5], [-1.0]];
        let items = ts.iter().zip(advs.iter().map(|a| &a[..]));
        assert_eq!(car_pooled(items, TAU_ZERO), 1.0);
    }

    #[test]
    fn egr_formula_cases() {
        let t1 = traj(&[(0, 0)], &[], 1.0);
        let t2 = traj(&[(0, 0)], &[], 0.0);
        // (+2, -1): |2-1|/(2+1) = 1/3.
        let items = [(&t1, &[2.0][..]), (&t2, &[-1.0][..])];
        assert_relative_eq!(egr_pooled(items, TAU_ZERO), 1.0 / 3.0, max_relative = 1e-12);
        // Same sign everywhere: 1.
        let items = [(&t1, &[2.0][..]), (&t2, &[1.0][..])];
        assert_eq!(egr_pooled(items, TAU_ZERO), 1.0);
        // Perfect cancellation: 0.
        let items = [(&t1, &[1.0][..]), (&t2, &[-1.0][..])];
        assert_eq!(egr_pooled(items, TAU_ZERO), 0.0);
        // No shared mass: 1 by convention.
        let t3 = traj(&[(9, 1)], &[], 0.0);
        let items = [(&t1, &[1.0][..]), (&t3, &[1.0][..])];
        assert_eq!(egr_pooled(items, TAU_ZERO), 1.0);
    }

    #[test]
    fn zar_counts_steps_and_trajectories() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0]];
        let report = zar_pooled(rows.iter().map(|r| r.as_slice()), TAU_ZERO);
        assert_relative_eq!(report.step, 4.0 / 5.0);
        assert_relative_eq!(report.trajectory, 2.0 / 3.0);
    }

    #[test]
    fn zar_is_one_for_identical_outcomes_under_grpo() {
        let t1 = traj(&[(0, 0), (1, 0)], &[], 1.0);
        let t2 = traj(&[(0, 1), (1, 1)], &[], 1.0);
        let batch = GroupBatch::new(vec![t1, t2]).unwrap();
        let cfg = BeaconConfig::<f64>::default();
        let mut rng = StreamRng::stream(0, Role::Estimator, &[0]);
        let adv = estimate(&batch, EstimatorKind::Grpo, &cfg, &mut rng).unwrap();
        let report = zar(&adv, TAU_ZERO);
        assert_eq!(report.step, 1.0);
        assert_eq!(report.trajectory, 1.0);
    }

    #[test]
    fn zar_trajectory_zero_when_every_member_has_a_milestone() {
        // All fail but each completes a milestone of a different length, so
        // shaped per-step returns differ from the shared baseline.
        let t1 = traj(&[(0, 0), (1, 0)], &[2], 0.0);
        let t2 = traj(&[(0, 1), (1, 1), (2, 0)], &[3], 0.0);
        let batch = GroupBatch::new(vec![t1, t2]).unwrap();
        let cfg = BeaconConfig::<f64>::default();
        let mut rng = StreamRng::stream(0, Role::Estimator, &[0]);
        let adv = estimate(&batch, EstimatorKind::Beacon, &cfg, &mut rng).unwrap();
        let report = zar(&adv, TAU_ZERO);
        assert_eq!(report.trajectory, 0.0);
    }

    #[test]
    fn ccr_is_one_for_uniform_magnitudes() {
        // GRPO-style constant |advantage| within a trajectory.
        let t = traj(&[(0, 0), (1, 0), (2, 0)], &[2], 0.0);
        let advs = [-0.7, -0.7, -0.7];
        assert_relative_eq!(
            ccr_pooled([(&t, &advs[..])]).unwrap(),
            1.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn ccr_undefined_cases() {
        // No milestone steps.
        let t = traj(&[(0, 0)], &[], 0.0);
        assert_eq!(ccr_pooled([(&t, &[1.0][..])]), None);
        // No non-milestone steps.
        let t = traj(&[(0, 0)], &[1], 0.0);
        assert_eq!(ccr_pooled([(&t, &[1.0][..])]), None);
        // Zero denominator.
        let t = traj(&[(0, 0), (1, 0)], &[1], 0.0);
        assert_eq!(ccr_pooled([(&t, &[1.0, 0.0][..])]), None);
    }

    #[test]
    fn ccr_concentration_above_one() {
        let t = traj(&[(0, 0), (1, 0)], &[2], 0.0);
        let advs = [0.5, 2.0]; // milestone step carries 4x the credit
        assert_relative_eq!(ccr_pooled([(&t, &advs[..])]).unwrap(), 4.0);
    }

    #[test]
    fn categorization_follows_taxonomy() {
        assert_eq!(
            categorize_one(&traj(&[(0, 0)], &[1], 1.0)),
            SampleCategory::FullSuccess
        );
        assert_eq!(
            categorize_one(&traj(&[(0, 0), (1, 0)], &[1, 2], 0.0)),
            SampleCategory::PartialSuccess
        );
        assert_eq!(
            categorize_one(&traj(&[(0, 0)], &[], 0.0)),
            SampleCategory::CompleteFailure
        );
    }

    #[test]
    fn effective_utilization_contrasts_grpo_and_beacon_on_all_fail_batches() {
        let t1 = traj(&[(0, 0), (1, 0)], &[2], 0.0);
        let t2 = traj(&[(0, 1), (1, 1), (2, 1)], &[3], 0.0);
        let batch = GroupBatch::new(vec![t1, t2]).unwrap();
        let cfg = BeaconConfig::<f64>::default();
        let mut rng = StreamRng::stream(0, Role::Estimator, &[0]);

        let grpo = estimate(&batch, EstimatorKind::Grpo, &cfg, &mut rng).unwrap();
        let report = categorize(&batch, &grpo, TAU_ZERO);
        assert_eq!(report.effective_utilization, 0.0);
        assert_eq!(report.partial_success, 2);

        let beacon = estimate(&batch, EstimatorKind::Beacon, &cfg, &mut rng).unwrap();
        let report = categorize(&batch, &beacon, TAU_ZERO);
        assert!(report.effective_utilization > 0.0);
    }

    #[test]
    fn metrics_row_matches_header_arity() {
        let row = MetricsRow {
            iteration: 1,
            algo: "beacon".into(),
            seed: 0,
            success_rate: 0.5,
            zar_step: 0.25,
            zar_traj: 0.1,
            car: 0.0,
            egr: 1.0,
            ccr: None,
            n_full: 4,
            n_partial: 3,
            n_fail: 1,
            effective_utilization: 0.875,
            entropy: 1.32,
            objective: 0.01,
            clip_fraction: 0.0,
            grad_norm: 0.2,
        };
        let line = row.to_csv_line();
        assert_eq!(line.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(line.contains("NaN"));
    }
}
