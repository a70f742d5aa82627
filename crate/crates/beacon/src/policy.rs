//! Tabular softmax policy, rollout sampling, the clipped surrogate
//! objective, and its exact gradient.
//!
//! The objective is `J = (1/N) sum_i sum_t min(rho_t * A_it,
//! clip(rho_t, 1-eps, 1+eps) * A_it)` with `rho_t = pi(a|s) / pi_old(a|s)`,
//! averaged per trajectory and summed per step. Steps where the min selects
//! the clipped constant branch contribute zero gradient.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{ChainCraftEnv, ChainCraftSpec};
use crate::error::{Error, Result};
use crate::rng::{Role, StreamRng};
use crate::scalar::Scalar;
use crate::types::{AdvantageTensor, GroupBatch, StepRecord, Trajectory};

/// Policy table: `pi(a|s) = softmax(theta[s, .])[a]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy<F> {
    theta: Vec<F>,
    num_states: usize,
    num_actions: usize,
}

impl<F: Scalar> SoftmaxPolicy<F> {
    /// Uniform policy (all-zero logits).
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        assert!(num_states >= 1 && num_actions >= 1);
        Self {
            theta: vec![F::zero(); num_states * num_actions],
            num_states,
            num_actions,
        }
    }

    pub fn from_theta(theta: Vec<F>, num_states: usize, num_actions: usize) -> Result<Self> {
        if theta.len() != num_states * num_actions {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, expected {num_states}x{num_actions}",
                theta.len()
            )));
        }
        Ok(Self {
            theta,
            num_states,
            num_actions,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn theta(&self) -> &[F] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [F] {
        &mut self.theta
    }

    fn row(&self, state: usize) -> &[F] {
        let start = state * self.num_actions;
        &self.theta[start..start + self.num_actions]
    }

    /// Action probabilities of a state, computed with max-subtraction.
    pub fn probs(&self, state: usize) -> Vec<F> {
        let row = self.row(state);
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut out: Vec<F> = row.iter().map(|&t| (t - m).exp()).collect();
        let z = out.iter().fold(F::zero(), |a, &b| a + b);
        for p in &mut out {
            *p = *p / z;
        }
        out
    }

    /// log pi(a|s) via logsumexp.
    pub fn log_prob(&self, state: usize, action: usize) -> F {
        let row = self.row(state);
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let z = row.iter().fold(F::zero(), |a, &b| a + (b - m).exp());
        // Clamp to zero: pi <= 1, but ln can land one ulp on the wrong side.
        (row[action] - m - z.ln()).min(F::zero())
    }

    pub fn sample_action(&self, state: usize, rng: &mut StreamRng) -> (usize, F) {
        let probs = self.probs(state);
        let u = F::cast(rng.next_f64());
        let mut acc = F::zero();
        let mut chosen = self.num_actions - 1;
        for (a, &p) in probs.iter().enumerate() {
            acc = acc + p;
            if u < acc {
                chosen = a;
                break;
            }
        }
        (chosen, self.log_prob(state, chosen))
    }

    /// Deterministic argmax action (lowest index wins ties).
    pub fn greedy_action(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for a in 1..self.num_actions {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn entropy(&self, state: usize) -> F {
        self.probs(state).iter().fold(F::zero(), |acc, &p| {
            if p > F::zero() {
                acc - p * p.ln()
            } else {
                acc
            }
        })
    }
}

/// Objective value and optimization diagnostics for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport<F> {
    pub objective_value: F,
    pub grad_norm: F,
    /// Share of steps where the ratio was clipped.
    pub clip_fraction: F,
    /// Mean policy entropy over the distinct states visited in the batch.
    pub entropy: F,
}

pub(crate) struct PoolEvaluation<F> {
    pub objective: F,
    /// dJ/dtheta, row-major like the policy table.
    pub grad: Vec<F>,
    pub clip_fraction: F,
}

/// Evaluate objective, gradient, and clip share over pooled trajectories.
/// Accumulation is a fixed left-to-right reduction in input order.
pub(crate) fn evaluate_pool<'a, F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    items: impl IntoIterator<Item = (&'a Trajectory<F>, &'a [F])>,
    clip_eps: F,
) -> Result<PoolEvaluation<F>> {
    if clip_eps <= F::zero() {
        return Err(Error::InvalidParam("clip_epsilon must be > 0".into()));
    }
    let lo = F::one() - clip_eps;
    let hi = F::one() + clip_eps;

    let mut objective = F::zero();
    let mut grad = vec![F::zero(); policy.theta.len()];
    let mut n_traj = 0usize;
    let mut n_steps = 0usize;
    let mut n_clipped = 0usize;

    for (traj, advantages) in items {
        if advantages.len() != traj.len() {
            return Err(Error::ShapeMismatch(format!(
                "trajectory has {} steps but {} advantages",
                traj.len(),
                advantages.len()
            )));
        }
        n_traj += 1;
        for (step, &adv) in traj.steps().iter().zip(advantages) {
            n_steps += 1;
            if step.state_id >= policy.num_states || step.action_id >= policy.num_actions {
                return Err(Error::ShapeMismatch(format!(
                    "step ({}, {}) outside policy table {}x{}",
                    step.state_id, step.action_id, policy.num_states, policy.num_actions
                )));
            }
            let logp_new = policy.log_prob(step.state_id, step.action_id);
            let ratio = (logp_new - step.behavior_log_prob).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite(format!(
                    "importance ratio at state {} action {}",
                    step.state_id, step.action_id
                )));
            }
            let clipped_ratio = ratio.min(hi).max(lo);
            objective = objective + (ratio * adv).min(clipped_ratio * adv);

            let clip_active = (adv > F::zero() && ratio > hi) || (adv < F::zero() && ratio < lo);
            if clip_active {
                n_clipped += 1;
            } else if adv != F::zero() {
                // d(rho*A)/dtheta[s,.] = A * rho * (e_a - pi(.|s))
                let w = adv * ratio;
                let probs = policy.probs(step.state_id);
                let base = step.state_id * policy.num_actions;
                for (a, &p) in probs.iter().enumerate() {
                    grad[base + a] = grad[base + a] - w * p;
                }
                grad[base + step.action_id] = grad[base + step.action_id] + w;
            }
        }
    }

    if n_traj == 0 {
        return Err(Error::InvalidGroup("no trajectories to evaluate".into()));
    }
    let scale = F::one() / F::cast_usize(n_traj);
    for g in &mut grad {
        *g = *g * scale;
    }
    let clip_fraction = if n_steps == 0 {
        F::zero()
    } else {
        F::cast_usize(n_clipped) / F::cast_usize(n_steps)
    };
    Ok(PoolEvaluation {
        objective: objective * scale,
        grad,
        clip_fraction,
    })
}

/// Mean entropy over the distinct states visited in the given trajectories.
pub fn batch_entropy<'a, F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    trajectories: impl IntoIterator<Item = &'a Trajectory<F>>,
) -> F {
    let visited: BTreeSet<usize> = trajectories
        .into_iter()
        .flat_map(|t| t.steps().iter().map(|s| s.state_id))
        .collect();
    if visited.is_empty() {
        return F::zero();
    }
    let sum = visited
        .iter()
        .fold(F::zero(), |acc, &s| acc + policy.entropy(s));
    sum / F::cast_usize(visited.len())
}

pub fn l2_norm<F: Scalar>(values: &[F]) -> F {
    values.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt()
}

/// Clipped surrogate objective and diagnostics over one group.
pub fn surrogate_objective<F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    batch: &GroupBatch<F>,
    adv: &AdvantageTensor<F>,
    clip_eps: F,
) -> Result<UpdateReport<F>> {
    let eval = evaluate_pool(
        policy,
        batch
            .trajectories()
            .iter()
            .zip(adv.combined().iter().map(|v| v.as_slice())),
        clip_eps,
    )?;
    Ok(UpdateReport {
        objective_value: eval.objective,
        grad_norm: l2_norm(&eval.grad),
        clip_fraction: eval.clip_fraction,
        entropy: batch_entropy(policy, batch.trajectories()),
    })
}

/// Exact gradient of the clipped surrogate over one group, row-major.
pub fn gradient<F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    batch: &GroupBatch<F>,
    adv: &AdvantageTensor<F>,
    clip_eps: F,
) -> Result<Vec<F>> {
    Ok(evaluate_pool(
        policy,
        batch
            .trajectories()
            .iter()
            .zip(adv.combined().iter().map(|v| v.as_slice())),
        clip_eps,
    )?
    .grad)
}

/// Plain ascent step; returns the updated policy.
pub fn update<F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    grad: &[F],
    learning_rate: F,
) -> Result<SoftmaxPolicy<F>> {
    if learning_rate <= F::zero() {
        return Err(Error::InvalidParam("learning rate must be > 0".into()));
    }
    if grad.len() != policy.theta.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries, policy table {}",
            grad.len(),
            policy.theta.len()
        )));
    }
    let mut next = policy.clone();
    for (t, &g) in next.theta.iter_mut().zip(grad) {
        *t = *t + learning_rate * g;
    }
    Ok(next)
}

/// Gradient-ascent rule applied each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidParam(format!(
                "unknown optimizer '{other}' (expected sgd|adam)"
            ))),
        }
    }
}

/// SGD or Adam ascent with per-run state.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    learning_rate: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, learning_rate: F, dim: usize) -> Self {
        Self {
            kind,
            learning_rate,
            m: vec![F::zero(); dim],
            v: vec![F::zero(); dim],
            t: 0,
        }
    }

    pub fn step(&mut self, policy: &mut SoftmaxPolicy<F>, grad: &[F]) {
        debug_assert_eq!(grad.len(), policy.theta.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (t, &g) in policy.theta.iter_mut().zip(grad) {
                    *t = *t + self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                let b1 = F::cast(0.9);
                let b2 = F::cast(0.999);
                let eps = F::cast(1e-8);
                self.t += 1;
                let bc1 = F::one() - b1.powi(self.t);
                let bc2 = F::one() - b2.powi(self.t);
                for (i, &g) in grad.iter().enumerate() {
                    self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
                    self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    policy.theta[i] =
                        policy.theta[i] + self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

/// Sample `task_count` groups of `group_size` rollouts under the current
/// policy. Each rollout draws from a private stream keyed by
/// `(seed, iteration, task, member)`, and results are collected in index
/// order, so output is identical for any worker count.
pub fn sample_rollouts<F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    spec: &ChainCraftSpec,
    task_count: usize,
    group_size: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<GroupBatch<F>>> {
    if group_size < 2 {
        return Err(Error::InvalidParam(format!(
            "group size must be >= 2, got {group_size}"
        )));
    }
    if task_count == 0 {
        return Err(Error::InvalidParam("task count must be >= 1".into()));
    }
    spec.validate()?;
    if policy.num_states() < spec.num_states() || policy.num_actions() != spec.action_space {
        return Err(Error::ShapeMismatch(format!(
            "policy table {}x{} cannot drive an env with {} states and {} actions",
            policy.num_states(),
            policy.num_actions(),
            spec.num_states(),
            spec.action_space
        )));
    }

    let total = task_count * group_size;
    let trajectories: Vec<Trajectory<F>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let task = idx / group_size;
            let member = idx % group_size;
            let mut rng = StreamRng::stream(
                seed,
                Role::Rollout,
                &[iteration, task as u64, member as u64],
            );
            sample_trajectory(policy, spec, task, &mut rng)
        })
        .collect::<Result<_>>()?;

    trajectories
        .chunks(group_size)
        .map(|chunk| GroupBatch::new(chunk.to_vec()))
        .collect()
}

/// One rollout: policy and environment share the given stream.
pub fn sample_trajectory<F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    spec: &ChainCraftSpec,
    task_id: usize,
    rng: &mut StreamRng,
) -> Result<Trajectory<F>> {
    let mut env = ChainCraftEnv::new(spec.clone())?;
    let mut state = env.reset();
    let mut steps = Vec::new();
    let mut milestones = Vec::new();
    let mut t = 0usize;
    loop {
        let (action, log_prob) = policy.sample_action(state, rng);
        let out = env.step(action, rng);
        t += 1;
        steps.push(StepRecord {
            state_id: state,
            action_id: action,
            behavior_log_prob: log_prob,
            env_reward: F::zero(),
        });
        if out.milestone_fired {
            milestones.push(t);
        }
        if out.done {
            return Trajectory::new(steps, F::cast(out.terminal_reward), milestones, task_id);
        }
        state = out.next_state_id;
    }
}

// --- checkpoints ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointWire<F> {
    num_states: usize,
    num_actions: usize,
    iteration: u64,
    seed: u64,
    theta: Vec<F>,
}

/// Checkpoint metadata stored alongside theta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub seed: u64,
}

pub fn save_checkpoint<F: Scalar>(
    policy: &SoftmaxPolicy<F>,
    meta: CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let wire = CheckpointWire {
        num_states: policy.num_states,
        num_actions: policy.num_actions,
        iteration: meta.iteration,
        seed: meta.seed,
        theta: policy.theta.clone(),
    };
    let json = serde_json::to_string(&wire)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(SoftmaxPolicy<F>, CheckpointMeta)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let wire: CheckpointWire<F> = serde_json::from_str(&text)?;
    let policy = SoftmaxPolicy::from_theta(wire.theta, wire.num_states, wire.num_actions)?;
    Ok((
        policy,
        CheckpointMeta {
            iteration: wire.iteration,
            seed: wire.seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::advantage::{estimate, EstimatorKind};
    use crate::env::ChainCraftSpec;
    use crate::types::BeaconConfig;

    fn test_rng(seed: u64) -> StreamRng {
        StreamRng::stream(seed, Role::Test, &[])
    }

    fn traj_with_adv(entries: &[(usize, usize, f64)], reward: f64) -> (Trajectory<f64>, Vec<f64>) {
        let steps = entries
            .iter()
            .map(|&(s, a, logp)| StepRecord {
                state_id: s,
                action_id: a,
                behavior_log_prob: logp,
                env_reward: 0.0,
            })
            .collect();
        let t = Trajectory::new(steps, reward, vec![], 0).unwrap();
        (t, vec![])
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut policy = SoftmaxPolicy::<f64>::new(3, 4);
        policy.theta_mut().copy_from_slice(&[
            0.0, 1.0, -2.0, 0.5, 100.0, -100.0, 3.0, 2.0, -700.0, -701.0, -699.5, -700.5,
        ]);
        for s in 0..3 {
            let total: f64 = policy.probs(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "state {s}: {total}");
            let lp: f64 = policy.log_prob(s, 0);
            assert!(lp <= 0.0);
        }
    }

    #[test]
    fn uniform_policy_samples_uniformly() {
        let policy = SoftmaxPolicy::<f64>::new(1, 4);
        let mut rng = test_rng(1);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[policy.sample_action(0, &mut rng).0] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn spiked_policy_is_effectively_deterministic() {
        let mut policy = SoftmaxPolicy::<f64>::new(1, 3);
        policy.theta_mut()[1] = 50.0;
        let mut rng = test_rng(2);
        for _ in 0..1000 {
            assert_eq!(policy.sample_action(0, &mut rng).0, 1);
        }
        assert_eq!(policy.greedy_action(0), 1);
    }

    #[test]
    fn identity_ratio_objective_is_mean_advantage_sum() {
        // theta == theta_old: rho = 1, J = mean_i sum_t A, no clipping.
        let mut policy = SoftmaxPolicy::<f64>::new(2, 3);
        policy.theta_mut()[..3].copy_from_slice(&[0.3, -0.2, 0.1]);
        let lp0 = policy.log_prob(0, 1);
        let lp1 = policy.log_prob(1, 2);
        let (t1, _) = traj_with_adv(&[(0, 1, 0.0), (1, 2, 0.0)], 1.0);
        // Rebuild with true behavior log-probs.
        let steps: Vec<StepRecord<f64>> = vec![
            StepRecord {
                state_id: 0,
                action_id: 1,
                behavior_log_prob: lp0,
                env_reward: 0.0,
            },
            StepRecord {
                state_id: 1,
                action_id: 2,
                behavior_log_prob: lp1,
                env_reward: 0.0,
            },
        ];
        let t1 = Trajectory::new(steps, t1.terminal_reward(), vec![], 0).unwrap();
        let advs = [2.0, -0.5];
        let eval = evaluate_pool(&policy, [(&t1, &advs[..])], 0.2).unwrap();
        assert_relative_eq!(eval.objective, 1.5, max_relative = 1e-12);
        assert_eq!(eval.clip_fraction, 0.0);
    }

    #[test]
    fn clip_arithmetic_single_step() {
        // A=+2, rho=1.5, eps=0.2 -> min(3.0, 1.2*2) = 2.4, clipped.
        let policy = SoftmaxPolicy::<f64>::new(1, 2);
        let logp_new = policy.log_prob(0, 0);
        let behavior = logp_new - 1.5f64.ln(); // rho = 1.5
        let steps = vec![StepRecord {
            state_id: 0,
            action_id: 0,
            behavior_log_prob: behavior,
            env_reward: 0.0,
        }];
        let traj = Trajectory::new(steps, 0.0, vec![], 0).unwrap();
        let advs = [2.0];
        let eval = evaluate_pool(&policy, [(&traj, &advs[..])], 0.2).unwrap();
        assert_relative_eq!(eval.objective, 2.4, max_relative = 1e-12);
        assert_eq!(eval.clip_fraction, 1.0);
        // Clipped branch contributes zero gradient.
        assert!(eval.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_advantages_give_zero_objective_and_gradient() {
        let policy = SoftmaxPolicy::<f64>::new(2, 3);
        let lp = policy.log_prob(0, 0);
        let steps = vec![
            StepRecord {
                state_id: 0,
                action_id: 0,
                behavior_log_prob: lp,
                env_reward: 0.0
            };
            4
        ];
        let traj = Trajectory::new(steps, 0.0, vec![], 0).unwrap();
        let advs = [0.0; 4];
        let eval = evaluate_pool(&policy, [(&traj, &advs[..])], 0.2).unwrap();
        assert_eq!(eval.objective, 0.0);
        assert!(eval.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_is_score_times_advantage_at_identity_ratio() {
        let mut policy = SoftmaxPolicy::<f64>::new(1, 3);
        policy.theta_mut().copy_from_slice(&[0.2, -0.4, 0.9]);
        let lp = policy.log_prob(0, 1);
        let steps = vec![StepRecord {
            state_id: 0,
            action_id: 1,
            behavior_log_prob: lp,
            env_reward: 0.0,
        }];
        let traj = Trajectory::new(steps, 1.0, vec![], 0).unwrap();
        let advs = [1.0];
        let eval = evaluate_pool(&policy, [(&traj, &advs[..])], 0.2).unwrap();
        let p = policy.probs(0);
        let expected = [-p[0], 1.0 - p[1], -p[2]];
        for (g, e) in eval.grad.iter().zip(expected) {
            assert_relative_eq!(*g, e, max_relative = 1e-12);
        }
    }

    /// Central finite differences over every coordinate.
    fn fd_gradient(
        policy: &SoftmaxPolicy<f64>,
        items: &[(&Trajectory<f64>, Vec<f64>)],
        clip_eps: f64,
        h: f64,
    ) -> Vec<f64> {
        let objective = |p: &SoftmaxPolicy<f64>| -> f64 {
            evaluate_pool(p, items.iter().map(|(t, a)| (*t, a.as_slice())), clip_eps)
                .unwrap()
                .objective
        };
        (0..policy.theta().len())
            .map(|i| {
                let mut plus = policy.clone();
                plus.theta_mut()[i] += h;
                let mut minus = policy.clone();
                minus.theta_mut()[i] -= h;
                (objective(&plus) - objective(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let num_states = 6;
        let num_actions = 3;
        let mut rng = test_rng(77);
        // Behavior policy differs from the evaluated policy so both clipped
        // and unclipped regimes appear.
        let mut behavior = SoftmaxPolicy::<f64>::new(num_states, num_actions);
        let mut policy = SoftmaxPolicy::<f64>::new(num_states, num_actions);
        for i in 0..num_states * num_actions {
            behavior.theta_mut()[i] = rng.next_f64() * 2.0 - 1.0;
            policy.theta_mut()[i] = rng.next_f64() * 2.0 - 1.0;
        }
        let mut trajs = Vec::new();
        for _ in 0..6 {
            let len = 1 + rng.gen_range(8) as usize;
            let steps: Vec<StepRecord<f64>> = (0..len)
                .map(|_| {
                    let s = rng.gen_range(num_states as u64) as usize;
                    let (a, logp) = behavior.sample_action(s, &mut rng);
                    StepRecord {
                        state_id: s,
                        action_id: a,
                        behavior_log_prob: logp,
                        env_reward: 0.0,
                    }
                })
                .collect();
            let advs: Vec<f64> = (0..len).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
            let traj = Trajectory::new(steps, 0.0, vec![], 0).unwrap();
            trajs.push((traj, advs));
        }
        let items: Vec<(&Trajectory<f64>, Vec<f64>)> =
            trajs.iter().map(|(t, a)| (t, a.clone())).collect();
        let analytic = evaluate_pool(&policy, items.iter().map(|(t, a)| (*t, a.as_slice())), 0.2)
            .unwrap()
            .grad;
        let numeric = fd_gradient(&policy, &items, 0.2, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                ((a - n).abs() / denom) < 1e-4,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn update_rules() {
        let policy = SoftmaxPolicy::<f64>::new(1, 2);
        let same = update(&policy, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(same.theta(), policy.theta());
        let moved = update(&policy, &[0.5, -0.25], 1.0).unwrap();
        assert_eq!(moved.theta(), &[0.5, -0.25]);
        assert!(update(&policy, &[0.0], 1.0).is_err());
        assert!(update(&policy, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn row_shift_leaves_distribution_objective_and_sampling_unchanged() {
        // Dyadic logits and shift keep every float op exact.
        let mut policy = SoftmaxPolicy::<f64>::new(2, 3);
        policy
            .theta_mut()
            .copy_from_slice(&[0.5, -1.25, 0.75, 0.25, 0.0, -0.5]);
        let mut shifted = policy.clone();
        for a in 0..3 {
            shifted.theta_mut()[a] += 2.0;
        }
        assert_eq!(policy.probs(0), shifted.probs(0));
        assert_eq!(policy.log_prob(0, 2), shifted.log_prob(0, 2));

        let mut r1 = test_rng(5);
        let mut r2 = test_rng(5);
        for _ in 0..500 {
            assert_eq!(
                policy.sample_action(0, &mut r1),
                shifted.sample_action(0, &mut r2)
            );
        }

        let lp = policy.log_prob(0, 1);
        let steps = vec![StepRecord {
            state_id: 0,
            action_id: 1,
            behavior_log_prob: lp,
            env_reward: 0.0,
        }];
        let traj = Trajectory::new(steps, 1.0, vec![], 0).unwrap();
        let advs = [1.5];
        let j1 = evaluate_pool(&policy, [(&traj, &advs[..])], 0.2)
            .unwrap()
            .objective;
        let j2 = evaluate_pool(&shifted, [(&traj, &advs[..])], 0.2)
            .unwrap()
            .objective;
        assert_eq!(j1, j2);
    }

    #[test]
    fn bandit_improves_under_repeated_updates() {
        // Two-armed bandit: arm 0 pays off with p=0.9, arm 1 with p=0.1.
        // Mean probability of the better arm over 20 seeds must rise
        // monotonically across checkpoints.
        let checkpoints = [0usize, 10, 20, 30, 40];
        let mut mean_probs = vec![0.0f64; checkpoints.len()];
        for seed in 0..20u64 {
            let mut policy = SoftmaxPolicy::<f64>::new(1, 2);
            let mut history = Vec::new();
            for iter in 0..=40usize {
                if let Some(pos) = checkpoints.iter().position(|&c| c == iter) {
                    history.resize(pos + 1, 0.0);
                    history[pos] = policy.probs(0)[0];
                }
                if iter == 40 {
                    break;
                }
                let mut rng = StreamRng::stream(seed, Role::Test, &[iter as u64]);
                let trajs: Vec<Trajectory<f64>> = (0..8)
                    .map(|_| {
                        let (a, logp) = policy.sample_action(0, &mut rng);
                        let p_win = if a == 0 { 0.9 } else { 0.1 };
                        let reward = if rng.bernoulli(p_win) { 1.0 } else { 0.0 };
                        Trajectory::new(
                            vec![StepRecord {
                                state_id: 0,
                                action_id: a,
                                behavior_log_prob: logp,
                                env_reward: 0.0,
                            }],
                            reward,
                            vec![],
                            0,
                        )
                        .unwrap()
                    })
                    .collect();
                let batch = GroupBatch::new(trajs).unwrap();
                let cfg = BeaconConfig::<f64>::default();
                let mut est_rng = StreamRng::stream(seed, Role::Estimator, &[iter as u64]);
                let adv = estimate(&batch, EstimatorKind::Grpo, &cfg, &mut est_rng).unwrap();
                let grad = gradient(&policy, &batch, &adv, 0.2).unwrap();
                policy = update(&policy, &grad, 0.5).unwrap();
            }
            for (i, v) in history.iter().enumerate() {
                mean_probs[i] += v / 20.0;
            }
        }
        for w in mean_probs.windows(2) {
            assert!(
                w[1] > w[0],
                "mean better-arm probability fell: {mean_probs:?}"
            );
        }
        assert!(mean_probs.last().unwrap() > &0.7, "{mean_probs:?}");
    }

    #[test]
    fn optimizer_adam_moves_toward_gradient() {
        let mut policy = SoftmaxPolicy::<f64>::new(1, 2);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 2);
        for _ in 0..10 {
            opt.step(&mut policy, &[1.0, -1.0]);
        }
        assert!(policy.theta()[0] > 0.0 && policy.theta()[1] < 0.0);
    }

    #[test]
    fn rollouts_are_deterministic_and_grouped() {
        let spec = ChainCraftSpec {
            num_subgoals: 2,
            subgoal_lengths: vec![2, 2],
            action_space: 3,
            slip_prob: 0.2,
            trap_prob: 0.0,
            max_horizon: 20,
            budget: None,
            observable_trap: false,
            env_seed: 0,
        };
        let policy = SoftmaxPolicy::<f64>::new(spec.num_states(), 3);
        let a = sample_rollouts(&policy, &spec, 3, 4, 11, 2).unwrap();
        let b = sample_rollouts(&policy, &spec, 3, 4, 11, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for (task, group) in a.iter().enumerate() {
            assert_eq!(group.group_size(), 4);
            assert_eq!(group.task_id(), task);
            for traj in group.trajectories() {
                assert!(traj.len() <= 20);
            }
        }
        // Different iteration gives different rollouts.
        let c = sample_rollouts(&policy, &spec, 3, 4, 11, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn near_deterministic_policy_yields_identical_group_members() {
        let spec = ChainCraftSpec {
            num_subgoals: 1,
            subgoal_lengths: vec![3],
            action_space: 3,
            slip_prob: 0.0,
            trap_prob: 0.0,
            max_horizon: 10,
            budget: None,
            observable_trap: false,
            env_seed: 0,
        };
        let mut policy = SoftmaxPolicy::<f64>::new(spec.num_states(), 3);
        let correct: Vec<usize> = {
            let env = ChainCraftEnv::new(spec.clone()).unwrap();
            (0..spec.num_states())
                .map(|s| env.correct_action(s))
                .collect()
        };
        for (s, &a) in correct.iter().enumerate() {
            policy.theta_mut()[s * 3 + a] = 60.0;
        }
        let groups = sample_rollouts(&policy, &spec, 1, 4, 0, 0).unwrap();
        let first = &groups[0].trajectories()[0];
        for traj in groups[0].trajectories() {
            assert_eq!(traj, first);
            assert_eq!(traj.terminal_reward(), 1.0);
            assert_eq!(traj.len(), 3);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut policy = SoftmaxPolicy::<f64>::new(3, 2);
        policy.theta_mut()[4] = 1.25;
        save_checkpoint(
            &policy,
            CheckpointMeta {
                iteration: 7,
                seed: 42,
            },
            &path,
        )
        .unwrap();
        let (back, meta) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back, policy);
        assert_eq!(meta.iteration, 7);
        assert_eq!(meta.seed, 42);
    }
}
