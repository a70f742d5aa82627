//! Shared helpers for the integration suites: random batch generation and a
//! deliberately naive scalar re-derivation of the advantage pipeline, kept
//! independent of the production code paths it checks.

use beacon::rng::{Role, StreamRng};
use beacon::types::{GroupBatch, StepRecord, Trajectory};

/// A random small group: G in 2..=8, T in 1..=20, K in 0..=4.
pub fn random_batch(seed: u64) -> GroupBatch<f64> {
    let mut rng = StreamRng::stream(seed, Role::Test, &[0xBA7C4]);
    let g = 2 + rng.gen_range(7) as usize;
    let trajs = (0..g)
        .map(|_| {
            let len = 1 + rng.gen_range(20) as usize;
            let steps = (0..len)
                .map(|_| StepRecord {
                    state_id: rng.gen_range(6) as usize,
                    action_id: rng.gen_range(4) as usize,
                    behavior_log_prob: -rng.next_f64() * 2.0,
                    env_reward: 0.0,
                })
                .collect();
            let mut milestones: Vec<usize> = (1..=len).filter(|_| rng.bernoulli(0.25)).collect();
            milestones.truncate(4);
            let reward = if rng.bernoulli(0.4) { 1.0 } else { 0.0 };
            Trajectory::new(steps, reward, milestones, 7).unwrap()
        })
        .collect();
    GroupBatch::new(trajs).unwrap()
}

/// Naive per-trajectory, per-step scalar re-derivation of the shaped-reward
/// and dual-scale advantage math: linear scans, loop products instead of
/// `powi`, no shared segment views or baselines.
pub struct NaiveTensor {
    pub traj: Vec<f64>,
    pub seg: Vec<Vec<f64>>,
    pub combined: Vec<Vec<f64>>,
    pub shaped: Vec<Vec<f64>>,
}

pub fn naive_estimate(
    batch: &GroupBatch<f64>,
    r_ms: f64,
    gamma: f64,
    lambda: f64,
    eps: f64,
) -> NaiveTensor {
    let g = batch.group_size();
    let trajs = batch.trajectories();

    // Trajectory level: population statistics, one value per rollout.
    let mut mu = 0.0;
    for t in trajs {
        mu += t.terminal_reward();
    }
    mu /= g as f64;
    let mut var = 0.0;
    for t in trajs {
        var += (t.terminal_reward() - mu) * (t.terminal_reward() - mu);
    }
    var /= g as f64;
    let sigma = var.sqrt();
    let traj: Vec<f64> = trajs
        .iter()
        .map(|t| (t.terminal_reward() - mu) / (sigma + eps))
        .collect();

    // Segment index of step t in trajectory i: smallest k with t <= t_k,
    // else K+1. 1-based throughout.
    let segment_of = |i: usize, t: usize| -> usize {
        let ms = trajs[i].milestone_times();
        for (k, &tk) in ms.iter().enumerate() {
            if t <= tk {
                return k + 1;
            }
        }
        ms.len() + 1
    };
    // Decay by a plain loop product.
    let decay = |d: usize| -> f64 {
        let mut p = 1.0;
        for _ in 0..d {
            p *= gamma;
        }
        p
    };
    let shaped: Vec<Vec<f64>> = (0..g)
        .map(|i| {
            (1..=trajs[i].len())
                .map(|t| {
                    let k = segment_of(i, t);
                    if k <= trajs[i].num_milestones() {
                        let t_k = trajs[i].milestone_times()[k - 1];
                        r_ms * decay(t_k - t)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let max_k = trajs.iter().map(|t| t.num_milestones()).max().unwrap_or(0);
    let mut seg: Vec<Vec<f64>> = (0..g).map(|i| vec![0.0; trajs[i].len()]).collect();
    for k in 1..=max_k {
        // Baseline: group mean of per-step segment returns over members.
        let mut sum = 0.0;
        let mut members = 0usize;
        for j in 0..g {
            if trajs[j].num_milestones() >= k {
                let mut ret = 0.0;
                let mut len = 0usize;
                for t in 1..=trajs[j].len() {
                    if segment_of(j, t) == k {
                        ret += shaped[j][t - 1];
                        len += 1;
                    }
                }
                sum += ret / len as f64;
                members += 1;
            }
        }
        let baseline = sum / members as f64;
        for (i, traj_i) in trajs.iter().enumerate() {
            if traj_i.num_milestones() >= k {
                for t in 1..=traj_i.len() {
                    if segment_of(i, t) == k {
                        seg[i][t - 1] = shaped[i][t - 1] - baseline;
                    }
                }
            }
        }
    }

    let combined: Vec<Vec<f64>> = (0..g)
        .map(|i| {
            (0..trajs[i].len())
                .map(|t| traj[i] + lambda * seg[i][t])
                .collect()
        })
        .collect();
    NaiveTensor {
        traj,
        seg,
        combined,
        shaped,
    }
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Pearson correlation.
pub fn correlation(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Print one pass/fail line per criterion and assert it.
pub fn report(criterion: usize, name: &str, pass: bool, details: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {criterion} ({name}): {details}");
    assert!(pass, "criterion {criterion} ({name}) failed: {details}");
}
