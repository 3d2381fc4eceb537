//! Trajectory sampling and the audit/uncertainty pools driving the
//! fine-tuning loop.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::surrogate::{mean_gradient, MemberModel};

/// New structures sampled between uncertainty-pool refreshes.
pub const UNCERTAINTY_REFRESH_EVERY: usize = 100;

/// Trajectory lengths ramp geometrically from 20 to 1000 over 8 equal
/// run-progress stages.
pub const TRAJECTORY_SCHEDULE: [usize; 8] = [20, 35, 61, 107, 187, 327, 572, 1000];

/// Steps for a trajectory started at `progress` through the run (0..1).
pub fn schedule_steps(progress: f64) -> usize {
    let stage = ((progress.clamp(0.0, 1.0) * 8.0) as usize).min(7);
    TRAJECTORY_SCHEDULE[stage]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub eta: f64,
    pub noise: f64,
    /// Frames are clamped to the box [-clamp, clamp]^dim, keeping the walk
    /// a bounded diffusion.
    pub clamp: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            eta: 0.02,
            noise: 0.15,
            clamp: 2.5,
        }
    }
}

/// Surrogate-gradient-guided random walk:
/// `f_{t+1} = clamp(f_t - eta * grad(mean prediction) + noise)`.
///
/// Returns all frames including the start; a non-finite frame truncates the
/// trajectory at the last finite one. With `n_steps == 0` only the start
/// frame is returned; with `eta == 0` and `noise == 0` all frames are
/// identical.
pub fn sample_trajectory(
    members: &[MemberModel],
    start: &[f64],
    n_steps: usize,
    seed: u64,
    cfg: &TrajectoryConfig,
) -> Vec<Vec<f64>> {
    let grad = mean_gradient(members);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Vec::with_capacity(n_steps + 1);
    frames.push(start.to_vec());
    let mut current = start.to_vec();
    for _ in 0..n_steps {
        let mut next = current.clone();
        for i in 0..next.len() {
            let step = -cfg.eta * grad[i] + cfg.noise * normal.sample(&mut rng);
            next[i] = (next[i] + step).clamp(-cfg.clamp, cfg.clamp);
        }
        if next.iter().any(|v| !v.is_finite()) {
            log::warn!("trajectory produced a non-finite frame; truncating");
            break;
        }
        frames.push(next.clone());
        current = next;
    }
    frames
}

/// A structure produced by sampling, identified for pool bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u64,
    pub features: Vec<f64>,
}

/// What the fine-tuning steering should run next on a free CPU worker.
#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneChoice {
    SimulateAudit(Frame),
    SimulateUncertainty(Frame),
    Sample,
}

/// The audit pool (final frame of each trajectory) and uncertainty pool
/// (highest-variance recent frames), plus the proportional controller that
/// splits free CPU workers between sampling and simulation.
#[derive(Debug, Default)]
pub struct SamplePools {
    audit: VecDeque<Frame>,
    /// Sorted most-uncertain first.
    uncertainty: Vec<Frame>,
    recent: Vec<Frame>,
    sampled_since_refresh: usize,
    target_audit: usize,
    uncertainty_cap: usize,
    assigned_sampling: u64,
    assigned_simulate: u64,
    next_frame_id: u64,
}

impl SamplePools {
    pub fn new(target_audit: usize, uncertainty_cap: usize) -> Self {
        SamplePools {
            target_audit,
            uncertainty_cap,
            ..Default::default()
        }
    }

    pub fn audit_len(&self) -> usize {
        self.audit.len()
    }

    pub fn uncertainty_len(&self) -> usize {
        self.uncertainty.len()
    }

    pub fn sampled_since_refresh(&self) -> usize {
        self.sampled_since_refresh
    }

    pub fn target_audit(&self) -> usize {
        self.target_audit
    }

    pub fn next_frame_id(&mut self) -> u64 {
        let id = self.next_frame_id;
        self.next_frame_id += 1;
        id
    }

    /// Record a completed trajectory: its last frame enters the audit pool,
    /// every frame is counted toward the refresh trigger and kept for the
    /// next uncertainty ranking.
    pub fn record_trajectory(&mut self, frames: Vec<Frame>) {
        let count = frames.len();
        if let Some(last) = frames.last() {
            self.audit.push_back(last.clone());
        }
        self.recent.extend(frames);
        self.sampled_since_refresh += count;
    }

    /// True exactly when enough new structures accumulated to re-rank the
    /// uncertainty pool.
    pub fn needs_refresh(&self) -> bool {
        self.sampled_since_refresh >= UNCERTAINTY_REFRESH_EVERY
    }

    /// Snapshot the frames to score and reset the refresh counter.
    pub fn begin_refresh(&mut self) -> Vec<Frame> {
        self.sampled_since_refresh = 0;
        std::mem::take(&mut self.recent)
    }

    /// Install the refreshed uncertainty pool from (frame, variance) pairs,
    /// keeping the top `uncertainty_cap` by variance.
    pub fn finish_refresh(&mut self, mut scored: Vec<(Frame, f64)>) {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        scored.truncate(self.uncertainty_cap);
        self.uncertainty = scored.into_iter().map(|(f, _)| f).collect();
    }

    /// Pick the next CPU task. Free workers are split between sampling and
    /// simulation in ratio `clamp((T - |audit|) / T, 0, 1)` by rate
    /// matching across calls; the simulate branch draws from the audit pool
    /// while it is under target, then from the uncertainty pool.
    pub fn select_next(&mut self) -> FinetuneChoice {
        let t = self.target_audit.max(1) as f64;
        let frac_sampling = ((t - self.audit.len() as f64) / t).clamp(0.0, 1.0);
        let total = (self.assigned_sampling + self.assigned_simulate) as f64;
        let sample_turn = (self.assigned_sampling as f64) < frac_sampling * (total + 1.0);

        if sample_turn {
            self.assigned_sampling += 1;
            return FinetuneChoice::Sample;
        }
        let choice = if self.audit.len() < self.target_audit {
            self.audit.pop_front().map(FinetuneChoice::SimulateAudit)
        } else {
            None
        };
        let choice = choice.or_else(|| {
            if !self.uncertainty.is_empty() {
                Some(FinetuneChoice::SimulateUncertainty(self.uncertainty.remove(0)))
            } else {
                self.audit.pop_front().map(FinetuneChoice::SimulateAudit)
            }
        });
        match choice {
            Some(c) => {
                self.assigned_simulate += 1;
                c
            }
            None => {
                // Both pools empty: sampling is the only way forward.
                self.assigned_sampling += 1;
                FinetuneChoice::Sample
            }
        }
    }
}

/// Spec-shaped helper around [`SamplePools::select_next`].
pub fn select_next_finetune_task(pools: &mut SamplePools, _free_workers: usize) -> FinetuneChoice {
    pools.select_next()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::surrogate::{train_member, TrainConfig};

    fn members() -> Vec<MemberModel> {
        let examples: Vec<(Vec<f64>, f64)> = (0..20)
            .map(|i| {
                let x = vec![i as f64 / 10.0, -(i as f64) / 7.0];
                let y = x[0] - x[1];
                (x, y)
            })
            .collect();
        (0..3)
            .map(|k| train_member(&examples, k, &TrainConfig::default()).unwrap())
            .collect()
    }

    #[test]
    fn zero_steps_returns_only_start() {
        let frames = sample_trajectory(&members(), &[0.1, 0.2], 0, 1, &TrajectoryConfig::default());
        assert_eq!(frames, vec![vec![0.1, 0.2]]);
    }

    #[test]
    fn zero_eta_zero_noise_freezes_the_walk() {
        let cfg = TrajectoryConfig {
            eta: 0.0,
            noise: 0.0,
            clamp: 2.5,
        };
        let frames = sample_trajectory(&members(), &[0.3, -0.4], 5, 9, &cfg);
        assert_eq!(frames.len(), 6);
        assert!(frames.iter().all(|f| f == &vec![0.3, -0.4]));
    }

    #[test]
    fn frames_respect_the_clamp_box() {
        let cfg = TrajectoryConfig {
            eta: 0.5,
            noise: 2.0,
            clamp: 1.0,
        };
        for frame in sample_trajectory(&members(), &[0.0, 0.0], 50, 3, &cfg) {
            assert!(frame.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn schedule_ramps_from_20_to_1000() {
        assert_eq!(schedule_steps(0.0), 20);
        assert_eq!(schedule_steps(0.999), 1000);
        let lengths: Vec<usize> = (0..8).map(|s| TRAJECTORY_SCHEDULE[s]).collect();
        assert!(lengths.windows(2).all(|w| w[0] < w[1]));
        // geometric: constant ratio within rounding
        for w in lengths.windows(2) {
            let r = w[1] as f64 / w[0] as f64;
            assert!((r - 1.748).abs() < 0.05, "ratio {r} drifts from geometric");
        }
    }

    #[test]
    fn empty_audit_pool_forces_sampling() {
        let mut pools = SamplePools::new(8, 16);
        for _ in 0..5 {
            assert_eq!(pools.select_next(), FinetuneChoice::Sample);
        }
    }

    #[test]
    fn full_audit_pool_draws_uncertainty() {
        let mut pools = SamplePools::new(2, 16);
        let frame = |id| Frame {
            id,
            features: vec![0.0],
        };
        pools.record_trajectory(vec![frame(0)]);
        pools.record_trajectory(vec![frame(1)]);
        pools.record_trajectory(vec![frame(2)]);
        pools.finish_refresh(vec![(frame(10), 0.5), (frame(11), 0.9)]);
        // audit is at/over target: simulate draws rank the uncertainty pool
        // first (most uncertain first).
        let mut got_uncertainty = Vec::new();
        for _ in 0..8 {
            match pools.select_next() {
                FinetuneChoice::SimulateUncertainty(f) => got_uncertainty.push(f.id),
                FinetuneChoice::SimulateAudit(_) | FinetuneChoice::Sample => {}
            }
        }
        assert_eq!(got_uncertainty, vec![11, 10]);
    }

    #[test]
    fn refresh_fires_exactly_at_100_sampled() {
        let mut pools = SamplePools::new(8, 16);
        let mk = |id| Frame {
            id,
            features: vec![0.0],
        };
        pools.record_trajectory((0..99).map(mk).collect());
        assert!(!pools.needs_refresh());
        pools.record_trajectory(vec![mk(99)]);
        assert!(pools.needs_refresh());
        let recent = pools.begin_refresh();
        assert_eq!(recent.len(), 100);
        assert_eq!(pools.sampled_since_refresh(), 0);
    }

    #[test]
    fn controller_settles_at_the_law_fixed_point() {
        // Scripted closed loop: every Sample adds one audit frame, every
        // Simulate consumes one. With the proportional rule
        // clamp((T - |audit|)/T, 0, 1) the inflow/outflow balance sits at
        // |audit| = T/2; the pool must hover there, within +-2.
        let mut pools = SamplePools::new(8, 16);
        let mut next_id = 0u64;
        for _ in 0..400 {
            match pools.select_next() {
                FinetuneChoice::Sample => {
                    let f = Frame {
                        id: next_id,
                        features: vec![0.0],
                    };
                    next_id += 1;
                    pools.record_trajectory(vec![f]);
                }
                FinetuneChoice::SimulateAudit(_) | FinetuneChoice::SimulateUncertainty(_) => {}
            }
        }
        let len = pools.audit_len();
        assert!(
            (2..=6).contains(&len),
            "audit pool {len} drifted from the T/2 = 4 fixed point"
        );
    }
}
