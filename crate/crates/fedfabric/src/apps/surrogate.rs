//! Randomized linear ensemble surrogate: each member is a bootstrap
//! resample fit by ridge regression on randomly projected features.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("training set needs at least 2 examples, got {0}")]
    TooFewExamples(usize),
    #[error("ridge system was not solvable")]
    Unsolvable,
    #[error("non-finite weights after fit")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub projection_dim: usize,
    pub lambda: f64,
    /// Use the identity projection instead of a random one (the projection
    /// dim then equals the feature dim).
    pub identity_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            projection_dim: 32,
            lambda: 1e-3,
            identity_projection: false,
        }
    }
}

/// One ensemble member: projection matrix (input dim x projection dim,
/// row-major) and linear weights (projection dim + 1, intercept last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberModel {
    pub dim: usize,
    pub proj_dim: usize,
    pub seed: u64,
    pub projection: Vec<f64>,
    pub weights: Vec<f64>,
}

const PROJECTION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn projection_matrix(dim: usize, cfg: &TrainConfig, seed: u64) -> (usize, Vec<f64>) {
    if cfg.identity_projection {
        let mut p = vec![0.0; dim * dim];
        for i in 0..dim {
            p[i * dim + i] = 1.0;
        }
        return (dim, p);
    }
    let m = cfg.projection_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROJECTION_SALT);
    let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
    let p = (0..dim * m).map(|_| normal.sample(&mut rng)).collect();
    (m, p)
}

fn project(member_dim: usize, proj_dim: usize, projection: &[f64], x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; proj_dim];
    for i in 0..member_dim {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        let row = &projection[i * proj_dim..(i + 1) * proj_dim];
        for (j, p) in row.iter().enumerate() {
            z[j] += xi * p;
        }
    }
    z
}

/// Fit one member: bootstrap-resample the training set with the member
/// seed, project, and solve the ridge system. Deterministic given the
/// training multiset, seed, and config.
pub fn train_member(
    examples: &[(Vec<f64>, f64)],
    member_seed: u64,
    cfg: &TrainConfig,
) -> Result<MemberModel, SurrogateError> {
    let n = examples.len();
    if n < 2 {
        return Err(SurrogateError::TooFewExamples(n));
    }
    let dim = examples[0].0.len();
    let (m, projection) = projection_matrix(dim, cfg, member_seed);

    let mut rng = ChaCha8Rng::seed_from_u64(member_seed);
    let rows = m + 1;
    // Normal equations accumulated directly: A = Z1'Z1 + lambda*I, b = Z1'y.
    let mut a = DMatrix::<f64>::zeros(rows, rows);
    let mut b = DVector::<f64>::zeros(rows);
    for _ in 0..n {
        let pick = rng.gen_range(0..n);
        let (x, y) = &examples[pick];
        let mut z1 = project(dim, m, &projection, x);
        z1.push(1.0);
        for i in 0..rows {
            b[i] += z1[i] * y;
            for j in i..rows {
                a[(i, j)] += z1[i] * z1[j];
            }
        }
    }
    for i in 0..rows {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
        a[(i, i)] += cfg.lambda;
    }
    let chol = a.cholesky().ok_or(SurrogateError::Unsolvable)?;
    let w = chol.solve(&b);
    let weights: Vec<f64> = w.iter().copied().collect();
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFinite);
    }
    Ok(MemberModel {
        dim,
        proj_dim: m,
        seed: member_seed,
        projection,
        weights,
    })
}

pub fn predict(member: &MemberModel, x: &[f64]) -> f64 {
    let z = project(member.dim, member.proj_dim, &member.projection, x);
    let mut out = member.weights[member.proj_dim];
    for j in 0..member.proj_dim {
        out += member.weights[j] * z[j];
    }
    out
}

pub fn predict_batch(member: &MemberModel, xs: &[Vec<f64>]) -> Vec<f64> {
    xs.iter().map(|x| predict(member, x)).collect()
}

/// Gradient of the mean member prediction. Members are affine, so this is
/// constant in x: mean over members of P·w.
pub fn mean_gradient(members: &[MemberModel]) -> Vec<f64> {
    let dim = members.first().map(|m| m.dim).unwrap_or(0);
    let mut grad = vec![0.0; dim];
    for member in members {
        for i in 0..dim {
            let row = &member.projection[i * member.proj_dim..(i + 1) * member.proj_dim];
            let mut g = 0.0;
            for (j, p) in row.iter().enumerate() {
                g += p * member.weights[j];
            }
            grad[i] += g;
        }
    }
    for g in &mut grad {
        *g /= members.len().max(1) as f64;
    }
    grad
}

/// Upper confidence bound per candidate: mean plus population standard
/// deviation over the K member predictions.
///
/// `per_member` is K rows of N predictions; every row must be N long.
pub fn ucb_scores(per_member: &[Vec<f64>]) -> Vec<f64> {
    let k = per_member.len();
    assert!(k >= 1, "ucb needs at least one member row");
    let n = per_member[0].len();
    for row in per_member {
        assert_eq!(row.len(), n, "ragged prediction matrix");
    }
    let mut scores = Vec::with_capacity(n);
    for j in 0..n {
        let mut mean = 0.0;
        for row in per_member {
            mean += row[j];
        }
        mean /= k as f64;
        let mut var = 0.0;
        for row in per_member {
            let d = row[j] - mean;
            var += d * d;
        }
        var /= k as f64; // population variance
        scores.push(mean + var.sqrt());
    }
    scores
}

/// Population standard deviation per candidate over member predictions.
pub fn ensemble_std(per_member: &[Vec<f64>]) -> Vec<f64> {
    let means_plus_std = ucb_scores(per_member);
    let k = per_member.len() as f64;
    let n = per_member[0].len();
    (0..n)
        .map(|j| {
            let mean: f64 = per_member.iter().map(|r| r[j]).sum::<f64>() / k;
            means_plus_std[j] - mean
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_examples(n: usize, dim: usize) -> Vec<(Vec<f64>, f64)> {
        // y = 2*x0 - x1 + 0.5, exactly representable with identity projection
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = 2.0 * x[0] - x[1] + 0.5;
                (x, y)
            })
            .collect()
    }

    #[test]
    fn identity_projection_recovers_linear_labels() {
        let examples = linear_examples(200, 4);
        let cfg = TrainConfig {
            identity_projection: true,
            lambda: 1e-9,
            ..Default::default()
        };
        let member = train_member(&examples, 11, &cfg).unwrap();
        let mut sq = 0.0;
        for (x, y) in &examples {
            let e = predict(&member, x) - y;
            sq += e * e;
        }
        let rms = (sq / examples.len() as f64).sqrt();
        assert!(rms < 1e-6, "rms {rms} too high for the realizable case");
    }

    #[test]
    fn training_is_deterministic() {
        let examples = linear_examples(50, 4);
        let cfg = TrainConfig::default();
        let a = train_member(&examples, 123, &cfg).unwrap();
        let b = train_member(&examples, 123, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_gives_pairwise_distinct_members() {
        let examples = linear_examples(200, 8);
        let cfg = TrainConfig::default();
        let members: Vec<MemberModel> = (0..8)
            .map(|k| train_member(&examples, 1000 + k, &cfg).unwrap())
            .collect();
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                assert_ne!(
                    members[i].weights, members[j].weights,
                    "members {i} and {j} coincide"
                );
            }
        }
    }

    #[test]
    fn too_few_examples_is_an_error() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_member(&linear_examples(1, 4), 1, &cfg),
            Err(SurrogateError::TooFewExamples(1))
        ));
    }

    #[test]
    fn ucb_matches_hand_arithmetic() {
        // member predictions [1, 2, 3] for one candidate:
        // mean 2, population std sqrt(2/3) = 0.8165
        let scores = ucb_scores(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert!((scores[0] - 2.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn single_member_ucb_is_the_prediction() {
        let scores = ucb_scores(&[vec![4.25, -1.5]]);
        assert_eq!(scores, vec![4.25, -1.5]);
    }
}
