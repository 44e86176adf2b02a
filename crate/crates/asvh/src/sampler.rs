//! Adversarial frame sampler: per-frame scoring MLP, Gumbel-Softmax top-k
//! drop-set selection with a straight-through estimator, and the gradient
//! reversal layer.
//!
//! score_j = sigmoid(W4(LN(W2(GELU(W1 v_j)) + v_j))), applied per frame.
//! p = Softmax over frames of (S + delta * G), G_j = -log(-log(U_j)+eps)+eps.
//! The drop set is the M highest-probability frames (ties to lower index).

use crate::error::{AsvhError, Result};
use crate::params::{xavier, zeros, ParamSet};
use crate::tape::{top_k_indices, Mat, NodeId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Slots of the frame-scoring network inside a [`ParamSet`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GradeNetParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln_gain: usize,
    pub ln_shift: usize,
    pub w4: usize,
    pub b4: usize,
}

impl GradeNetParams {
    pub fn init(ps: &mut ParamSet, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let d = feature_dim;
        GradeNetParams {
            w1: ps.add("grade.w1", xavier(d, d, rng)),
            b1: ps.add("grade.b1", zeros(1, d)),
            w2: ps.add("grade.w2", xavier(d, d, rng)),
            b2: ps.add("grade.b2", zeros(1, d)),
            ln_gain: ps.add("grade.ln_gain", crate::params::ones(1, d)),
            ln_shift: ps.add("grade.ln_shift", zeros(1, d)),
            w4: ps.add("grade.w4", xavier(d, 1, rng)),
            b4: ps.add("grade.b4", zeros(1, 1)),
        }
    }

    pub fn slots(&self) -> Vec<usize> {
        vec![
            self.w1, self.b1, self.w2, self.b2, self.ln_gain, self.ln_shift, self.w4, self.b4,
        ]
    }

    /// All-zero parameters (including the layer-norm gain); used by tests.
    pub fn init_zeroed(ps: &mut ParamSet, feature_dim: usize) -> Self {
        let d = feature_dim;
        GradeNetParams {
            w1: ps.add("grade.w1", zeros(d, d)),
            b1: ps.add("grade.b1", zeros(1, d)),
            w2: ps.add("grade.w2", zeros(d, d)),
            b2: ps.add("grade.b2", zeros(1, d)),
            ln_gain: ps.add("grade.ln_gain", zeros(1, d)),
            ln_shift: ps.add("grade.ln_shift", zeros(1, d)),
            w4: ps.add("grade.w4", zeros(d, 1)),
            b4: ps.add("grade.b4", zeros(1, 1)),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// M: number of frames dropped per view.
    pub drop_count: usize,
    /// delta: Gumbel noise level.
    pub delta: f64,
    /// eps: numeric guard inside and outside the double log.
    pub epsilon: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            drop_count: 8,
            delta: 0.2,
            epsilon: 1e-10,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, frames_per_video: usize) -> Result<()> {
        if self.drop_count >= frames_per_video {
            return Err(AsvhError::Config(format!(
                "drop_count {} must be < frames_per_video {}",
                self.drop_count, frames_per_video
            )));
        }
        if self.delta < 0.0 {
            return Err(AsvhError::Config("delta must be >= 0".into()));
        }
        if self.epsilon <= 0.0 || self.epsilon > 1e-3 {
            return Err(AsvhError::Config("epsilon must be in (0, 1e-3]".into()));
        }
        Ok(())
    }
}

/// Per-view sampling outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DropPlan {
    pub scores: Vec<f64>,
    pub perturbed_probs: Vec<f64>,
    pub drop_indices: Vec<usize>,
    /// Complement of `drop_indices` in original temporal order.
    pub keep_indices: Vec<usize>,
}

/// Builds the scoring network on a tape. Returns the M0×1 score node.
pub fn build_scores(
    tape: &mut Tape,
    frames: NodeId,
    ps: &ParamSet,
    gn: &GradeNetParams,
) -> NodeId {
    let w1 = ps.node(tape, gn.w1);
    let b1 = ps.node(tape, gn.b1);
    let w2 = ps.node(tape, gn.w2);
    let b2 = ps.node(tape, gn.b2);
    let gain = ps.node(tape, gn.ln_gain);
    let shift = ps.node(tape, gn.ln_shift);
    let w4 = ps.node(tape, gn.w4);
    let b4 = ps.node(tape, gn.b4);

    let h = tape.matmul(frames, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    let h = tape.add(h, frames); // residual
    let h = tape.layer_norm(h, gain, shift, LAYER_NORM_EPS);
    let h = tape.matmul(h, w4);
    let h = tape.add_row(h, b4);
    tape.sigmoid(h)
}

/// Per-frame scores in (0,1) for an M0×D frame matrix.
pub fn grade_frames(frames: &Mat, ps: &ParamSet, gn: &GradeNetParams) -> Result<Vec<f64>> {
    let d = ps.value(gn.w1).nrows();
    if frames.ncols() != d {
        return Err(AsvhError::Shape(format!(
            "frame dim {} != parameter dim {d}",
            frames.ncols()
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(AsvhError::NonFinite("grade_frames input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone());
    let s = build_scores(&mut tape, x, ps, gn);
    Ok(tape.value(s).column(0).to_vec())
}

/// Gumbel noise vector: G_j = -log(-log(U_j) + eps) + eps.
pub fn sample_gumbel(count: usize, epsilon: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen_range(0.0..1.0);
            gumbel_from_uniform(u, epsilon)
        })
        .collect()
}

pub fn gumbel_from_uniform(u: f64, epsilon: f64) -> f64 {
    -((-(u.max(f64::MIN_POSITIVE)).ln()) + epsilon).ln() + epsilon
}

/// p = Softmax(S + delta * G) with explicit uniform draws (testable core).
pub fn perturb_with_uniforms(scores: &[f64], delta: f64, epsilon: f64, u: &[f64]) -> Vec<f64> {
    assert_eq!(scores.len(), u.len());
    let logits: Vec<f64> = scores
        .iter()
        .zip(u)
        .map(|(&s, &ui)| s + delta * gumbel_from_uniform(ui, epsilon))
        .collect();
    softmax(&logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Gumbel-perturbed frame probabilities. With delta = 0 this is exactly
/// Softmax(scores) and independent of the rng.
pub fn gumbel_perturb(scores: &[f64], config: &SamplerConfig, rng: &mut impl Rng) -> Vec<f64> {
    let u: Vec<f64> = (0..scores.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    perturb_with_uniforms(scores, config.delta, config.epsilon, &u)
}

/// Drop set = indices of the M largest perturbed probabilities (ties broken
/// by lower index); keep set is the complement in temporal order.
pub fn select_drop_set(scores: &[f64], perturbed_probs: &[f64], m: usize) -> Result<DropPlan> {
    let m0 = perturbed_probs.len();
    if m >= m0 {
        return Err(AsvhError::Config(format!("drop count {m} must be < frame count {m0}")));
    }
    let drop_indices = top_k_indices(perturbed_probs, m);
    let dropped: std::collections::HashSet<usize> = drop_indices.iter().copied().collect();
    let keep_indices: Vec<usize> = (0..m0).filter(|i| !dropped.contains(i)).collect();
    Ok(DropPlan {
        scores: scores.to_vec(),
        perturbed_probs: perturbed_probs.to_vec(),
        drop_indices,
        keep_indices,
    })
}

/// Identity forward; the backward rule (gradient times -1) lives in
/// [`Tape::grl`].
pub fn gradient_reversal(x: &Mat) -> Mat {
    x.clone()
}

/// Dedicated random stream per (seed, epoch, video, view): reproducible and
/// independent across views.
pub fn view_rng(global_seed: u64, epoch: u64, video: u64, view: u64) -> ChaCha8Rng {
    let mut z = global_seed;
    for part in [epoch, video, view] {
        z ^= splitmix64(part).wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6).wrapping_add(z >> 2);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(z))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
