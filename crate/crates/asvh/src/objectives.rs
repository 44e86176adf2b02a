//! Training losses: frame reconstruction, view-contrastive (NT-Xent family),
//! and point-to-set contrastive against cluster hash centers, plus their
//! weighted aggregate. Every loss exposes an analytic gradient with respect
//! to its continuous inputs, verified against central finite differences.

use crate::error::{AsvhError, Result};
use crate::tape::Mat;

/// Cosine guard: added to vector norms before division.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Contrast pooled tanh codes instead of ±1 bits (with STE).
    pub use_soft_codes: bool,
    /// Restore the literal printed denominator (extra positive term plus the
    /// full sum including the anchor itself).
    pub include_positive_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.2,
            tau1: 0.5,
            tau2: 0.5,
            use_soft_codes: false,
            include_positive_in_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau1 <= 0.0 || self.tau2 <= 0.0 {
            return Err(AsvhError::Config("temperatures must be > 0".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(AsvhError::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainPhase {
    Warmup,
    Full,
}

/// Mean squared reconstruction error over dropped frames:
/// (1/(V*M)) sum_v sum_m ||orig - recon||^2, where V counts video-views.
pub fn frame_reconstruction_loss(originals: &[Mat], reconstructions: &[Mat]) -> Result<f64> {
    let (loss, _) = frame_reconstruction_loss_grad(originals, reconstructions)?;
    Ok(loss)
}

/// Loss plus gradient with respect to each reconstruction matrix.
pub fn frame_reconstruction_loss_grad(
    originals: &[Mat],
    reconstructions: &[Mat],
) -> Result<(f64, Vec<Mat>)> {
    if originals.len() != reconstructions.len() {
        return Err(AsvhError::Shape(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(originals.len());
    let count = originals.len() as f64;
    for (o, r) in originals.iter().zip(reconstructions) {
        if o.dim() != r.dim() {
            return Err(AsvhError::Shape(format!(
                "original {:?} vs reconstruction {:?}",
                o.dim(),
                r.dim()
            )));
        }
        let m = o.nrows().max(1) as f64;
        let diff = r - o;
        total += diff.mapv(|x| x * x).sum() / m;
        grads.push(diff.mapv(|x| 2.0 * x / (m * count)));
    }
    Ok((total / count, grads))
}

fn guarded_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    dot / (na * nb)
}

/// d cos(a,b) / da with the same norm guard as [`guarded_cos`].
fn cos_grad_a(a: &[f64], b: &[f64]) -> Vec<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let ra: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = ra + NORM_EPS;
    let nb = rb + NORM_EPS;
    let mut g: Vec<f64> = b.iter().map(|&bj| bj / (na * nb)).collect();
    if ra > 1e-300 {
        let c = dot / (na * na * nb * ra);
        for (gj, &aj) in g.iter_mut().zip(a) {
            *gj -= c * aj;
        }
    }
    g
}

/// View-contrastive loss over 2N view codes laid out as (2i, 2i+1) positive
/// pairs. Returns the loss and its gradient with respect to the code matrix.
pub fn view_contrastive_loss(
    codes: &Mat,
    tau1: f64,
    include_positive_in_denominator: bool,
) -> Result<(f64, Mat)> {
    let n2 = codes.nrows();
    if n2 < 2 || n2 % 2 != 0 {
        return Err(AsvhError::Contract(format!(
            "view_contrastive_loss needs an even number >= 2 of codes, got {n2}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..n2).map(|i| codes.row(i).to_vec()).collect();
    // Similarity matrix s[a][k] = cos(a, k) / tau1.
    let mut sim = Mat::zeros((n2, n2));
    for a in 0..n2 {
        for k in 0..n2 {
            sim[[a, k]] = guarded_cos(&rows[a], &rows[k]) / tau1;
        }
    }

    let mut loss = 0.0;
    let mut gsim = Mat::zeros((n2, n2));
    let scale = 1.0 / n2 as f64;
    for a in 0..n2 {
        let pos = a ^ 1;
        if include_positive_in_denominator {
            // Literal printed denominator: extra positive term plus the sum
            // over all 2N codes (anchor included).
            let mx = (0..n2).map(|k| sim[[a, k]]).fold(sim[[a, pos]], f64::max);
            let mut denom = (sim[[a, pos]] - mx).exp();
            for k in 0..n2 {
                denom += (sim[[a, k]] - mx).exp();
            }
            loss += scale * (-(sim[[a, pos]] - mx) + denom.ln());
            for k in 0..n2 {
                gsim[[a, k]] += scale * (sim[[a, k]] - mx).exp() / denom;
            }
            gsim[[a, pos]] += scale * ((sim[[a, pos]] - mx).exp() / denom - 1.0);
        } else {
            // Standard NT-Xent: denominator over all k != a (positive included once).
            let mut mx = f64::NEG_INFINITY;
            for k in 0..n2 {
                if k != a {
                    mx = mx.max(sim[[a, k]]);
                }
            }
            let mut denom = 0.0;
            for k in 0..n2 {
                if k != a {
                    denom += (sim[[a, k]] - mx).exp();
                }
            }
            loss += scale * (-(sim[[a, pos]] - mx) + denom.ln());
            for k in 0..n2 {
                if k != a {
                    gsim[[a, k]] += scale * (sim[[a, k]] - mx).exp() / denom;
                }
            }
            gsim[[a, pos]] -= scale;
        }
    }

    // Chain through cosine to the codes. s[a][k] depends on rows a and k.
    let mut grad = Mat::zeros(codes.raw_dim());
    for a in 0..n2 {
        for k in 0..n2 {
            let g = gsim[[a, k]] / tau1;
            if g == 0.0 {
                continue;
            }
            let da = cos_grad_a(&rows[a], &rows[k]);
            for j in 0..codes.ncols() {
                grad[[a, j]] += g * da[j];
            }
            let dk = cos_grad_a(&rows[k], &rows[a]);
            for j in 0..codes.ncols() {
                grad[[k, j]] += g * dk[j];
            }
        }
    }
    Ok((loss, grad))
}

/// Point-to-set contrastive loss: per granularity, softmax cross-entropy over
/// the anchor set with the assigned center as the positive, normalized by
/// 2N * num_granularities. `assigned[g][v]` is the anchor index of batch
/// video `v` at granularity `g`; both views of a video share it.
pub fn p2set_loss(
    codes: &Mat,
    anchors: &[Mat],
    assigned: &[Vec<usize>],
    tau2: f64,
) -> Result<(f64, Mat)> {
    let n2 = codes.nrows();
    if n2 == 0 || n2 % 2 != 0 {
        return Err(AsvhError::Contract("p2set_loss needs 2N view codes".into()));
    }
    if anchors.len() != assigned.len() {
        return Err(AsvhError::Contract(format!(
            "{} anchor sets vs {} assignment sets",
            anchors.len(),
            assigned.len()
        )));
    }
    let num_g = anchors.len();
    if num_g == 0 {
        return Err(AsvhError::Contract("p2set_loss needs >= 1 granularity".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n2).map(|i| codes.row(i).to_vec()).collect();
    let mut loss = 0.0;
    let mut grad = Mat::zeros(codes.raw_dim());
    let scale = 1.0 / (n2 as f64 * num_g as f64);
    for (g, (centers, assign)) in anchors.iter().zip(assigned).enumerate() {
        if assign.len() != n2 / 2 {
            return Err(AsvhError::Contract(format!(
                "granularity {g}: {} assignments for {} videos",
                assign.len(),
                n2 / 2
            )));
        }
        let num_anchors = centers.nrows();
        if num_anchors == 0 {
            return Err(AsvhError::Contract(format!("granularity {g} has no anchors")));
        }
        let anchor_rows: Vec<Vec<f64>> = (0..num_anchors).map(|m| centers.row(m).to_vec()).collect();
        for i in 0..n2 {
            let c = assign[i / 2];
            if c >= num_anchors {
                return Err(AsvhError::Contract(format!(
                    "granularity {g}: assignment {c} out of range ({num_anchors} anchors)"
                )));
            }
            let sims: Vec<f64> = anchor_rows
                .iter()
                .map(|am| guarded_cos(&rows[i], am) / tau2)
                .collect();
            let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = sims.iter().map(|&s| (s - mx).exp()).sum();
            loss += scale * (-(sims[c] - mx) + denom.ln());
            for (m, am) in anchor_rows.iter().enumerate() {
                let q = (sims[m] - mx).exp() / denom;
                let gs = scale * (q - if m == c { 1.0 } else { 0.0 }) / tau2;
                if gs == 0.0 {
                    continue;
                }
                let da = cos_grad_a(&rows[i], am);
                for j in 0..codes.ncols() {
                    grad[[i, j]] += gs * da[j];
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Warmup: L_FR + alpha * L_VC. Full: adds beta * L_P2Set.
pub fn aggregate_loss(
    l_fr: f64,
    l_vc: f64,
    l_p2set: f64,
    config: &LossConfig,
    phase: TrainPhase,
) -> f64 {
    match phase {
        TrainPhase::Warmup => l_fr + config.alpha * l_vc,
        TrainPhase::Full => l_fr + config.alpha * l_vc + config.beta * l_p2set,
    }
}
