//! Per-epoch pseudo-labeling and hash-center machinery: seeded k-means over
//! encoded training vectors, per-bit component voting for cluster hash
//! centers, the point-to-set Hamming metric, and an exhaustive certification
//! oracle for the voting optimality property.

use crate::error::{AsvhError, Result};
use crate::feature_store::VideoFeatureSet;
use crate::hashnet::{encode_full_view, HashNetConfig, HashNetParams};
use crate::params::ParamSet;
use crate::tape::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingStage {
    /// Mean-pooled tanh hash vectors (the space the anchors live in).
    SoftHash,
    /// Mean over encoder memory rows at d_model.
    EncoderOutput,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClusterConfig {
    pub granularities: Vec<usize>,
    pub kmeans_max_iters: usize,
    pub kmeans_tolerance: f64,
    pub refresh_every_epochs: usize,
    pub embedding_stage: EmbeddingStage,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            granularities: vec![10, 20, 40],
            kmeans_max_iters: 50,
            kmeans_tolerance: 1e-6,
            refresh_every_epochs: 10,
            embedding_stage: EmbeddingStage::SoftHash,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.granularities.is_empty() {
            return Err(AsvhError::Config("at least one granularity required".into()));
        }
        for &g in &self.granularities {
            if g == 0 || g > train_size {
                return Err(AsvhError::Config(format!(
                    "cluster count {g} must be in [1, {train_size}]"
                )));
            }
        }
        if self.refresh_every_epochs == 0 {
            return Err(AsvhError::Config("refresh_every_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GranularityModel {
    pub num_clusters: usize,
    /// Train-position (not dataset index) to cluster id.
    pub assignments: Vec<usize>,
    /// Continuous k-means centroids (bookkeeping only).
    pub centroid_rows: Vec<Vec<f64>>,
    /// Component-voted ±1 hash centers, one row per cluster.
    pub centers: Vec<Vec<i8>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClusterModel {
    pub granularities: Vec<GranularityModel>,
}

impl ClusterModel {
    /// Anchor matrices (A_k × K of ±1) per granularity, for the p2set loss.
    pub fn anchor_mats(&self) -> Vec<Mat> {
        self.granularities
            .iter()
            .map(|g| {
                let k = g.centers.first().map(|c| c.len()).unwrap_or(0);
                Mat::from_shape_fn((g.centers.len(), k), |(r, c)| g.centers[r][c] as f64)
            })
            .collect()
    }
}

/// Result of one k-means run.
pub struct KmeansOutcome {
    pub assignments: Vec<usize>,
    pub centroids: Mat,
    /// Inertia after each Lloyd iteration (non-increasing).
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ initialization, Euclidean metric. Empty
/// clusters are reseeded to the point farthest from its assigned centroid.
pub fn kmeans(
    data: &Mat,
    num_clusters: usize,
    max_iters: usize,
    tolerance: f64,
    rng: &mut impl Rng,
) -> Result<KmeansOutcome> {
    let n = data.nrows();
    let d = data.ncols();
    if num_clusters == 0 || num_clusters > n {
        return Err(AsvhError::Config(format!(
            "num_clusters {num_clusters} must be in [1, {n}]"
        )));
    }

    // k-means++ seeding.
    let mut centroids = Mat::zeros((num_clusters, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), centroids.row(0)))
        .collect();
    for c in 1..num_clusters {
        let total: f64 = min_d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            min_d2[i] = min_d2[i].min(sq_dist(data.row(i), centroids.row(c)));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut inertia_trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assignment step.
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..num_clusters {
                let dist = sq_dist(data.row(i), centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assignments[i] = best;
            inertia += best_d;
        }
        inertia_trace.push(inertia);

        // Update step.
        let mut sums = Mat::zeros((num_clusters, d));
        let mut counts = vec![0usize; num_clusters];
        for i in 0..n {
            let c = assignments[i];
            let mut row = sums.row_mut(c);
            row += &data.row(i);
            counts[c] += 1;
        }
        let mut new_centroids = centroids.clone();
        for c in 0..num_clusters {
            if counts[c] > 0 {
                new_centroids
                    .row_mut(c)
                    .assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Reseed to the point farthest from its assigned centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(data.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(data.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                new_centroids.row_mut(c).assign(&data.row(far));
            }
        }

        let shift: f64 = (0..num_clusters)
            .map(|c| sq_dist(centroids.row(c), new_centroids.row(c)).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        if shift < tolerance {
            break;
        }
    }

    // Final assignment against the last centroids.
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..num_clusters {
            let dist = sq_dist(data.row(i), centroids.row(c));
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }
    inertia_trace.push(inertia);

    Ok(KmeansOutcome {
        assignments,
        centroids,
        inertia_trace,
    })
}

/// Per-bit majority vote; ties go to +1.
pub fn component_vote(codes: &[Vec<i8>]) -> Result<Vec<i8>> {
    let first = codes
        .first()
        .ok_or_else(|| AsvhError::Contract("component_vote over empty set".into()))?;
    let k = first.len();
    let mut center = vec![0i8; k];
    for j in 0..k {
        let pos = codes.iter().filter(|c| c[j] == 1).count();
        let neg = codes.len() - pos;
        center[j] = if pos >= neg { 1 } else { -1 };
    }
    Ok(center)
}

pub fn hamming(a: &[i8], b: &[i8]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
}

/// Mean Hamming distance from `query` to every member of `set`.
pub fn p2set_distance(query: &[i8], set: &[Vec<i8>]) -> Result<f64> {
    if set.is_empty() {
        return Err(AsvhError::Contract("p2set_distance over empty set".into()));
    }
    if set.iter().any(|c| c.len() != query.len()) {
        return Err(AsvhError::Shape("code length mismatch".into()));
    }
    let total: u64 = set.iter().map(|c| hamming(query, c)).sum();
    Ok(total as f64 / set.len() as f64)
}

/// Exhaustively checks that the component-voted center minimizes the
/// aggregate Hamming distance to `codes` over all 2^K candidates.
pub fn certify_center(codes: &[Vec<i8>]) -> Result<(Vec<i8>, bool, u64)> {
    let center = component_vote(codes)?;
    let k = codes[0].len();
    if k > 20 {
        return Err(AsvhError::UnsupportedSize(format!(
            "exhaustive certification bounded at K=20, got {k}"
        )));
    }
    let aggregate = |cand: &[i8]| -> u64 { codes.iter().map(|c| hamming(cand, c)).sum() };
    let mut best = u64::MAX;
    for word in 0u32..(1u32 << k) {
        let cand: Vec<i8> = (0..k)
            .map(|j| if word >> j & 1 == 1 { 1 } else { -1 })
            .collect();
        best = best.min(aggregate(&cand));
    }
    let vote_value = aggregate(&center);
    Ok((center, vote_value == best, best))
}

/// Encodes every training video with no frame dropping, clusters the
/// embeddings per granularity, and component-votes a ±1 hash center per
/// cluster. Deterministic under (parameters, config seed).
pub fn refresh_centers(
    ps: &ParamSet,
    hp: &HashNetParams,
    net_cfg: &HashNetConfig,
    dataset: &VideoFeatureSet,
    train_indices: &[usize],
    cfg: &ClusterConfig,
) -> Result<ClusterModel> {
    cfg.validate(train_indices.len())?;
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(train_indices.len());
    let mut codes: Vec<Vec<i8>> = Vec::with_capacity(train_indices.len());
    for &vid in train_indices {
        let frames = dataset.video(vid);
        let (pooled, code, mem_mean) = encode_full_view(&frames, ps, hp, net_cfg)?;
        embeddings.push(match cfg.embedding_stage {
            EmbeddingStage::SoftHash => pooled,
            EmbeddingStage::EncoderOutput => mem_mean,
        });
        codes.push(code.bits);
    }
    let dim = embeddings[0].len();
    let data = Mat::from_shape_fn((embeddings.len(), dim), |(i, j)| embeddings[i][j]);

    let mut granularities = Vec::with_capacity(cfg.granularities.len());
    for (gi, &num_clusters) in cfg.granularities.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(gi as u64));
        let outcome = kmeans(
            &data,
            num_clusters,
            cfg.kmeans_max_iters,
            cfg.kmeans_tolerance,
            &mut rng,
        )?;
        let mut centers = Vec::with_capacity(num_clusters);
        for c in 0..num_clusters {
            let members: Vec<Vec<i8>> = outcome
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == c)
                .map(|(i, _)| codes[i].clone())
                .collect();
            // A cluster can end empty when duplicates collapse; vote over the
            // nearest single code instead of failing.
            let center = if members.is_empty() {
                let nearest = (0..data.nrows())
                    .min_by(|&a, &b| {
                        let da = sq_dist(data.row(a), outcome.centroids.row(c));
                        let db = sq_dist(data.row(b), outcome.centroids.row(c));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                codes[nearest].clone()
            } else {
                component_vote(&members)?
            };
            centers.push(center);
        }
        granularities.push(GranularityModel {
            num_clusters,
            assignments: outcome.assignments,
            centroid_rows: outcome
                .centroids
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
            centers,
        });
    }
    Ok(ClusterModel { granularities })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_mat;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_codes(count: usize, k: usize, seed: u64) -> Vec<Vec<i8>> {
        let m = seeded_mat(count, k, seed);
        (0..count)
            .map(|i| (0..k).map(|j| if m[[i, j]] >= 0.0 { 1i8 } else { -1 }).collect())
            .collect()
    }

    #[test]
    fn kmeans_saturation_every_point_its_own_cluster() {
        let data = seeded_mat(6, 3, 1);
        let out = kmeans(&data, 6, 20, 1e-9, &mut rng(2)).unwrap();
        let last = *out.inertia_trace.last().unwrap();
        assert!(last < 1e-18, "inertia {last}");
        let mut seen = out.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn kmeans_identical_points_collapse() {
        let data = Mat::from_elem((5, 2), 3.0);
        let out = kmeans(&data, 2, 20, 1e-9, &mut rng(3)).unwrap();
        for c in 0..2 {
            for j in 0..2 {
                assert!((out.centroids[[c, j]] - 3.0).abs() < 1e-12);
            }
        }
        assert!(*out.inertia_trace.last().unwrap() < 1e-18);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        // 12 points in two well-separated 2D blobs.
        let mut data = Mat::zeros((12, 2));
        let noise = seeded_mat(12, 2, 4);
        for i in 0..6 {
            data[[i, 0]] = 10.0 + 0.1 * noise[[i, 0]];
            data[[i, 1]] = 10.0 + 0.1 * noise[[i, 1]];
        }
        for i in 6..12 {
            data[[i, 0]] = -10.0 + 0.1 * noise[[i, 0]];
            data[[i, 1]] = -10.0 + 0.1 * noise[[i, 1]];
        }
        let out = kmeans(&data, 2, 50, 1e-9, &mut rng(5)).unwrap();
        for i in 1..6 {
            assert_eq!(out.assignments[i], out.assignments[0]);
        }
        for i in 7..12 {
            assert_eq!(out.assignments[i], out.assignments[6]);
        }
        assert_ne!(out.assignments[0], out.assignments[6]);

        // Oracle: recomputing inertia from the returned assignments matches,
        // and swapping one point's assignment never improves it.
        let inertia = |assign: &[usize]| -> f64 {
            let mut sums = Mat::zeros((2, 2));
            let mut counts = [0.0f64; 2];
            for i in 0..12 {
                let mut r = sums.row_mut(assign[i]);
                r += &data.row(i);
                counts[assign[i]] += 1.0;
            }
            let mut total = 0.0;
            for i in 0..12 {
                let c = assign[i];
                for j in 0..2 {
                    let d = data[[i, j]] - sums[[c, j]] / counts[c];
                    total += d * d;
                }
            }
            total
        };
        let base = inertia(&out.assignments);
        assert!((base - out.inertia_trace.last().unwrap()).abs() < 1e-6);
        let mut swapped = out.assignments.clone();
        swapped[0] = 1 - swapped[0];
        assert!(inertia(&swapped) > base);
    }

    #[test]
    fn kmeans_inertia_is_non_increasing() {
        let data = seeded_mat(40, 4, 6);
        let out = kmeans(&data, 5, 30, 0.0, &mut rng(7)).unwrap();
        for w in out.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "inertia increased: {:?}", w);
        }
    }

    #[test]
    fn vote_singleton_is_identity() {
        let code = vec![1i8, -1, 1, 1];
        let center = component_vote(&[code.clone()]).unwrap();
        assert_eq!(center, code);
    }

    #[test]
    fn vote_ties_go_positive() {
        let center = component_vote(&[vec![1, -1], vec![-1, 1]]).unwrap();
        assert_eq!(center, vec![1, 1]);
    }

    #[test]
    fn vote_is_permutation_invariant_and_flip_equivariant() {
        let codes = random_codes(7, 8, 8);
        let center = component_vote(&codes).unwrap();
        let mut reversed = codes.clone();
        reversed.reverse();
        assert_eq!(component_vote(&reversed).unwrap(), center);

        // Flip bit 3 of every code; with an odd set there are no ties, so the
        // center's bit 3 must flip too.
        let mut flipped = codes.clone();
        for c in &mut flipped {
            c[3] = -c[3];
        }
        let fc = component_vote(&flipped).unwrap();
        assert_eq!(fc[3], -center[3]);
    }

    #[test]
    fn vote_attains_exhaustive_minimum() {
        let codes = random_codes(7, 8, 9);
        let (center, optimal, best) = certify_center(&codes).unwrap();
        assert!(optimal);
        let value: u64 = codes.iter().map(|c| hamming(&center, c)).sum();
        assert_eq!(value, best);
    }

    #[test]
    fn certify_singleton_and_antipodal() {
        let (c, ok, best) = certify_center(&[vec![1, -1, 1]]).unwrap();
        assert!(ok);
        assert_eq!(best, 0);
        assert_eq!(c, vec![1, -1, 1]);

        let code = vec![1i8, -1, 1, -1];
        let anti: Vec<i8> = code.iter().map(|&b| -b).collect();
        let (_, ok, best) = certify_center(&[code, anti]).unwrap();
        assert!(ok);
        assert_eq!(best, 4); // every candidate totals K
    }

    #[test]
    fn certify_rejects_large_k() {
        let codes = vec![vec![1i8; 21]];
        assert!(matches!(
            certify_center(&codes),
            Err(AsvhError::UnsupportedSize(_))
        ));
    }

    #[test]
    fn p2set_distance_examples() {
        let q = vec![1i8, 1, 1, 1];
        assert_eq!(p2set_distance(&q, &[q.clone()]).unwrap(), 0.0);
        let anti: Vec<i8> = q.iter().map(|&b| -b).collect();
        assert_eq!(p2set_distance(&q, &[anti]).unwrap(), 4.0);
        let set = vec![vec![1, 1, 1, 1], vec![-1, -1, 1, 1]];
        assert_eq!(p2set_distance(&q, &set).unwrap(), 1.0);
    }

    #[test]
    fn p2set_distance_matches_naive_loop_and_bounds() {
        let codes = random_codes(9, 6, 11);
        let q = &codes[0];
        let set = &codes[1..];
        let d = p2set_distance(q, set).unwrap();
        let naive: f64 = set.iter().map(|c| hamming(q, c) as f64).sum::<f64>() / set.len() as f64;
        assert_eq!(d, naive);
        assert!((0.0..=6.0).contains(&d));
    }

    #[test]
    fn refresh_single_granularity_votes_over_all_codes() {
        use crate::feature_store::{generate_synthetic, SyntheticSpec};
        let spec = SyntheticSpec {
            num_classes: 2,
            videos_per_class: 4,
            frames_per_video: 5,
            feature_dim: 6,
            hard_frame_count: 0,
            hard_noise_scale: 0.0,
            base_noise_scale: 0.5,
            temporal_drift_scale: 0.0,
            seed: 12,
        };
        let (set, _) = generate_synthetic(&spec).unwrap();
        let net_cfg = HashNetConfig {
            code_bits: 4,
            feature_dim: 6,
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            mlp_ratio: 2,
            max_frames: 5,
        };
        let mut ps = ParamSet::new();
        let hp = HashNetParams::init(&mut ps, &net_cfg, &mut rng(13));
        let train: Vec<usize> = (0..8).collect();
        let cfg = ClusterConfig {
            granularities: vec![1],
            ..Default::default()
        };
        let model = refresh_centers(&ps, &hp, &net_cfg, &set, &train, &cfg).unwrap();
        assert_eq!(model.granularities.len(), 1);
        let g = &model.granularities[0];
        assert_eq!(g.centers.len(), 1);
        assert!(g.assignments.iter().all(|&a| a == 0));

        // Anchor equals the vote over all training codes.
        let codes: Vec<Vec<i8>> = train
            .iter()
            .map(|&v| {
                encode_full_view(&set.video(v), &ps, &hp, &net_cfg)
                    .unwrap()
                    .1
                    .bits
            })
            .collect();
        assert_eq!(g.centers[0], component_vote(&codes).unwrap());

        // Deterministic under fixed (params, seed).
        let again = refresh_centers(&ps, &hp, &net_cfg, &set, &train, &cfg).unwrap();
        assert_eq!(again.granularities[0].centers, model.granularities[0].centers);
        assert_eq!(again.granularities[0].assignments, model.granularities[0].assignments);
    }
}
