//! Brute-force Hamming-space retrieval over packed codes and the evaluation
//! suite: mAP@N, the root-sum-square GMAP aggregate, and PR curves swept over
//! Hamming radius.

use crate::error::{AsvhError, Result};
use crate::feature_store::VideoFeatureSet;
use crate::hashnet::{encode_full_view, HashNetConfig, HashNetParams};
use crate::params::ParamSet;
use std::collections::BTreeMap;

/// mAP@N is reported at these cutoffs; GMAP aggregates exactly this set.
pub const MAP_CUTOFFS: [usize; 6] = [5, 20, 40, 60, 80, 100];

/// ±1 codes packed into machine words; bit j set means bit value +1.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CodeTable {
    pub bits_per_code: usize,
    pub ids: Vec<usize>,
    pub packed: Vec<Vec<u64>>,
}

pub fn pack_code(bits: &[i8]) -> Vec<u64> {
    let words = bits.len().div_ceil(64);
    let mut out = vec![0u64; words];
    for (j, &b) in bits.iter().enumerate() {
        if b > 0 {
            out[j / 64] |= 1u64 << (j % 64);
        }
    }
    out
}

pub fn unpack_code(words: &[u64], k: usize) -> Vec<i8> {
    (0..k)
        .map(|j| if words[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 })
        .collect()
}

pub fn hamming_packed(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

impl CodeTable {
    pub fn from_codes(codes: &[Vec<i8>], ids: Vec<usize>) -> Result<Self> {
        if codes.len() != ids.len() {
            return Err(AsvhError::Shape("codes/ids length mismatch".into()));
        }
        let k = codes.first().map(|c| c.len()).unwrap_or(0);
        if codes.iter().any(|c| c.len() != k) {
            return Err(AsvhError::Shape("ragged code lengths".into()));
        }
        Ok(CodeTable {
            bits_per_code: k,
            ids,
            packed: codes.iter().map(|c| pack_code(c)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.packed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packed.is_empty()
    }

    pub fn code(&self, row: usize) -> Vec<i8> {
        unpack_code(&self.packed[row], self.bits_per_code)
    }
}

/// Full-view encoding of the given dataset indices into a packed code table.
pub fn encode_split(
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
    features: &VideoFeatureSet,
    indices: &[usize],
) -> Result<CodeTable> {
    if features.feature_dim() != cfg.feature_dim {
        return Err(AsvhError::Shape(format!(
            "feature dim {} does not match checkpoint dim {}",
            features.feature_dim(),
            cfg.feature_dim
        )));
    }
    let mut codes = Vec::with_capacity(indices.len());
    for &i in indices {
        let (_, code, _) = encode_full_view(&features.video(i), ps, hp, cfg)?;
        codes.push(code.bits);
    }
    CodeTable::from_codes(&codes, indices.to_vec())
}

/// Gallery rows sorted by ascending Hamming distance to the query, ties
/// broken by ascending gallery position (stable). Returns gallery ids.
pub fn rank_gallery(query: &[u64], gallery: &CodeTable) -> Result<Vec<usize>> {
    let expected = gallery.bits_per_code.div_ceil(64);
    if !gallery.is_empty() && query.len() != expected {
        return Err(AsvhError::Shape(format!(
            "query has {} words, gallery codes have {expected}",
            query.len()
        )));
    }
    let mut order: Vec<(u32, usize)> = gallery
        .packed
        .iter()
        .enumerate()
        .map(|(pos, code)| (hamming_packed(query, code), pos))
        .collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().map(|(_, pos)| gallery.ids[pos]).collect())
}

/// Denominator convention for AP@N.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApDenominator {
    /// min(N, total relevant in gallery) — the default convention.
    MinNRelevant,
    /// Number of relevant hits within the top N (sensitivity alternative).
    HitsAtN,
}

/// AP@N over a ranked relevance pattern. `total_relevant` counts relevant
/// gallery items for this query. Zero-relevant queries score 0.
pub fn average_precision_at_n(
    relevance: &[bool],
    total_relevant: usize,
    n: usize,
    denom: ApDenominator,
) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let cutoff = n.min(relevance.len());
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (k, &rel) in relevance.iter().take(cutoff).enumerate() {
        if rel {
            hits += 1;
            precision_sum += hits as f64 / (k + 1) as f64;
        }
    }
    let denominator = match denom {
        ApDenominator::MinNRelevant => n.min(total_relevant),
        ApDenominator::HitsAtN => hits,
    };
    if denominator == 0 {
        0.0
    } else {
        precision_sum / denominator as f64
    }
}

/// mAP@N over per-query ranked gallery ids, with class labels indexed by
/// dataset id. Queries with zero relevant items contribute 0 and are counted.
pub fn map_at_n(
    rankings: &[Vec<usize>],
    query_labels: &[u32],
    labels: &[u32],
    n: usize,
    denom: ApDenominator,
) -> Result<f64> {
    if rankings.len() != query_labels.len() {
        return Err(AsvhError::Shape("rankings/query_labels mismatch".into()));
    }
    if n == 0 {
        return Err(AsvhError::Contract("N must be >= 1".into()));
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (ranked, &ql) in rankings.iter().zip(query_labels) {
        let relevance: Vec<bool> = ranked.iter().map(|&id| labels[id] == ql).collect();
        let total_relevant = relevance.iter().filter(|&&r| r).count();
        total += average_precision_at_n(&relevance, total_relevant, n, denom);
    }
    Ok(total / rankings.len() as f64)
}

/// Root of the sum of squared mAP@N values over all six standard cutoffs.
pub fn gmap(map_values: &BTreeMap<usize, f64>) -> Result<f64> {
    let mut sum = 0.0;
    for n in MAP_CUTOFFS {
        let v = map_values.get(&n).ok_or_else(|| {
            AsvhError::Contract(format!("gmap requires mAP@{n}; missing"))
        })?;
        sum += v * v;
    }
    Ok(sum.sqrt())
}

/// Micro-averaged precision/recall at each Hamming radius r in 0..=K.
/// Precision with zero retrieved items is defined as 1.0.
pub fn pr_curve(
    queries: &CodeTable,
    gallery: &CodeTable,
    query_labels: &[u32],
    labels: &[u32],
) -> Result<Vec<(usize, f64, f64)>> {
    if queries.bits_per_code != gallery.bits_per_code {
        return Err(AsvhError::Shape("code length mismatch".into()));
    }
    let k = queries.bits_per_code;
    // retrieved_at[r], relevant_retrieved_at[r], as cumulative counts.
    let mut retrieved = vec![0u64; k + 1];
    let mut relevant_retrieved = vec![0u64; k + 1];
    let mut total_relevant: u64 = 0;
    for (qi, q) in queries.packed.iter().enumerate() {
        let ql = query_labels[qi];
        for (gi, g) in gallery.packed.iter().enumerate() {
            let d = hamming_packed(q, g) as usize;
            let rel = labels[gallery.ids[gi]] == ql;
            retrieved[d] += 1;
            if rel {
                relevant_retrieved[d] += 1;
                total_relevant += 1;
            }
        }
    }
    let mut points = Vec::with_capacity(k + 1);
    let mut cum_ret = 0u64;
    let mut cum_rel = 0u64;
    for r in 0..=k {
        cum_ret += retrieved[r];
        cum_rel += relevant_retrieved[r];
        let precision = if cum_ret == 0 {
            1.0
        } else {
            cum_rel as f64 / cum_ret as f64
        };
        let recall = if total_relevant == 0 {
            1.0
        } else {
            cum_rel as f64 / total_relevant as f64
        };
        points.push((r, precision, recall));
    }
    Ok(points)
}

/// Evaluation output serialized as JSON.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RetrievalReport {
    pub bits: usize,
    pub map_at: BTreeMap<usize, f64>,
    pub gmap: f64,
    pub pr: Vec<(usize, f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_query_ap: Option<Vec<f64>>,
}

/// Full evaluation of a query table against a gallery table.
pub fn evaluate(
    queries: &CodeTable,
    gallery: &CodeTable,
    query_labels: &[u32],
    labels: &[u32],
    denom: ApDenominator,
    with_per_query: bool,
) -> Result<RetrievalReport> {
    let rankings: Vec<Vec<usize>> = queries
        .packed
        .iter()
        .map(|q| rank_gallery(q, gallery))
        .collect::<Result<_>>()?;
    let mut map_at = BTreeMap::new();
    for n in MAP_CUTOFFS {
        map_at.insert(n, map_at_n(&rankings, query_labels, labels, n, denom)?);
    }
    let g = gmap(&map_at)?;
    let pr = pr_curve(queries, gallery, query_labels, labels)?;
    let per_query_ap = if with_per_query {
        Some(
            rankings
                .iter()
                .zip(query_labels)
                .map(|(ranked, &ql)| {
                    let relevance: Vec<bool> =
                        ranked.iter().map(|&id| labels[id] == ql).collect();
                    let total_relevant = relevance.iter().filter(|&&r| r).count();
                    average_precision_at_n(&relevance, total_relevant, 100, denom)
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(RetrievalReport {
        bits: queries.bits_per_code,
        map_at,
        gmap: g,
        pr,
        per_query_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::seeded_mat;
    use proptest::prelude::*;

    fn random_codes(count: usize, k: usize, seed: u64) -> Vec<Vec<i8>> {
        let m = seeded_mat(count, k, seed);
        (0..count)
            .map(|i| (0..k).map(|j| if m[[i, j]] >= 0.0 { 1i8 } else { -1 }).collect())
            .collect()
    }

    #[test]
    fn exact_match_ranks_first() {
        let codes = random_codes(10, 16, 1);
        let table = CodeTable::from_codes(&codes, (0..10).collect()).unwrap();
        let q = pack_code(&codes[7]);
        let ranked = rank_gallery(&q, &table).unwrap();
        assert_eq!(ranked[0], 7);
    }

    #[test]
    fn equal_distances_rank_lower_index_first() {
        let codes = vec![vec![1i8, 1, -1, -1], vec![1, 1, -1, -1], vec![-1, -1, 1, 1]];
        let table = CodeTable::from_codes(&codes, vec![10, 11, 12]).unwrap();
        let q = pack_code(&codes[0]);
        let ranked = rank_gallery(&q, &table).unwrap();
        assert_eq!(ranked, vec![10, 11, 12]);
    }

    #[test]
    fn ranking_matches_naive_popcount_oracle() {
        let codes = random_codes(50, 16, 2);
        let table = CodeTable::from_codes(&codes, (0..50).collect()).unwrap();
        let queries = random_codes(5, 16, 3);
        for q in &queries {
            let ranked = rank_gallery(&pack_code(q), &table).unwrap();
            let mut naive: Vec<(u64, usize)> = codes
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let d = q.iter().zip(c).filter(|(a, b)| a != b).count() as u64;
                    (d, i)
                })
                .collect();
            naive.sort();
            let expected: Vec<usize> = naive.into_iter().map(|(_, i)| i).collect();
            assert_eq!(ranked, expected);
        }
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        let relevance = vec![true; 5];
        let ap = average_precision_at_n(&relevance, 8, 5, ApDenominator::MinNRelevant);
        assert!((ap - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_relevant_retrieved_scores_zero() {
        let relevance = vec![false; 5];
        assert_eq!(
            average_precision_at_n(&relevance, 3, 5, ApDenominator::MinNRelevant),
            0.0
        );
        assert_eq!(
            average_precision_at_n(&relevance, 0, 5, ApDenominator::MinNRelevant),
            0.0
        );
    }

    #[test]
    fn ap_hand_evaluated_pattern() {
        // Pattern [1,0,1,0,1], N=5, 3 relevant: (1 + 2/3 + 3/5) / 3.
        let relevance = vec![true, false, true, false, true];
        let ap = average_precision_at_n(&relevance, 3, 5, ApDenominator::MinNRelevant);
        let expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((ap - expected).abs() < 1e-12);
        assert!((ap - 0.7556).abs() < 1e-4);
    }

    #[test]
    fn map_monotone_under_relevant_demotion() {
        // Swapping a relevant item below an irrelevant one cannot raise mAP.
        let labels = vec![0u32, 0, 1, 1];
        let better = vec![vec![0usize, 2, 1, 3]];
        let worse = vec![vec![2usize, 0, 1, 3]];
        let q = vec![0u32];
        let a = map_at_n(&better, &q, &labels, 4, ApDenominator::MinNRelevant).unwrap();
        let b = map_at_n(&worse, &q, &labels, 4, ApDenominator::MinNRelevant).unwrap();
        assert!(a > b);
    }

    #[test]
    fn gmap_examples() {
        let mk = |v: f64| -> BTreeMap<usize, f64> {
            MAP_CUTOFFS.iter().map(|&n| (n, v)).collect()
        };
        assert_eq!(gmap(&mk(0.0)).unwrap(), 0.0);
        let mut one = mk(0.0);
        one.insert(5, 1.0);
        assert!((gmap(&one).unwrap() - 1.0).abs() < 1e-15);
        let g = gmap(&mk(0.3)).unwrap();
        assert!((g - 0.54f64.sqrt()).abs() < 1e-12);
        assert!((g - 0.7348).abs() < 1e-4);

        let mut missing = mk(0.3);
        missing.remove(&40);
        assert!(matches!(gmap(&missing), Err(AsvhError::Contract(_))));
    }

    #[test]
    fn gmap_scales_linearly() {
        let mk = |vals: &[f64]| -> BTreeMap<usize, f64> {
            MAP_CUTOFFS.iter().zip(vals).map(|(&n, &v)| (n, v)).collect()
        };
        let base = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let scaled: Vec<f64> = base.iter().map(|v| 2.5 * v).collect();
        let g1 = gmap(&mk(&base)).unwrap();
        let g2 = gmap(&mk(&scaled)).unwrap();
        assert!((g2 - 2.5 * g1).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_boundaries_and_oracle() {
        let gallery_codes = random_codes(20, 8, 4);
        let query_codes = random_codes(4, 8, 5);
        let labels: Vec<u32> = (0..20).map(|i| (i % 3) as u32).collect();
        let qlabels: Vec<u32> = vec![0, 1, 2, 0];
        let gallery = CodeTable::from_codes(&gallery_codes, (0..20).collect()).unwrap();
        let queries = CodeTable::from_codes(&query_codes, (100..104).collect()).unwrap();
        let points = pr_curve(&queries, &gallery, &qlabels, &labels).unwrap();
        assert_eq!(points.len(), 9);
        // recall non-decreasing, recall(K) = 1.
        for w in points.windows(2) {
            assert!(w[1].2 >= w[0].2);
        }
        assert!((points[8].2 - 1.0).abs() < 1e-15);

        // Naive enumeration oracle.
        for &(r, p, rec) in &points {
            let mut ret = 0u64;
            let mut rel_ret = 0u64;
            let mut rel_total = 0u64;
            for (qi, q) in query_codes.iter().enumerate() {
                for (gi, g) in gallery_codes.iter().enumerate() {
                    let d = q.iter().zip(g).filter(|(a, b)| a != b).count();
                    let rel = labels[gi] == qlabels[qi];
                    if rel {
                        rel_total += 1;
                    }
                    if d <= r {
                        ret += 1;
                        if rel {
                            rel_ret += 1;
                        }
                    }
                }
            }
            let ep = if ret == 0 { 1.0 } else { rel_ret as f64 / ret as f64 };
            let er = rel_ret as f64 / rel_total as f64;
            assert!((p - ep).abs() < 1e-15);
            assert!((rec - er).abs() < 1e-15);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn packed_distance_equals_pm1_formula(seed in 0u64..5000, k in 1usize..70) {
            let codes = random_codes(2, k, seed);
            let (a, b) = (&codes[0], &codes[1]);
            let packed = hamming_packed(&pack_code(a), &pack_code(b)) as f64;
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64) * (y as f64)).sum();
            let formula = (k as f64 - dot) / 2.0;
            prop_assert_eq!(packed, formula);
            // round trip
            prop_assert_eq!(&unpack_code(&pack_code(a), k), a);
        }
    }
}
