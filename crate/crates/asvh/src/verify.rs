//! Property-verification suites: voting optimality against exhaustive search,
//! the gradient-reversal sign contract, straight-through-estimator gradients
//! against finite differences, loss-gradient fidelity, and metric oracles.
//! Shared by the `verify` CLI command and the acceptance tests.

use crate::feature_store::{generate_synthetic, SyntheticSpec};
use crate::hashnet::HashNetConfig;
use crate::objectives::{
    frame_reconstruction_loss_grad, p2set_loss, view_contrastive_loss, LossConfig, TrainPhase,
};
use crate::retrieval::{
    average_precision_at_n, gmap, map_at_n, pack_code, pr_curve, rank_gallery, ApDenominator,
    CodeTable, MAP_CUTOFFS,
};
use crate::sampler::SamplerConfig;
use crate::semantic_centers::{certify_center, component_vote, hamming};
use crate::tape::{Mat, Tape};
use crate::trainer::{
    compute_batch_grads, Model, OptimizerKind, OptimizerState, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        SuiteResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn random_code(k: usize, rng: &mut impl Rng) -> Vec<i8> {
    (0..k).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
}

/// Component-voted centers attain the exhaustive Hamming-aggregate minimum on
/// every random instance (code length <= 12, set sizes 1-25).
pub fn verify_voting(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimal = 0usize;
    for _ in 0..instances {
        let k = rng.gen_range(1..=12);
        let n = rng.gen_range(1..=25);
        let codes: Vec<Vec<i8>> = (0..n).map(|_| random_code(k, &mut rng)).collect();
        let voted = component_vote(&codes).expect("vote");
        let (_, _, best) = certify_center(&codes).expect("certify");
        let voted_cost: u64 = codes.iter().map(|c| hamming(&voted, c)).sum();
        if voted_cost == best {
            optimal += 1;
        }
    }
    SuiteResult::new(
        "voting",
        optimal == instances,
        format!("{optimal}/{instances} instances optimal"),
    )
}

fn tiny_model_and_data(seed: u64) -> (Model, crate::feature_store::VideoFeatureSet) {
    let net = HashNetConfig {
        code_bits: 8,
        feature_dim: 8,
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        attention_heads: 2,
        mlp_ratio: 2,
        max_frames: 6,
    };
    let sampler = SamplerConfig {
        drop_count: 2,
        delta: 0.2,
        epsilon: 1e-10,
    };
    let spec = SyntheticSpec {
        num_classes: 2,
        videos_per_class: 3,
        frames_per_video: 6,
        feature_dim: 8,
        hard_frame_count: 2,
        hard_noise_scale: 1.0,
        base_noise_scale: 0.1,
        temporal_drift_scale: 0.2,
        seed,
    };
    let data = generate_synthetic(&spec).expect("synthetic").0;
    let model = Model::init(net, sampler, seed).expect("model");
    (model, data)
}

/// A single sgd step with and without the reversal layer from identical
/// state: sampler-parameter deltas are exact negatives (1e-9), hashing
/// network deltas identical.
pub fn verify_grl(seed: u64) -> SuiteResult {
    let mut train = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let loss = LossConfig::default();
    let batch: Vec<usize> = (0..4).collect();

    let mut per_setting = Vec::new();
    for disable_grl in [false, true] {
        train.disable_grl = disable_grl;
        let (mut model, data) = tiny_model_and_data(seed);
        let before = model.ps.values.clone();
        let mut opt = OptimizerState::new(&model.ps);
        let (_, grads) = compute_batch_grads(
            &model,
            &data,
            &batch,
            0,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .expect("batch");
        opt.step(&mut model.ps, &grads, &train);
        let sampler_delta: Vec<f64> = model
            .gn
            .slots()
            .iter()
            .flat_map(|&s| {
                (&model.ps.values[s] - &before[s]).iter().copied().collect::<Vec<_>>()
            })
            .collect();
        let hash_delta: Vec<f64> = model
            .hp
            .slots()
            .iter()
            .flat_map(|&s| {
                (&model.ps.values[s] - &before[s]).iter().copied().collect::<Vec<_>>()
            })
            .collect();
        per_setting.push((sampler_delta, hash_delta));
    }
    let sampler_dev = per_setting[0]
        .0
        .iter()
        .zip(&per_setting[1].0)
        .map(|(a, b)| (a + b).abs())
        .fold(0.0f64, f64::max);
    let hash_dev = per_setting[0]
        .1
        .iter()
        .zip(&per_setting[1].1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let moved = per_setting[0].0.iter().any(|d| d.abs() > 0.0);
    let passed = sampler_dev < 1e-9 && hash_dev < 1e-12 && moved;
    SuiteResult::new(
        "grl",
        passed,
        format!(
            "max |delta_with + delta_without| = {sampler_dev:.3e} (sampler), \
             max |delta diff| = {hash_dev:.3e} (hashnet), sampler moved: {moved}"
        ),
    )
}

fn finite_diff<F: FnMut(&Mat) -> f64>(x: &Mat, mut f: F, h: f64) -> Mat {
    let mut g = Mat::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
    }
    g
}

fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (1e-8 + x.abs().max(y.abs())))
        .fold(0.0, f64::max)
}

fn seeded_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Straight-through estimators: the analytic gradient of the hard forward
/// path equals finite differences of the corresponding soft path.
pub fn verify_ste(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(4..10);
        let k = rng.gen_range(1..n);
        let scores = seeded_mat(1, n, &mut rng);
        let w = seeded_mat(1, n, &mut rng);

        // Hard TopK: f = sum(w * topk(softmax(s))); soft path swaps the
        // multi-hot indicator for the probabilities themselves.
        let mut tape = Tape::new();
        let s = tape.param(0, scores.clone());
        let p = tape.softmax_rows(s);
        let m = tape.hard_topk_ste(p, k);
        let wn = tape.constant(w.clone());
        let prod = tape.mul(m, wn);
        let f = tape.sum_all(prod);
        let grads = tape.backward(&[(f, Mat::from_elem((1, 1), 1.0))]);
        let analytic = tape.param_grads(&grads)[0].1.clone();
        let soft = |x: &Mat| -> f64 {
            let row: Vec<f64> = x.row(0).to_vec();
            let probs = crate::sampler::softmax(&row);
            probs.iter().zip(w.row(0)).map(|(p, w)| p * w).sum()
        };
        let fd = finite_diff(&scores, soft, 1e-6);
        worst = worst.max(max_rel_err(&analytic, &fd));

        // Sign: f = sum(w * sign(x)); soft path is the identity.
        let x = seeded_mat(1, n, &mut rng);
        let mut tape = Tape::new();
        let xn = tape.param(0, x.clone());
        let sg = tape.sign_ste(xn);
        let wn = tape.constant(w.clone());
        let prod = tape.mul(sg, wn);
        let f = tape.sum_all(prod);
        let grads = tape.backward(&[(f, Mat::from_elem((1, 1), 1.0))]);
        let analytic = tape.param_grads(&grads)[0].1.clone();
        worst = worst.max(max_rel_err(&analytic, &w));
    }
    SuiteResult::new(
        "ste",
        worst <= 1e-4,
        format!("max relative error {worst:.3e} over {instances} instances (tolerance 1e-4)"),
    )
}

/// Analytic gradients of every loss match central finite differences
/// (relative error <= 1e-4) over seeded instances.
pub fn verify_gradients(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        // Frame reconstruction.
        let o = seeded_mat(3, 4, &mut rng);
        let r = seeded_mat(3, 4, &mut rng);
        let (_, grads) = frame_reconstruction_loss_grad(&[o.clone()], &[r.clone()]).unwrap();
        let fd = finite_diff(
            &r,
            |x| frame_reconstruction_loss_grad(&[o.clone()], &[x.clone()]).unwrap().0,
            1e-5,
        );
        worst = worst.max(max_rel_err(&grads[0], &fd));

        // View contrastive.
        let codes = seeded_mat(6, 5, &mut rng);
        let tau = rng.gen_range(0.2..1.0);
        for flag in [false, true] {
            let (_, g) = view_contrastive_loss(&codes, tau, flag).unwrap();
            let fd = finite_diff(
                &codes,
                |x| view_contrastive_loss(x, tau, flag).unwrap().0,
                1e-5,
            );
            worst = worst.max(max_rel_err(&g, &fd));
        }

        // Point-to-set.
        let anchors = vec![
            Mat::from_shape_fn((3, 5), |_| if rng.gen::<bool>() { 1.0 } else { -1.0 }),
            Mat::from_shape_fn((2, 5), |_| if rng.gen::<bool>() { 1.0 } else { -1.0 }),
        ];
        let assigned = vec![
            (0..3).map(|_| rng.gen_range(0..3)).collect::<Vec<_>>(),
            (0..3).map(|_| rng.gen_range(0..2)).collect::<Vec<_>>(),
        ];
        let (_, g) = p2set_loss(&codes, &anchors, &assigned, tau).unwrap();
        let fd = finite_diff(
            &codes,
            |x| p2set_loss(x, &anchors, &assigned, tau).unwrap().0,
            1e-5,
        );
        worst = worst.max(max_rel_err(&g, &fd));
    }
    SuiteResult::new(
        "gradients",
        worst <= 1e-4,
        format!("max relative error {worst:.3e} over {instances} instances (tolerance 1e-4)"),
    )
}

/// mAP@N, GMAP and PR points match naive enumeration oracles to 1e-12, and
/// GMAP of six 0.3 values equals sqrt(6*0.09) within 1e-6.
pub fn verify_metrics(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.gen_range(4..17);
        let gallery_n = rng.gen_range(5..=200);
        let query_n = rng.gen_range(1..6);
        let classes = rng.gen_range(2..5);
        let gallery_codes: Vec<Vec<i8>> =
            (0..gallery_n).map(|_| random_code(k, &mut rng)).collect();
        let query_codes: Vec<Vec<i8>> =
            (0..query_n).map(|_| random_code(k, &mut rng)).collect();
        let labels: Vec<u32> = (0..gallery_n).map(|_| rng.gen_range(0..classes)).collect();
        let qlabels: Vec<u32> = (0..query_n).map(|_| rng.gen_range(0..classes)).collect();
        let gallery = CodeTable::from_codes(&gallery_codes, (0..gallery_n).collect()).unwrap();
        let queries = CodeTable::from_codes(&query_codes, (0..query_n).collect()).unwrap();

        let rankings: Vec<Vec<usize>> = query_codes
            .iter()
            .map(|q| rank_gallery(&pack_code(q), &gallery).unwrap())
            .collect();
        for n in [5usize, 20, 100] {
            let fast =
                map_at_n(&rankings, &qlabels, &labels, n, ApDenominator::MinNRelevant).unwrap();
            // Oracle: stable sort on scalar Hamming distances, explicit AP loop.
            let mut ap_sum = 0.0;
            for (q, &ql) in query_codes.iter().zip(&qlabels) {
                let mut dist: Vec<(usize, usize)> = gallery_codes
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (q.iter().zip(g).filter(|(a, b)| a != b).count(), i))
                    .collect();
                dist.sort();
                let total_rel = labels.iter().filter(|&&l| l == ql).count();
                let mut hits = 0usize;
                let mut psum = 0.0;
                for (rank, &(_, gi)) in dist.iter().take(n).enumerate() {
                    if labels[gi] == ql {
                        hits += 1;
                        psum += hits as f64 / (rank + 1) as f64;
                    }
                }
                if total_rel > 0 {
                    ap_sum += psum / n.min(total_rel) as f64;
                }
            }
            let oracle = ap_sum / query_n as f64;
            worst = worst.max((fast - oracle).abs());
        }

        let pr = pr_curve(&queries, &gallery, &qlabels, &labels).unwrap();
        for &(r, p, rec) in &pr {
            let mut ret = 0u64;
            let mut rel_ret = 0u64;
            let mut rel_total = 0u64;
            for (q, &ql) in query_codes.iter().zip(&qlabels) {
                for (gi, g) in gallery_codes.iter().enumerate() {
                    let d = q.iter().zip(g).filter(|(a, b)| a != b).count();
                    let rel = labels[gi] == ql;
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
            let op = if ret == 0 { 1.0 } else { rel_ret as f64 / ret as f64 };
            let orec = if rel_total == 0 {
                1.0
            } else {
                rel_ret as f64 / rel_total as f64
            };
            worst = worst.max((p - op).abs()).max((rec - orec).abs());
        }
    }

    let flat: std::collections::BTreeMap<usize, f64> =
        MAP_CUTOFFS.iter().map(|&n| (n, 0.3)).collect();
    let g = gmap(&flat).unwrap();
    let gmap_dev = (g - (6.0f64 * 0.09).sqrt()).abs();
    let spot = (average_precision_at_n(
        &[true, false, true, false, true],
        3,
        5,
        ApDenominator::MinNRelevant,
    ) - (1.0 + 2.0 / 3.0 + 0.6) / 3.0)
        .abs();
    let passed = worst <= 1e-12 && gmap_dev <= 1e-6 && spot <= 1e-12;
    SuiteResult::new(
        "metrics",
        passed,
        format!(
            "max oracle deviation {worst:.3e} over {instances} instances; \
             |GMAP(0.3x6) - 0.734847| = {gmap_dev:.3e}"
        ),
    )
}

/// Runs the named suite ("all" runs every suite).
pub fn run_suites(suite: &str, instances: usize, seed: u64) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    let all = suite == "all";
    if all || suite == "voting" {
        out.push(verify_voting(instances, seed));
    }
    if all || suite == "grl" {
        out.push(verify_grl(seed));
    }
    if all || suite == "ste" {
        out.push(verify_ste(instances.min(50), seed));
    }
    if all || suite == "gradients" {
        out.push(verify_gradients(instances.min(50), seed));
    }
    if all || suite == "metrics" {
        out.push(verify_metrics(instances.min(100), seed));
    }
    out
}
