//! Acceptance gate: eight criteria, each printing a single pass/fail line.
//! Criteria 5-7 share one training battery (5 seeds full model + 4 ablation
//! variants x 5 seeds on the same data), built once behind a OnceLock.

use asvh::feature_store::{generate_synthetic, SplitSpec, SyntheticSpec, VideoFeatureSet};
use asvh::objectives::LossConfig;
use asvh::retrieval::{encode_split, evaluate, ApDenominator};
use asvh::sampler::{grade_frames, gumbel_perturb, select_drop_set, view_rng};
use asvh::semantic_centers::ClusterConfig;
use asvh::trainer::{run_training, EpochLog, Model, TrainConfig};
use asvh::verify::{verify_gradients, verify_grl, verify_metrics, verify_ste, verify_voting};
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const CLASSES: usize = 10;
const PER_CLASS: usize = 60;
const TRAIN_PER_CLASS: usize = 40;
const QUERY_PER_CLASS: usize = 10;
const HARD_PER_VIDEO: usize = 4;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct RunResult {
    map20: f64,
    gmap: f64,
    logs: Vec<EpochLog>,
}

struct Battery {
    data: VideoFeatureSet,
    hard_frames: Vec<Vec<usize>>,
    split: SplitSpec,
    full: Vec<(RunResult, Model)>,
    ablations: BTreeMap<&'static str, Vec<RunResult>>,
    full_wall: Duration,
}

fn dataset() -> (VideoFeatureSet, Vec<Vec<usize>>, SplitSpec) {
    let spec = SyntheticSpec {
        num_classes: CLASSES,
        videos_per_class: PER_CLASS,
        frames_per_video: 16,
        feature_dim: 32,
        hard_frame_count: HARD_PER_VIDEO,
        hard_noise_scale: 2.0,
        base_noise_scale: 0.3,
        temporal_drift_scale: 0.3,
        seed: 1234,
    };
    let (data, hard) = generate_synthetic(&spec).expect("synthetic corpus");
    let mut split = SplitSpec {
        train_indices: vec![],
        query_indices: vec![],
        gallery_indices: vec![],
    };
    for c in 0..CLASSES {
        for i in 0..PER_CLASS {
            let vid = c * PER_CLASS + i;
            if i < TRAIN_PER_CLASS {
                split.train_indices.push(vid);
                split.gallery_indices.push(vid);
            } else if i < TRAIN_PER_CLASS + QUERY_PER_CLASS {
                split.query_indices.push(vid);
            } else {
                split.gallery_indices.push(vid);
            }
        }
    }
    split.validate(data.num_videos()).expect("split");
    (data, hard, split)
}

fn run_one(
    data: &VideoFeatureSet,
    split: &SplitSpec,
    seed: u64,
    mutate: impl FnOnce(&mut TrainConfig),
) -> (RunResult, Model) {
    let net = asvh::hashnet::HashNetConfig::default();
    let sampler = asvh::sampler::SamplerConfig::default();
    let loss = LossConfig::default();
    let cluster = ClusterConfig {
        seed,
        ..ClusterConfig::default()
    };
    let mut train = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    mutate(&mut train);
    let outcome = run_training(
        data,
        &split.train_indices,
        &net,
        &sampler,
        &loss,
        &cluster,
        &train,
        None,
    )
    .expect("training run");

    let model = outcome.model;
    let labels = data.labels.as_ref().expect("labels");
    let queries = encode_split(&model.ps, &model.hp, &model.net_cfg, data, &split.query_indices)
        .expect("query codes");
    let gallery = encode_split(
        &model.ps,
        &model.hp,
        &model.net_cfg,
        data,
        &split.gallery_indices,
    )
    .expect("gallery codes");
    let qlabels: Vec<u32> = split.query_indices.iter().map(|&i| labels[i]).collect();
    let report = evaluate(
        &queries,
        &gallery,
        &qlabels,
        labels,
        ApDenominator::MinNRelevant,
        false,
    )
    .expect("evaluation");
    (
        RunResult {
            map20: report.map_at[&20],
            gmap: report.gmap,
            logs: outcome.logs,
        },
        model,
    )
}

fn battery() -> &'static Battery {
    static CELL: OnceLock<Battery> = OnceLock::new();
    CELL.get_or_init(|| {
        let (data, hard_frames, split) = dataset();
        let start = Instant::now();
        let full: Vec<(RunResult, Model)> = SEEDS
            .iter()
            .map(|&s| run_one(&data, &split, s, |_| {}))
            .collect();
        let full_wall = start.elapsed();
        let variants: [(&'static str, fn(&mut TrainConfig)); 4] = [
            ("disable_grl", |t| t.disable_grl = true),
            ("random_sampler", |t| t.random_sampler = true),
            ("disable_vc", |t| t.disable_vc = true),
            ("disable_p2set", |t| t.disable_p2set = true),
        ];
        let mut ablations = BTreeMap::new();
        for (name, mutate) in variants {
            let runs = SEEDS
                .iter()
                .map(|&s| run_one(&data, &split, s, mutate).0)
                .collect();
            ablations.insert(name, runs);
        }
        Battery {
            data,
            hard_frames,
            split,
            full,
            ablations,
            full_wall,
        }
    })
}

fn report(criterion: usize, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

#[test]
fn criterion_1_voting_optimality() {
    let start = Instant::now();
    let r = verify_voting(1000, 99);
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        r.passed && secs < 30.0,
        &format!("{} in {secs:.1}s (limit 30s)", r.detail),
    );
}

#[test]
fn criterion_2_grl_sign_contract() {
    let start = Instant::now();
    let r = verify_grl(7);
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        r.passed && secs < 10.0,
        &format!("{} in {secs:.1}s (limit 10s, tolerance 1e-9)", r.detail),
    );
}

#[test]
fn criterion_3_gradient_fidelity() {
    let start = Instant::now();
    let g = verify_gradients(50, 11);
    let s = verify_ste(50, 12);
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        g.passed && s.passed && secs < 120.0,
        &format!(
            "losses: {}; ste: {}; in {secs:.1}s (limit 120s)",
            g.detail, s.detail
        ),
    );
}

#[test]
fn criterion_4_metric_oracles() {
    let r = verify_metrics(100, 13);
    report(4, r.passed, &format!("{} (tolerances 1e-12 / 1e-6)", r.detail));
}

#[test]
fn criterion_5_end_to_end_learning() {
    let b = battery();
    let maps: Vec<f64> = b.full.iter().map(|(r, _)| r.map20).collect();
    let passing = maps.iter().filter(|&&m| m >= 0.5).count();
    let secs = b.full_wall.as_secs_f64();
    report(
        5,
        passing >= 4 && secs <= 900.0,
        &format!(
            "mAP@20 per seed = {:?}; {passing}/5 >= 0.5 (need >= 4); 5 runs in {secs:.0}s (limit 900s)",
            maps.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

/// One-sided Mann-Whitney U (x > y), normal approximation.
fn rank_test_p(x: &[f64], y: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // average ranks over ties
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        i = j + 1;
    }
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let r1: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, is_x), _)| *is_x)
        .map(|(_, &r)| r)
        .sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let sd = (n1 * n2 * (n1 + n2 + 1.0) / 12.0).sqrt();
    let z = (u - mean - 0.5) / sd;
    let normal = Normal::new(0.0, 1.0).unwrap();
    1.0 - normal.cdf(z)
}

#[test]
fn criterion_6_adversarial_sampler_efficacy() {
    let b = battery();
    let model = &b.full[0].1;
    let cfg = &model.sampler_cfg;
    let m0 = b.data.frames_per_video();
    let views_per_video = 25usize;

    let mut hard_dropped = 0usize;
    let mut hard_total = 0usize;
    let mut hard_scores = Vec::new();
    let mut easy_scores = Vec::new();
    for &vid in &b.split.train_indices {
        let frames = b.data.video(vid);
        let scores = grade_frames(&frames, &model.ps, &model.gn).expect("scores");
        let hard: &Vec<usize> = &b.hard_frames[vid];
        for (j, &s) in scores.iter().enumerate() {
            if hard.contains(&j) {
                hard_scores.push(s);
            } else {
                easy_scores.push(s);
            }
        }
        for view in 0..views_per_video {
            let mut rng = view_rng(4242, 0, vid as u64, view as u64);
            let probs = gumbel_perturb(&scores, cfg, &mut rng);
            let plan = select_drop_set(&scores, &probs, cfg.drop_count).expect("plan");
            hard_dropped += plan
                .drop_indices
                .iter()
                .filter(|i| hard.contains(i))
                .count();
            hard_total += hard.len();
        }
    }
    let rate = hard_dropped as f64 / hard_total as f64;
    let uniform = cfg.drop_count as f64 / m0 as f64;
    let p = rank_test_p(&hard_scores, &easy_scores);
    report(
        6,
        rate >= 1.5 * uniform && p < 0.01,
        &format!(
            "hard-frame drop rate {rate:.3} vs uniform {uniform:.3} (need >= {:.3}); rank-test p = {p:.2e} (need < 0.01)",
            1.5 * uniform
        ),
    );
}

#[test]
fn criterion_7_ablation_directionality() {
    let b = battery();
    let mut details = Vec::new();
    let mut all_ok = true;
    for (name, runs) in &b.ablations {
        let wins = b
            .full
            .iter()
            .zip(runs)
            .filter(|((f, _), a)| f.gmap >= a.gmap)
            .count();
        if wins < 3 {
            all_ok = false;
        }
        details.push(format!("{name}: full wins {wins}/5"));
    }
    report(
        7,
        all_ok,
        &format!("{} (need >= 3/5 each)", details.join(", ")),
    );
}

#[test]
fn criterion_8_warmup_schedule() {
    let b = battery();
    let logs = &b.full[0].0.logs;
    let warmup = TrainConfig::default().warmup_epochs;
    let warmup_zero = logs[..warmup].iter().all(|l| l.beta_grad_norm == 0.0);
    let post = &logs[warmup..];
    let positive = post.iter().filter(|l| l.beta_grad_norm > 0.0).count();
    let frac = positive as f64 / post.len() as f64;
    report(
        8,
        warmup_zero && frac >= 0.9,
        &format!(
            "beta-gradient exactly 0 in all {warmup} warm-up epochs: {warmup_zero}; positive in {positive}/{} post-warm-up epochs ({frac:.2}, need >= 0.90)",
            post.len()
        ),
    );
}
