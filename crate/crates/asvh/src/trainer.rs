//! Training loop: two dropped-frame views per video, a single gradient tape
//! per batch, gradient reversal between the frame sampler and the hashing
//! network, and a warm-up phase before cluster anchors exist.
//!
//! Gradient routing: the straight-through drop indicator m passes through the
//! reversal layer; kept encoder inputs are scaled by (1 - m) and each dropped
//! frame's reconstruction error is weighted by m_j. Both weights are exactly
//! 1 in the forward pass, so they change no loss value — they only give the
//! sampler a backward path carrying each frame's reconstruction difficulty.

use crate::error::{AsvhError, Result};
use crate::feature_store::VideoFeatureSet;
use crate::hashnet::{
    build_decoder_grouped, build_encoder_grouped, build_hash_grouped, HashNetConfig,
    HashNetParams,
};
use crate::objectives::{
    aggregate_loss, p2set_loss, view_contrastive_loss, LossConfig, TrainPhase,
};
use crate::params::{ones, ParamSet};
use crate::sampler::{
    build_scores, gumbel_from_uniform, view_rng, GradeNetParams, SamplerConfig,
};
use crate::semantic_centers::{refresh_centers, ClusterConfig, ClusterModel};
use crate::tape::{Mat, NodeId, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 = final checkpoint only.
    pub checkpoint_every: usize,
    /// Ablations: drop the reversal layer (sampler becomes cooperative).
    pub disable_grl: bool,
    /// Ablations: uniform-random drop sets, no sampler gradient at all.
    pub random_sampler: bool,
    pub disable_fr: bool,
    pub disable_vc: bool,
    pub disable_p2set: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            warmup_epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            disable_grl: false,
            random_sampler: false,
            disable_fr: false,
            disable_vc: false,
            disable_p2set: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(AsvhError::Config(
                "batch_size must be >= 2 (contrastive pairs need >= 2 videos)".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(AsvhError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AsvhError::Config("learning_rate must be > 0".into()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(AsvhError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(AsvhError::Config("adam_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// The full trainable state: one parameter store shared by the frame sampler
/// and the hashing network, plus their slot maps and structural configs.
#[derive(Debug, Clone)]
pub struct Model {
    pub ps: ParamSet,
    pub gn: GradeNetParams,
    pub hp: HashNetParams,
    pub net_cfg: HashNetConfig,
    pub sampler_cfg: SamplerConfig,
}

impl Model {
    pub fn init(net_cfg: HashNetConfig, sampler_cfg: SamplerConfig, seed: u64) -> Result<Self> {
        net_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let gn = GradeNetParams::init(&mut ps, net_cfg.feature_dim, &mut rng);
        let hp = HashNetParams::init(&mut ps, &net_cfg, &mut rng);
        Ok(Model {
            ps,
            gn,
            hp,
            net_cfg,
            sampler_cfg,
        })
    }
}

/// Adam moment buffers (unused but kept zero-size-cheap under sgd).
pub struct OptimizerState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl OptimizerState {
    pub fn new(ps: &ParamSet) -> Self {
        let m = (0..ps.len())
            .map(|s| Mat::zeros(ps.value(s).raw_dim()))
            .collect::<Vec<_>>();
        OptimizerState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update over every slot that received a gradient.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Option<Mat>], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.learning_rate;
        for (slot, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    ps.values[slot] -= &(g * lr);
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
                    let m = &mut self.m[slot];
                    let v = &mut self.v[slot];
                    *m = &*m * b1 + &(g * (1.0 - b1));
                    *v = &*v * b2 + &(g.mapv(|x| x * x) * (1.0 - b2));
                    let mc = 1.0 - b1.powi(self.t as i32);
                    let vc = 1.0 - b2.powi(self.t as i32);
                    let update =
                        ndarray::Zip::from(&*m).and(&*v).map_collect(|&mi, &vi| {
                            lr * (mi / mc) / ((vi / vc).sqrt() + eps)
                        });
                    ps.values[slot] -= &update;
                }
            }
        }
    }
}

/// Per-batch losses and diagnostics.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub l_fr: f64,
    pub l_vc: f64,
    pub l_p2set: f64,
    pub total: f64,
    /// Frobenius norm of beta times the point-to-set code gradient; exactly 0
    /// whenever that loss is inactive.
    pub beta_grad_norm: f64,
    /// Drop indices per view, in batch order (video-major, two views each).
    pub drop_indices: Vec<Vec<usize>>,
}

/// Anchor matrices plus one assignment vector per granularity; assignments
/// are indexed by batch position.
pub struct BatchAnchors<'a> {
    pub anchors: &'a [Mat],
    pub assigned: Vec<Vec<usize>>,
}

/// Forward + backward over one batch on a single tape. All views are stacked
/// into shared nodes (row-wise ops act on every view at once; attention and
/// pooling stay within per-view row blocks), which keeps the node count per
/// batch constant instead of per view. Returns the stats and per-slot
/// accumulated gradients (None for slots off the graph).
pub fn compute_batch_grads(
    model: &Model,
    features: &VideoFeatureSet,
    batch: &[usize],
    epoch: usize,
    phase: TrainPhase,
    anchors: Option<&BatchAnchors>,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(BatchStats, Vec<Option<Mat>>)> {
    if batch.len() < 2 {
        return Err(AsvhError::Config(
            "a batch needs at least 2 videos".into(),
        ));
    }
    let m0 = features.frames_per_video();
    let d = features.feature_dim();
    model.sampler_cfg.validate(m0)?;
    let m = model.sampler_cfg.drop_count;
    let n_keep = m0 - m;
    let nb = batch.len();
    let nv = 2 * nb;

    let mut tape = Tape::new();

    // All batch frames stacked video-major: row b*m0 + j is frame j of
    // batch[b].
    let mut frames_all = Mat::zeros((nb * m0, d));
    for (b, &vid) in batch.iter().enumerate() {
        let frames = features.video(vid);
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(AsvhError::NonFinite(format!("features of video {vid}")));
        }
        frames_all
            .slice_mut(ndarray::s![b * m0..(b + 1) * m0, ..])
            .assign(&frames);
    }
    let fnode = tape.constant(frames_all);

    // Per-view drop plans. With the learned sampler, the straight-through
    // multi-hot indicator lives in one nv×m0 node (row v = view v).
    let mut keeps: Vec<Vec<usize>> = Vec::with_capacity(nv);
    let mut drops: Vec<Vec<usize>> = Vec::with_capacity(nv);
    let indicator = if train_cfg.random_sampler {
        // Uniform-random drop sets; the scoring network stays off the graph
        // entirely.
        for &vid in batch {
            for view in 0..2 {
                let mut rng = view_rng(train_cfg.seed, epoch as u64, vid as u64, view);
                let mut drop = rand::seq::index::sample(&mut rng, m0, m).into_vec();
                drop.sort_unstable();
                let dropped: std::collections::HashSet<usize> = drop.iter().copied().collect();
                keeps.push((0..m0).filter(|i| !dropped.contains(i)).collect());
                drops.push(drop);
            }
        }
        None
    } else {
        let scores_col = build_scores(&mut tape, fnode, &model.ps, &model.gn);
        let scores_by_video = tape.reshape(scores_col, nb, m0);
        let video_of_view: Vec<usize> = (0..nv).map(|v| v / 2).collect();
        let scores = tape.gather_rows(scores_by_video, &video_of_view);
        let mut noise = Mat::zeros((nv, m0));
        for (b, &vid) in batch.iter().enumerate() {
            for view in 0..2 {
                let mut rng = view_rng(train_cfg.seed, epoch as u64, vid as u64, view);
                for j in 0..m0 {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    noise[[2 * b + view as usize, j]] = model.sampler_cfg.delta
                        * gumbel_from_uniform(u, model.sampler_cfg.epsilon);
                }
            }
        }
        let noise_node = tape.constant(noise);
        let logits = tape.add(scores, noise_node);
        let probs = tape.softmax_rows(logits);
        let multihot = tape.hard_topk_ste(probs, m);
        let mh = if train_cfg.disable_grl {
            multihot
        } else {
            tape.grl(multihot)
        };
        for row in tape.value(mh).rows() {
            let drop: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            keeps.push((0..m0).filter(|i| !drop.contains(i)).collect());
            drops.push(drop);
        }
        Some(mh)
    };

    // Kept frames of every view stacked view-major, plus flat position lists.
    let mut kept_rows = Vec::with_capacity(nv * n_keep);
    let mut keep_positions = Vec::with_capacity(nv * n_keep);
    let mut keep_elems = Vec::with_capacity(nv * n_keep);
    let mut drop_rows = Vec::with_capacity(nv * m);
    let mut drop_elems = Vec::with_capacity(nv * m);
    for v in 0..nv {
        let base = (v / 2) * m0;
        for &pos in &keeps[v] {
            kept_rows.push(base + pos);
            keep_positions.push(pos);
            keep_elems.push((v, pos));
        }
        for &pos in &drops[v] {
            drop_rows.push(base + pos);
            drop_elems.push((v, pos));
        }
    }
    let kept = tape.gather_rows(fnode, &kept_rows);

    // Straight-through weights: kept rows scaled by (1 - m), dropped-frame
    // errors by m. Both are exactly 1 forward; they only route gradients to
    // the sampler.
    let (encoder_input, drop_weight) = match indicator {
        Some(mh) => {
            let mh_keep = tape.gather_elems(mh, &keep_elems);
            let ones_col = tape.constant(ones(nv * n_keep, 1));
            let keep_w = tape.sub(ones_col, mh_keep);
            let drop_w = tape.gather_elems(mh, &drop_elems);
            (tape.mul_col(kept, keep_w), Some(drop_w))
        }
        None => (kept, None),
    };

    let (memory, z) = build_encoder_grouped(
        &mut tape,
        encoder_input,
        &keep_positions,
        n_keep,
        &model.ps,
        &model.hp,
        &model.net_cfg,
    );
    let (_h, pooled, bits) = build_hash_grouped(&mut tape, z, n_keep);
    let recon = build_decoder_grouped(
        &mut tape,
        memory,
        &keeps,
        &drops,
        &model.ps,
        &model.hp,
        &model.net_cfg,
    );

    let orig = tape.gather_rows(fnode, &drop_rows);
    let diff = tape.sub(recon, orig);
    let sq = tape.mul(diff, diff);
    let row_errors = tape.sum_cols(sq);
    let weighted = match drop_weight {
        Some(w) => tape.mul(row_errors, w),
        None => row_errors,
    };
    let fr_node = tape.sum_all(weighted);

    let code_node = if loss_cfg.use_soft_codes { pooled } else { bits };
    let codes = tape.value(code_node).clone();

    let fr_scale = 1.0 / (nv as f64 * m as f64);
    let l_fr = tape.value(fr_node)[[0, 0]] * fr_scale;
    let (l_vc, g_vc) = view_contrastive_loss(
        &codes,
        loss_cfg.tau1,
        loss_cfg.include_positive_in_denominator,
    )?;

    let p2set_active =
        phase == TrainPhase::Full && !train_cfg.disable_p2set && anchors.is_some();
    let (l_p2set, g_p2) = if p2set_active {
        let ba = anchors.unwrap();
        p2set_loss(&codes, ba.anchors, &ba.assigned, loss_cfg.tau2)?
    } else {
        (0.0, Mat::zeros(codes.raw_dim()))
    };

    let fr_weight = if train_cfg.disable_fr { 0.0 } else { 1.0 };
    let alpha = if train_cfg.disable_vc { 0.0 } else { loss_cfg.alpha };
    let beta = if p2set_active { loss_cfg.beta } else { 0.0 };
    let effective = LossConfig {
        alpha,
        beta,
        ..loss_cfg.clone()
    };
    let total = aggregate_loss(fr_weight * l_fr, l_vc, l_p2set, &effective, phase);
    if !total.is_finite() {
        let detail = tape
            .first_non_finite()
            .map(|(id, op)| format!("node {} ({op})", id.0))
            .unwrap_or_else(|| "batch loss".into());
        return Err(AsvhError::NonFinite(detail));
    }

    let mut seeds: Vec<(NodeId, Mat)> = Vec::new();
    if !train_cfg.disable_fr {
        seeds.push((fr_node, Mat::from_elem((1, 1), fr_scale)));
    }
    let code_seed =
        Mat::from_shape_fn(codes.raw_dim(), |(i, j)| alpha * g_vc[[i, j]] + beta * g_p2[[i, j]]);
    if code_seed.iter().any(|&g| g != 0.0) {
        seeds.push((code_node, code_seed));
    }

    let mut slot_grads: Vec<Option<Mat>> = vec![None; model.ps.len()];
    if !seeds.is_empty() {
        let grads = tape.backward(&seeds);
        for (slot, g) in tape.param_grads(&grads) {
            match &mut slot_grads[slot] {
                Some(acc) => *acc += &g,
                entry => *entry = Some(g),
            }
        }
    }

    let beta_grad_norm = beta * g_p2.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((
        BatchStats {
            l_fr,
            l_vc,
            l_p2set,
            total,
            beta_grad_norm,
            drop_indices: drops,
        },
        slot_grads,
    ))
}

/// One optimizer update over a batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    features: &VideoFeatureSet,
    batch: &[usize],
    epoch: usize,
    phase: TrainPhase,
    anchors: Option<&BatchAnchors>,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<BatchStats> {
    let (stats, grads) =
        compute_batch_grads(model, features, batch, epoch, phase, anchors, loss_cfg, train_cfg)?;
    opt.step(&mut model.ps, &grads, train_cfg);
    Ok(stats)
}

/// One epoch row of the JSONL training log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: TrainPhase,
    pub l_fr: f64,
    pub l_vc: f64,
    pub l_p2set: f64,
    pub total: f64,
    pub beta_grad_norm: f64,
    pub wall_ms: u128,
}

pub struct TrainOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub centers: Option<ClusterModel>,
}

fn batch_anchors<'a>(
    centers: &ClusterModel,
    anchors: &'a [Mat],
    train_pos: &std::collections::HashMap<usize, usize>,
    batch: &[usize],
) -> BatchAnchors<'a> {
    let assigned = centers
        .granularities
        .iter()
        .map(|g| batch.iter().map(|vid| g.assignments[train_pos[vid]]).collect())
        .collect();
    BatchAnchors { anchors, assigned }
}

/// Full training loop. Warm-up epochs train reconstruction + view contrast;
/// afterwards cluster anchors are refreshed on cadence and the point-to-set
/// term joins. Writes one JSON object per epoch to `log_sink` when given.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    features: &VideoFeatureSet,
    train_indices: &[usize],
    net_cfg: &HashNetConfig,
    sampler_cfg: &SamplerConfig,
    loss_cfg: &LossConfig,
    cluster_cfg: &ClusterConfig,
    train_cfg: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    features.validate()?;
    net_cfg.validate()?;
    train_cfg.validate()?;
    loss_cfg.validate()?;
    sampler_cfg.validate(features.frames_per_video())?;
    if train_indices.len() < 2 {
        return Err(AsvhError::Config("need at least 2 training videos".into()));
    }
    if train_cfg.epochs > train_cfg.warmup_epochs {
        cluster_cfg.validate(train_indices.len())?;
    }
    if features.feature_dim() != net_cfg.feature_dim {
        return Err(AsvhError::Shape(format!(
            "dataset dim {} != model dim {}",
            features.feature_dim(),
            net_cfg.feature_dim
        )));
    }

    let mut model = Model::init(net_cfg.clone(), sampler_cfg.clone(), train_cfg.seed)?;
    let mut opt = OptimizerState::new(&model.ps);
    let train_pos: std::collections::HashMap<usize, usize> = train_indices
        .iter()
        .enumerate()
        .map(|(p, &v)| (v, p))
        .collect();

    let mut centers: Option<ClusterModel> = None;
    let mut anchor_mats: Vec<Mat> = Vec::new();
    let mut logs = Vec::with_capacity(train_cfg.epochs);

    for epoch in 0..train_cfg.epochs {
        let start = std::time::Instant::now();
        let phase = if epoch < train_cfg.warmup_epochs {
            TrainPhase::Warmup
        } else {
            TrainPhase::Full
        };

        if phase == TrainPhase::Full && !train_cfg.disable_p2set {
            let since_warmup = epoch - train_cfg.warmup_epochs;
            if centers.is_none() || since_warmup % cluster_cfg.refresh_every_epochs == 0 {
                let model_centers = refresh_centers(
                    &model.ps,
                    &model.hp,
                    net_cfg,
                    features,
                    train_indices,
                    cluster_cfg,
                )?;
                anchor_mats = model_centers.anchor_mats();
                centers = Some(model_centers);
            }
        }

        let mut order = train_indices.to_vec();
        let mut shuffle_rng = view_rng(train_cfg.seed, epoch as u64, u64::MAX, u64::MAX);
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut beta_norm_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // a trailing single video cannot form contrastive pairs
            }
            let ba = centers
                .as_ref()
                .map(|c| batch_anchors(c, &anchor_mats, &train_pos, chunk));
            let stats = train_step(
                &mut model,
                &mut opt,
                features,
                chunk,
                epoch,
                phase,
                ba.as_ref(),
                loss_cfg,
                train_cfg,
            )?;
            sums.0 += stats.l_fr;
            sums.1 += stats.l_vc;
            sums.2 += stats.l_p2set;
            sums.3 += stats.total;
            beta_norm_sum += stats.beta_grad_norm;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            phase,
            l_fr: sums.0 / b,
            l_vc: sums.1 / b,
            l_p2set: sums.2 / b,
            total: sums.3 / b,
            beta_grad_norm: beta_norm_sum,
            wall_ms: start.elapsed().as_millis(),
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            serde_json::to_writer(&mut *sink, &log)?;
            sink.write_all(b"\n")?;
        }
        logs.push(log);
    }

    Ok(TrainOutcome {
        model,
        logs,
        centers,
    })
}

// --- checkpoints -----------------------------------------------------------

const PARAMS_MAGIC: &[u8; 4] = b"ASVP";
const PARAMS_VERSION: u16 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub net_cfg: HashNetConfig,
    pub sampler_cfg: SamplerConfig,
    pub loss_cfg: LossConfig,
    pub cluster_cfg: ClusterConfig,
    pub train_cfg: TrainConfig,
    pub epoch: usize,
    pub gn: GradeNetParams,
    pub hp: HashNetParams,
}

/// Writes `{stem}.json` (configs + slot maps) and `{stem}.params` (binary
/// name/shape/f64-LE parameter tensors). Returns the JSON path.
#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    stem: &str,
    model: &Model,
    loss_cfg: &LossConfig,
    cluster_cfg: &ClusterConfig,
    train_cfg: &TrainConfig,
    epoch: usize,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let params_path = dir.join(format!("{stem}.params"));
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.ps.len() as u32).to_le_bytes());
    for slot in 0..model.ps.len() {
        let name = model.ps.name(slot).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let v = model.ps.value(slot);
        out.extend_from_slice(&(v.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(v.ncols() as u32).to_le_bytes());
        for &x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(&params_path, out)?;

    let meta = CheckpointMeta {
        net_cfg: model.net_cfg.clone(),
        sampler_cfg: model.sampler_cfg.clone(),
        loss_cfg: loss_cfg.clone(),
        cluster_cfg: cluster_cfg.clone(),
        train_cfg: train_cfg.clone(),
        epoch,
        gn: model.gn.clone(),
        hp: model.hp.clone(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(json_path)
}

fn read_bytes<'a>(buf: &'a [u8], off: &mut usize, len: usize) -> Result<&'a [u8]> {
    if *off + len > buf.len() {
        return Err(AsvhError::Format {
            offset: *off as u64,
            message: format!("unexpected end of file reading {len} bytes"),
        });
    }
    let s = &buf[*off..*off + len];
    *off += len;
    Ok(s)
}

fn read_u32(buf: &[u8], off: &mut usize) -> Result<u32> {
    let b = read_bytes(buf, off, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

/// Loads a checkpoint from its JSON path (the `.params` file must sit next to
/// it with the same stem).
pub fn load_checkpoint(json_path: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    let params_path = json_path.with_extension("params");
    let buf = std::fs::read(&params_path)?;
    let mut off = 0usize;
    if read_bytes(&buf, &mut off, 4)? != PARAMS_MAGIC {
        return Err(AsvhError::Format {
            offset: 0,
            message: "bad parameter-file magic".into(),
        });
    }
    let ver = u16::from_le_bytes(read_bytes(&buf, &mut off, 2)?.try_into().unwrap());
    if ver != PARAMS_VERSION {
        return Err(AsvhError::Format {
            offset: 4,
            message: format!("unsupported parameter-file version {ver}"),
        });
    }
    let count = read_u32(&buf, &mut off)? as usize;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&buf, &mut off)? as usize;
        let name = String::from_utf8(read_bytes(&buf, &mut off, name_len)?.to_vec())
            .map_err(|_| AsvhError::Format {
                offset: off as u64,
                message: "parameter name is not UTF-8".into(),
            })?;
        let rows = read_u32(&buf, &mut off)? as usize;
        let cols = read_u32(&buf, &mut off)? as usize;
        let data = read_bytes(&buf, &mut off, rows * cols * 8)?;
        let vals: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mat = Mat::from_shape_vec((rows, cols), vals).map_err(|_| AsvhError::Format {
            offset: off as u64,
            message: "parameter shape mismatch".into(),
        })?;
        ps.add(name, mat);
    }
    let model = Model {
        ps,
        gn: meta.gn.clone(),
        hp: meta.hp.clone(),
        net_cfg: meta.net_cfg.clone(),
        sampler_cfg: meta.sampler_cfg.clone(),
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{generate_synthetic, SyntheticSpec};

    fn tiny_cfg() -> (HashNetConfig, SamplerConfig, LossConfig, TrainConfig) {
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
        let train = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        (net, sampler, LossConfig::default(), train)
    }

    fn tiny_data(seed: u64) -> VideoFeatureSet {
        let spec = SyntheticSpec {
            num_classes: 2,
            videos_per_class: 4,
            frames_per_video: 6,
            feature_dim: 8,
            hard_frame_count: 2,
            hard_noise_scale: 1.0,
            base_noise_scale: 0.1,
            temporal_drift_scale: 0.2,
            seed,
        };
        generate_synthetic(&spec).unwrap().0
    }

    fn flat_params(model: &Model, slots: &[usize]) -> Vec<f64> {
        slots
            .iter()
            .flat_map(|&s| model.ps.value(s).iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// The stacked batch graph must compute the same losses as assembling
    /// each view separately from the single-view building blocks.
    #[test]
    fn batch_graph_matches_per_view_assembly() {
        use crate::hashnet::{build_decoder, build_encoder, hash};
        use crate::objectives::view_contrastive_loss;

        let (net, sampler, loss, train) = tiny_cfg();
        let data = tiny_data(11);
        let batch: Vec<usize> = vec![0, 2, 5];
        let model = Model::init(net.clone(), sampler.clone(), 3).unwrap();
        let (stats, _) = compute_batch_grads(
            &model,
            &data,
            &batch,
            1,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .unwrap();

        let m = sampler.drop_count;
        let mut fr_sum = 0.0;
        let mut codes = Mat::zeros((batch.len() * 2, net.code_bits));
        for (v, drop) in stats.drop_indices.iter().enumerate() {
            let vid = batch[v / 2];
            let frames = data.video(vid);
            let keep: Vec<usize> =
                (0..frames.nrows()).filter(|i| !drop.contains(i)).collect();
            let mut tape = Tape::new();
            let fnode = tape.constant(frames.clone());
            let kept = tape.gather_rows(fnode, &keep);
            let (memory, z) = build_encoder(&mut tape, kept, &keep, &model.ps, &model.hp, &net);
            let (_, code) = hash(tape.value(z)).unwrap();
            let recon = build_decoder(&mut tape, memory, &keep, drop, &model.ps, &model.hp, &net);
            let orig = tape.gather_rows(fnode, drop);
            let r = tape.value(recon);
            let o = tape.value(orig);
            fr_sum += (r - o).mapv(|e| e * e).sum();
            for (j, &b) in code.bits.iter().enumerate() {
                codes[[v, j]] = b as f64;
            }
        }
        let fr_expected = fr_sum / (stats.drop_indices.len() as f64 * m as f64);
        assert!(
            (stats.l_fr - fr_expected).abs() < 1e-9,
            "l_fr {} vs per-view {}",
            stats.l_fr,
            fr_expected
        );
        let (vc_expected, _) =
            view_contrastive_loss(&codes, loss.tau1, loss.include_positive_in_denominator)
                .unwrap();
        assert!((stats.l_vc - vc_expected).abs() < 1e-9);
    }

    #[test]
    fn grl_toggle_negates_sampler_deltas_only() {
        let (net, sampler, loss, mut train) = tiny_cfg();
        let data = tiny_data(7);
        let batch: Vec<usize> = (0..4).collect();

        let mut deltas = Vec::new();
        for disable_grl in [false, true] {
            train.disable_grl = disable_grl;
            let mut model = Model::init(net.clone(), sampler.clone(), 3).unwrap();
            let before_s = flat_params(&model, &model.gn.slots());
            let before_h = flat_params(&model, &model.hp.slots());
            let mut opt = OptimizerState::new(&model.ps);
            train_step(
                &mut model,
                &mut opt,
                &data,
                &batch,
                0,
                TrainPhase::Warmup,
                None,
                &loss,
                &train,
            )
            .unwrap();
            let ds: Vec<f64> = flat_params(&model, &model.gn.slots())
                .iter()
                .zip(&before_s)
                .map(|(a, b)| a - b)
                .collect();
            let dh: Vec<f64> = flat_params(&model, &model.hp.slots())
                .iter()
                .zip(&before_h)
                .map(|(a, b)| a - b)
                .collect();
            deltas.push((ds, dh));
        }
        let (with_grl, no_grl) = (&deltas[0], &deltas[1]);
        let max_sampler_dev = with_grl
            .0
            .iter()
            .zip(&no_grl.0)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_sampler_dev < 1e-9, "sampler deltas not negated: {max_sampler_dev}");
        assert!(with_grl.0.iter().any(|d| d.abs() > 0.0), "sampler got no gradient");
        let max_hash_dev = with_grl
            .1
            .iter()
            .zip(&no_grl.1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_hash_dev < 1e-12, "hashnet deltas differ: {max_hash_dev}");
    }

    #[test]
    fn random_sampler_leaves_scoring_network_untouched() {
        let (net, sampler, loss, mut train) = tiny_cfg();
        train.random_sampler = true;
        let data = tiny_data(9);
        let model = Model::init(net, sampler, 1).unwrap();
        let (_, grads) = compute_batch_grads(
            &model,
            &data,
            &[0, 1, 2, 3],
            0,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .unwrap();
        for slot in model.gn.slots() {
            assert!(grads[slot].is_none(), "scoring slot {slot} got a gradient");
        }
        assert!(model.hp.slots().iter().any(|&s| grads[s].is_some()));
    }

    #[test]
    fn warmup_has_exactly_zero_p2set_gradient() {
        let (net, sampler, loss, train) = tiny_cfg();
        let data = tiny_data(5);
        let model = Model::init(net, sampler, 2).unwrap();
        let (stats, _) = compute_batch_grads(
            &model,
            &data,
            &[0, 1, 2, 3],
            0,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .unwrap();
        assert_eq!(stats.beta_grad_norm, 0.0);
        assert_eq!(stats.l_p2set, 0.0);
    }

    #[test]
    fn training_is_deterministic_under_fixed_seed() {
        let (net, sampler, loss, train) = tiny_cfg();
        let cluster = ClusterConfig {
            granularities: vec![2],
            ..ClusterConfig::default()
        };
        let data = tiny_data(11);
        let idx: Vec<usize> = (0..8).collect();
        let run = || {
            run_training(&data, &idx, &net, &sampler, &loss, &cluster, &train, None).unwrap()
        };
        let (a, b) = (run(), run());
        for (la, lb) in a.logs.iter().zip(&b.logs) {
            assert_eq!(la.total, lb.total);
        }
        for s in 0..a.model.ps.len() {
            assert_eq!(a.model.ps.value(s), b.model.ps.value(s));
        }
    }

    #[test]
    fn p2set_joins_after_warmup() {
        let (net, sampler, loss, mut train) = tiny_cfg();
        train.epochs = 3;
        train.warmup_epochs = 1;
        let cluster = ClusterConfig {
            granularities: vec![2],
            ..ClusterConfig::default()
        };
        let data = tiny_data(13);
        let idx: Vec<usize> = (0..8).collect();
        let out =
            run_training(&data, &idx, &net, &sampler, &loss, &cluster, &train, None).unwrap();
        assert_eq!(out.logs[0].beta_grad_norm, 0.0);
        assert_eq!(out.logs[0].phase, TrainPhase::Warmup);
        assert!(out.logs[2].phase == TrainPhase::Full);
        assert!(out.centers.is_some());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let (net, sampler, loss, train) = tiny_cfg();
        let data = tiny_data(3);
        let model = Model::init(net, sampler, 0).unwrap();
        let err = compute_batch_grads(
            &model,
            &data,
            &[0],
            0,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .unwrap_err();
        assert!(matches!(err, AsvhError::Config(_)));
        assert!(TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (net, sampler, loss, train) = tiny_cfg();
        let cluster = ClusterConfig::default();
        let model = Model::init(net, sampler, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let json =
            save_checkpoint(dir.path(), "ckpt", &model, &loss, &cluster, &train, 5).unwrap();
        let (loaded, meta) = load_checkpoint(&json).unwrap();
        assert_eq!(meta.epoch, 5);
        assert_eq!(loaded.ps.len(), model.ps.len());
        for s in 0..model.ps.len() {
            assert_eq!(loaded.ps.value(s), model.ps.value(s));
            assert_eq!(loaded.ps.name(s), model.ps.name(s));
        }
    }

    #[test]
    fn sgd_step_matches_manual_update_rule() {
        let (net, sampler, loss, mut train) = tiny_cfg();
        train.optimizer = OptimizerKind::Sgd;
        train.learning_rate = 0.5;
        let data = tiny_data(21);
        let mut model = Model::init(net, sampler, 8).unwrap();
        let before = model.ps.values.clone();
        let (_, grads) = compute_batch_grads(
            &model,
            &data,
            &[0, 1],
            0,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .unwrap();
        let mut opt = OptimizerState::new(&model.ps);
        opt.step(&mut model.ps, &grads, &train);
        for (slot, g) in grads.iter().enumerate() {
            let expected = match g {
                Some(g) => &before[slot] - &(g * 0.5),
                None => before[slot].clone(),
            };
            let dev = (&expected - model.ps.value(slot))
                .iter()
                .map(|x| x.abs())
                .fold(0.0f64, f64::max);
            assert!(dev < 1e-15, "slot {slot} deviates by {dev}");
        }
    }

    #[test]
    fn nan_in_input_is_reported() {
        let (net, sampler, loss, train) = tiny_cfg();
        let mut data = tiny_data(2);
        data.features[[0, 0, 0]] = f32::NAN;
        let model = Model::init(net, sampler, 0).unwrap();
        let err = compute_batch_grads(
            &model,
            &data,
            &[0, 1],
            0,
            TrainPhase::Warmup,
            None,
            &loss,
            &train,
        )
        .unwrap_err();
        assert!(matches!(err, AsvhError::NonFinite(_)));
    }
}
