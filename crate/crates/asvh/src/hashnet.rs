//! Transformer hashing network: encoder over kept frames, tanh/mean-pool/sign
//! hash layer with straight-through quantization, and a decoder that
//! reconstructs dropped frames from mask tokens.

use crate::error::{AsvhError, Result};
use crate::params::{xavier, zeros, ParamSet};
use crate::tape::{Mat, NodeId, Tape};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HashNetConfig {
    pub code_bits: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
}

impl Default for HashNetConfig {
    fn default() -> Self {
        // Desk-scale defaults sized for single-core CPU training; larger
        // presets are reachable through the config file (model.*).
        HashNetConfig {
            code_bits: 16,
            feature_dim: 32,
            d_model: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            mlp_ratio: 2,
            max_frames: 16,
        }
    }
}

impl HashNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.code_bits == 0 {
            return Err(AsvhError::Config("code_bits must be >= 1".into()));
        }
        if self.d_model % self.attention_heads != 0 {
            return Err(AsvhError::Config(format!(
                "d_model {} not divisible by attention_heads {}",
                self.d_model, self.attention_heads
            )));
        }
        if self.max_frames == 0 || self.feature_dim == 0 {
            return Err(AsvhError::Config("max_frames and feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Slots of one pre-norm transformer block.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BlockParams {
    pub ln1_gain: usize,
    pub ln1_shift: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_shift: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

impl BlockParams {
    fn init(ps: &mut ParamSet, prefix: &str, dm: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BlockParams {
            ln1_gain: ps.add(format!("{prefix}.ln1_gain"), crate::params::ones(1, dm)),
            ln1_shift: ps.add(format!("{prefix}.ln1_shift"), zeros(1, dm)),
            wq: ps.add(format!("{prefix}.wq"), xavier(dm, dm, rng)),
            bq: ps.add(format!("{prefix}.bq"), zeros(1, dm)),
            wk: ps.add(format!("{prefix}.wk"), xavier(dm, dm, rng)),
            bk: ps.add(format!("{prefix}.bk"), zeros(1, dm)),
            wv: ps.add(format!("{prefix}.wv"), xavier(dm, dm, rng)),
            bv: ps.add(format!("{prefix}.bv"), zeros(1, dm)),
            wo: ps.add(format!("{prefix}.wo"), xavier(dm, dm, rng)),
            bo: ps.add(format!("{prefix}.bo"), zeros(1, dm)),
            ln2_gain: ps.add(format!("{prefix}.ln2_gain"), crate::params::ones(1, dm)),
            ln2_shift: ps.add(format!("{prefix}.ln2_shift"), zeros(1, dm)),
            mlp_w1: ps.add(format!("{prefix}.mlp_w1"), xavier(dm, hidden, rng)),
            mlp_b1: ps.add(format!("{prefix}.mlp_b1"), zeros(1, hidden)),
            mlp_w2: ps.add(format!("{prefix}.mlp_w2"), xavier(hidden, dm, rng)),
            mlp_b2: ps.add(format!("{prefix}.mlp_b2"), zeros(1, dm)),
        }
    }

    pub fn slots(&self) -> Vec<usize> {
        vec![
            self.ln1_gain, self.ln1_shift, self.wq, self.bq, self.wk, self.bk, self.wv,
            self.bv, self.wo, self.bo, self.ln2_gain, self.ln2_shift, self.mlp_w1,
            self.mlp_b1, self.mlp_w2, self.mlp_b2,
        ]
    }
}

/// Slots of the full hashing network inside a [`ParamSet`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HashNetParams {
    pub input_proj: usize,
    pub input_bias: usize,
    /// Learned absolute positional embedding, indexed by original frame
    /// position (max_frames × d_model).
    pub pos_embed: usize,
    pub encoder_blocks: Vec<BlockParams>,
    pub z_proj: usize,
    pub z_bias: usize,
    pub mask_token: usize,
    pub dec_pos_embed: usize,
    pub decoder_blocks: Vec<BlockParams>,
    pub head_w: usize,
    pub head_b: usize,
}

impl HashNetParams {
    pub fn init(ps: &mut ParamSet, cfg: &HashNetConfig, rng: &mut impl Rng) -> Self {
        let dm = cfg.d_model;
        let hidden = dm * cfg.mlp_ratio;
        let normal = Normal::new(0.0, 0.02).expect("normal");
        let small = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            Mat::from_shape_fn((rows, cols), |_| normal.sample(rng))
        };
        HashNetParams {
            input_proj: ps.add("net.input_proj", xavier(cfg.feature_dim, dm, rng)),
            input_bias: ps.add("net.input_bias", zeros(1, dm)),
            pos_embed: ps.add("net.pos_embed", small(cfg.max_frames, dm, rng)),
            encoder_blocks: (0..cfg.encoder_layers)
                .map(|i| BlockParams::init(ps, &format!("net.enc{i}"), dm, hidden, rng))
                .collect(),
            z_proj: ps.add("net.z_proj", xavier(dm, cfg.code_bits, rng)),
            z_bias: ps.add("net.z_bias", zeros(1, cfg.code_bits)),
            mask_token: ps.add("net.mask_token", small(1, dm, rng)),
            dec_pos_embed: ps.add("net.dec_pos_embed", small(cfg.max_frames, dm, rng)),
            decoder_blocks: (0..cfg.decoder_layers)
                .map(|i| BlockParams::init(ps, &format!("net.dec{i}"), dm, hidden, rng))
                .collect(),
            head_w: ps.add("net.head_w", xavier(dm, cfg.feature_dim, rng)),
            head_b: ps.add("net.head_b", zeros(1, cfg.feature_dim)),
        }
    }

    pub fn slots(&self) -> Vec<usize> {
        let mut s = vec![
            self.input_proj,
            self.input_bias,
            self.pos_embed,
            self.z_proj,
            self.z_bias,
            self.mask_token,
            self.dec_pos_embed,
            self.head_w,
            self.head_b,
        ];
        for b in self.encoder_blocks.iter().chain(&self.decoder_blocks) {
            s.extend(b.slots());
        }
        s
    }
}

/// Continuous hash surrogate: per-frame tanh codes and their mean pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftHash {
    pub per_frame: Mat,
    pub pooled: Vec<f64>,
}

/// K-bit ±1 code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashCode {
    pub bits: Vec<i8>,
}

impl HashCode {
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

fn linear(tape: &mut Tape, x: NodeId, ps: &ParamSet, w: usize, b: usize) -> NodeId {
    let wn = ps.node(tape, w);
    let bn = ps.node(tape, b);
    let h = tape.matmul(x, wn);
    tape.add_row(h, bn)
}

/// One pre-norm transformer block (multi-head self-attention + GELU MLP).
/// Attention is block-diagonal over consecutive `group`-row segments, so many
/// independent sequences of equal length can share one set of nodes; a single
/// sequence passes its own row count.
pub fn build_block(
    tape: &mut Tape,
    x: NodeId,
    ps: &ParamSet,
    bp: &BlockParams,
    heads: usize,
    group: usize,
) -> NodeId {
    let g1 = ps.node(tape, bp.ln1_gain);
    let s1 = ps.node(tape, bp.ln1_shift);
    let a = tape.layer_norm(x, g1, s1, LN_EPS);

    let q = linear(tape, a, ps, bp.wq, bp.bq);
    let k = linear(tape, a, ps, bp.wk, bp.bk);
    let v = linear(tape, a, ps, bp.wv, bp.bv);

    let dm = tape.value(q).ncols();
    let dh = dm / heads;
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let scores = tape.block_matmul_nt(qh, kh, group, group);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        head_outputs.push(tape.block_matmul_nn(attn, vh, group, group));
    }
    let cat = tape.concat_cols(&head_outputs);
    let attn_out = linear(tape, cat, ps, bp.wo, bp.bo);
    let x = tape.add(x, attn_out);

    let g2 = ps.node(tape, bp.ln2_gain);
    let s2 = ps.node(tape, bp.ln2_shift);
    let b = tape.layer_norm(x, g2, s2, LN_EPS);
    let h = linear(tape, b, ps, bp.mlp_w1, bp.mlp_b1);
    let h = tape.gelu(h);
    let mlp_out = linear(tape, h, ps, bp.mlp_w2, bp.mlp_b2);
    tape.add(x, mlp_out)
}

/// Encoder over kept frames. Returns (memory at d_model, Z at code_bits).
/// Positional embeddings are gathered by original frame index.
pub fn build_encoder(
    tape: &mut Tape,
    kept_frames: NodeId,
    keep_indices: &[usize],
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> (NodeId, NodeId) {
    build_encoder_grouped(tape, kept_frames, keep_indices, keep_indices.len(), ps, hp, cfg)
}

/// Encoder over several stacked views at once. `kept_frames` holds `group`
/// kept rows per view, `keep_positions` the original frame index of every
/// row; attention stays within each view's block.
pub fn build_encoder_grouped(
    tape: &mut Tape,
    kept_frames: NodeId,
    keep_positions: &[usize],
    group: usize,
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> (NodeId, NodeId) {
    let projected = linear(tape, kept_frames, ps, hp.input_proj, hp.input_bias);
    let pos_table = ps.node(tape, hp.pos_embed);
    let pos = tape.gather_rows(pos_table, keep_positions);
    let mut x = tape.add(projected, pos);
    for bp in &hp.encoder_blocks {
        x = build_block(tape, x, ps, bp, cfg.attention_heads, group);
    }
    let z = linear(tape, x, ps, hp.z_proj, hp.z_bias);
    (x, z)
}

/// Hash layer: H = tanh(Z), pooled = mean over frames, bits = sign(pooled)
/// with sign(0) := +1; sign is a straight-through estimator.
pub fn build_hash(tape: &mut Tape, z: NodeId) -> (NodeId, NodeId, NodeId) {
    let rows = tape.value(z).nrows();
    build_hash_grouped(tape, z, rows)
}

/// Hash layer over stacked views: one pooled row and bit row per consecutive
/// `group`-row block of Z.
pub fn build_hash_grouped(tape: &mut Tape, z: NodeId, group: usize) -> (NodeId, NodeId, NodeId) {
    let h = tape.tanh(z);
    let pooled = tape.group_mean_rows(h, group);
    let bits = tape.sign_ste(pooled);
    (h, pooled, bits)
}

/// Decoder: kept memory plus a learned mask token at each dropped position
/// (all in original temporal order), decoder positional embeddings,
/// `decoder_layers` blocks, then a linear head emitting predictions for the
/// dropped positions only, in `drop_indices` order.
pub fn build_decoder(
    tape: &mut Tape,
    memory: NodeId,
    keep_indices: &[usize],
    drop_indices: &[usize],
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> NodeId {
    build_decoder_grouped(
        tape,
        memory,
        std::slice::from_ref(&keep_indices.to_vec()),
        std::slice::from_ref(&drop_indices.to_vec()),
        ps,
        hp,
        cfg,
    )
}

/// Decoder over several stacked views at once. `memory` holds each view's
/// kept rows consecutively; `keeps[v]` / `drops[v]` are that view's frame
/// positions. All views must share the same keep and drop counts. Output is
/// the stacked per-view predictions for dropped positions, in `drops[v]`
/// order.
pub fn build_decoder_grouped(
    tape: &mut Tape,
    memory: NodeId,
    keeps: &[Vec<usize>],
    drops: &[Vec<usize>],
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> NodeId {
    let nv = keeps.len();
    let n_keep = keeps[0].len();
    let n_drop = drops[0].len();
    let m0 = n_keep + n_drop;
    debug_assert!(keeps.iter().all(|k| k.len() == n_keep));
    debug_assert!(drops.iter().all(|d| d.len() == n_drop));

    let mask = ps.node(tape, hp.mask_token);
    let mask_rows = tape.gather_rows(mask, &vec![0; nv * n_drop]);
    let stacked = tape.concat_rows(&[memory, mask_rows]);
    // `stacked` row layout: view v's kept rows at v*n_keep + r, then view v's
    // mask rows at nv*n_keep + v*n_drop + r. Rebuild each view's sequence in
    // original temporal order.
    let mut src = Vec::with_capacity(nv * m0);
    let mut dec_positions = Vec::with_capacity(nv * m0);
    let mut dropped_rows = Vec::with_capacity(nv * n_drop);
    for v in 0..nv {
        let mut src_of_pos = vec![0usize; m0];
        for (r, &pos) in keeps[v].iter().enumerate() {
            src_of_pos[pos] = v * n_keep + r;
        }
        for (r, &pos) in drops[v].iter().enumerate() {
            src_of_pos[pos] = nv * n_keep + v * n_drop + r;
        }
        src.extend_from_slice(&src_of_pos);
        dec_positions.extend(0..m0);
        dropped_rows.extend(drops[v].iter().map(|&pos| v * m0 + pos));
    }
    let seq = tape.gather_rows(stacked, &src);
    let pos_table = ps.node(tape, hp.dec_pos_embed);
    let pos = tape.gather_rows(pos_table, &dec_positions);
    let mut x = tape.add(seq, pos);
    for bp in &hp.decoder_blocks {
        x = build_block(tape, x, ps, bp, cfg.attention_heads, m0);
    }
    let dropped = tape.gather_rows(x, &dropped_rows);
    linear(tape, dropped, ps, hp.head_w, hp.head_b)
}

fn canonicalize(kept_frames: &Mat, keep_indices: &[usize]) -> (Mat, Vec<usize>) {
    let mut order: Vec<usize> = (0..keep_indices.len()).collect();
    order.sort_by_key(|&i| keep_indices[i]);
    let mut frames = Mat::zeros(kept_frames.raw_dim());
    let mut idx = Vec::with_capacity(order.len());
    for (out, &src) in order.iter().enumerate() {
        frames.row_mut(out).assign(&kept_frames.row(src));
        idx.push(keep_indices[src]);
    }
    (frames, idx)
}

/// Plain encoder op: kept frames with their original indices to embeddings Z.
/// Rows are canonicalized to ascending frame order internally.
pub fn encode(
    kept_frames: &Mat,
    keep_indices: &[usize],
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> Result<Mat> {
    if kept_frames.nrows() != keep_indices.len() {
        return Err(AsvhError::Shape(format!(
            "{} frames vs {} indices",
            kept_frames.nrows(),
            keep_indices.len()
        )));
    }
    if kept_frames.nrows() > cfg.max_frames {
        return Err(AsvhError::Shape(format!(
            "{} frames exceed max_frames {}",
            kept_frames.nrows(),
            cfg.max_frames
        )));
    }
    if keep_indices.iter().any(|&i| i >= cfg.max_frames) {
        return Err(AsvhError::Shape("keep index out of positional range".into()));
    }
    let (frames, idx) = canonicalize(kept_frames, keep_indices);
    let mut tape = Tape::new();
    let x = tape.constant(frames);
    let (_, z) = build_encoder(&mut tape, x, &idx, ps, hp, cfg);
    Ok(tape.value(z).clone())
}

/// Plain hash op over embeddings Z.
pub fn hash(z: &Mat) -> Result<(SoftHash, HashCode)> {
    if z.nrows() == 0 {
        return Err(AsvhError::Contract("hash() needs at least one frame".into()));
    }
    let h = z.mapv(f64::tanh);
    let n = h.nrows() as f64;
    let pooled: Vec<f64> = h.sum_axis(ndarray::Axis(0)).iter().map(|v| v / n).collect();
    let bits: Vec<i8> = pooled.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    Ok((SoftHash { per_frame: h, pooled }, HashCode { bits }))
}

/// Plain reconstruction op for dropped positions.
pub fn reconstruct(
    memory: &Mat,
    keep_indices: &[usize],
    drop_indices: &[usize],
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> Result<Mat> {
    let keep: std::collections::HashSet<usize> = keep_indices.iter().copied().collect();
    if drop_indices.iter().any(|i| keep.contains(i)) {
        return Err(AsvhError::Contract("drop and keep indices overlap".into()));
    }
    let mut tape = Tape::new();
    let mem = tape.constant(memory.clone());
    let r = build_decoder(&mut tape, mem, keep_indices, drop_indices, ps, hp, cfg);
    Ok(tape.value(r).clone())
}

/// Full-view encoding of one video (no dropping): returns (pooled soft hash,
/// bits, mean encoder memory row). Used for center refreshes and retrieval.
pub fn encode_full_view(
    frames: &Mat,
    ps: &ParamSet,
    hp: &HashNetParams,
    cfg: &HashNetConfig,
) -> Result<(Vec<f64>, HashCode, Vec<f64>)> {
    let all: Vec<usize> = (0..frames.nrows()).collect();
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone());
    let (memory, z) = build_encoder(&mut tape, x, &all, ps, hp, cfg);
    let (soft, code) = hash(tape.value(z))?;
    let mem = tape.value(memory);
    let n = mem.nrows() as f64;
    let mem_mean: Vec<f64> = mem
        .sum_axis(ndarray::Axis(0))
        .iter()
        .map(|v| v / n)
        .collect();
    Ok((soft.pooled, code, mem_mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_diff, seeded_mat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HashNetConfig {
        HashNetConfig {
            code_bits: 4,
            feature_dim: 3,
            d_model: 8,
            encoder_layers: 2,
            decoder_layers: 1,
            attention_heads: 2,
            mlp_ratio: 4,
            max_frames: 6,
        }
    }

    fn init(cfg: &HashNetConfig, seed: u64) -> (ParamSet, HashNetParams) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hp = HashNetParams::init(&mut ps, cfg, &mut rng);
        (ps, hp)
    }

    #[test]
    fn encode_output_shape() {
        let cfg = small_cfg();
        let (ps, hp) = init(&cfg, 1);
        let frames = seeded_mat(4, 3, 2);
        let z = encode(&frames, &[0, 2, 3, 5], &ps, &hp, &cfg).unwrap();
        assert_eq!(z.dim(), (4, 4));
    }

    #[test]
    fn encode_canonicalizes_index_order() {
        let cfg = small_cfg();
        let (ps, hp) = init(&cfg, 1);
        let frames = seeded_mat(3, 3, 2);
        let z1 = encode(&frames, &[0, 2, 4], &ps, &hp, &cfg).unwrap();
        // Permute rows together with indices.
        let mut permuted = Mat::zeros((3, 3));
        permuted.row_mut(0).assign(&frames.row(2));
        permuted.row_mut(1).assign(&frames.row(0));
        permuted.row_mut(2).assign(&frames.row(1));
        let z2 = encode(&permuted, &[4, 0, 2], &ps, &hp, &cfg).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn too_many_frames_is_shape_error() {
        let cfg = small_cfg();
        let (ps, hp) = init(&cfg, 1);
        let frames = seeded_mat(7, 3, 2);
        let idx: Vec<usize> = (0..7).collect();
        assert!(matches!(
            encode(&frames, &idx, &ps, &hp, &cfg),
            Err(AsvhError::Shape(_))
        ));
    }

    /// With residual branches zeroed and identity projections at
    /// D = d_model = K, Z reduces to input + positional embedding.
    #[test]
    fn degenerate_encoder_matches_hand_built_oracle() {
        let cfg = HashNetConfig {
            code_bits: 4,
            feature_dim: 4,
            d_model: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 1,
            mlp_ratio: 2,
            max_frames: 5,
        };
        let (mut ps, hp) = init(&cfg, 3);
        let eye = Mat::eye(4);
        ps.values[hp.input_proj] = eye.clone();
        ps.values[hp.input_bias] = Mat::zeros((1, 4));
        ps.values[hp.z_proj] = eye;
        ps.values[hp.z_bias] = Mat::zeros((1, 4));
        let b = &hp.encoder_blocks[0];
        ps.values[b.wo] = Mat::zeros((4, 4));
        ps.values[b.bo] = Mat::zeros((1, 4));
        ps.values[b.mlp_w2] = Mat::zeros((8, 4));
        ps.values[b.mlp_b2] = Mat::zeros((1, 4));

        let frames = seeded_mat(3, 4, 4);
        let keep = [1usize, 2, 4];
        let z = encode(&frames, &keep, &ps, &hp, &cfg).unwrap();
        let pos = ps.value(hp.pos_embed).clone();
        for (r, &k) in keep.iter().enumerate() {
            for j in 0..4 {
                let expected = frames[[r, j]] + pos[[k, j]];
                assert!((z[[r, j]] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hash_saturation_and_tie_rule() {
        let z = Mat::from_elem((2, 3), 50.0);
        let (_, code) = hash(&z).unwrap();
        assert_eq!(code.bits, vec![1, 1, 1]);

        let mut z = Mat::zeros((2, 2));
        z[[0, 0]] = 1.0;
        z[[1, 0]] = -1.0; // pooled component 0 is exactly 0 -> +1 by tie rule
        z[[0, 1]] = -3.0;
        z[[1, 1]] = -3.0;
        let (soft, code) = hash(&z).unwrap();
        assert!(soft.pooled[0].abs() < 1e-15);
        assert_eq!(code.bits, vec![1, -1]);
    }

    #[test]
    fn hash_matches_scalar_oracle() {
        let z = seeded_mat(3, 4, 8);
        let (soft, code) = hash(&z).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((soft.per_frame[[i, j]] - z[[i, j]].tanh()).abs() < 1e-12);
            }
        }
        for j in 0..4 {
            let mean = (0..3).map(|i| z[[i, j]].tanh()).sum::<f64>() / 3.0;
            assert!((soft.pooled[j] - mean).abs() < 1e-12);
            assert_eq!(code.bits[j], if mean >= 0.0 { 1 } else { -1 });
        }
    }

    #[test]
    fn hash_empty_frame_set_is_contract_violation() {
        let z = Mat::zeros((0, 4));
        assert!(matches!(hash(&z), Err(AsvhError::Contract(_))));
    }

    #[test]
    fn hash_is_invariant_to_frame_order() {
        let z = seeded_mat(4, 3, 9);
        let mut rev = Mat::zeros((4, 3));
        for i in 0..4 {
            rev.row_mut(i).assign(&z.row(3 - i));
        }
        let (s1, c1) = hash(&z).unwrap();
        let (s2, c2) = hash(&rev).unwrap();
        // summation order differs, so only bit-level agreement is exact
        for (a, b) in s1.pooled.iter().zip(&s2.pooled) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c1, c2);
    }

    #[test]
    fn reconstruct_single_dropped_frame_shape() {
        let cfg = small_cfg();
        let (ps, hp) = init(&cfg, 5);
        let memory = seeded_mat(5, 8, 6);
        let r = reconstruct(&memory, &[0, 1, 2, 4, 5], &[3], &ps, &hp, &cfg).unwrap();
        assert_eq!(r.dim(), (1, 3));
    }

    #[test]
    fn overlapping_drop_and_keep_is_contract_violation() {
        let cfg = small_cfg();
        let (ps, hp) = init(&cfg, 5);
        let memory = seeded_mat(2, 8, 6);
        assert!(matches!(
            reconstruct(&memory, &[0, 1], &[1], &ps, &hp, &cfg),
            Err(AsvhError::Contract(_))
        ));
    }

    #[test]
    fn zeroed_mask_and_head_make_predictions_content_independent() {
        let cfg = small_cfg();
        let (mut ps, hp) = init(&cfg, 7);
        ps.values[hp.mask_token] = Mat::zeros((1, 8));
        ps.values[hp.head_w] = Mat::zeros((8, 3));
        ps.values[hp.head_b] = Mat::zeros((1, 3));
        let m1 = seeded_mat(3, 8, 10);
        let m2 = seeded_mat(3, 8, 11);
        let r1 = reconstruct(&m1, &[0, 1, 2], &[3, 4], &ps, &hp, &cfg).unwrap();
        let r2 = reconstruct(&m2, &[0, 1, 2], &[3, 4], &ps, &hp, &cfg).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        // d ||decoder(encoder(x))||^2 / dx on a 2-frame toy.
        let cfg = HashNetConfig {
            code_bits: 3,
            feature_dim: 2,
            d_model: 4,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            mlp_ratio: 2,
            max_frames: 4,
        };
        let (ps, hp) = init(&cfg, 12);
        let keep = [0usize, 2];
        let drop = [1usize, 3];
        let eval = |x: &Mat, want_grad: bool| -> (f64, Option<Mat>) {
            let mut tape = Tape::new();
            let xn = tape.param(0, x.clone());
            let (mem, _z) = build_encoder(&mut tape, xn, &keep, &ps, &hp, &cfg);
            let r = build_decoder(&mut tape, mem, &keep, &drop, &ps, &hp, &cfg);
            let sq = tape.mul(r, r);
            let s = tape.sum_all(sq);
            let loss = tape.value(s)[[0, 0]];
            if want_grad {
                let grads = tape.backward(&[(s, Mat::from_elem((1, 1), 1.0))]);
                (loss, Some(grads.node(xn).unwrap().clone()))
            } else {
                (loss, None)
            }
        };
        let x = seeded_mat(2, 2, 13);
        let (_, g) = eval(&x, true);
        let g = g.unwrap();
        let fd = finite_diff(&x, |xp| eval(xp, false).0, 1e-6);
        for (a, b) in g.iter().zip(fd.iter()) {
            let rel = (a - b).abs() / (1e-8 + a.abs().max(b.abs()));
            assert!(rel < 1e-4, "rel err {rel}");
        }
    }

    #[test]
    fn forward_is_finite_for_extreme_inputs() {
        let cfg = small_cfg();
        let (ps, hp) = init(&cfg, 20);
        for scale in [1e3, -1e3] {
            let frames = Mat::from_elem((4, 3), scale);
            let z = encode(&frames, &[0, 1, 2, 3], &ps, &hp, &cfg).unwrap();
            assert!(z.iter().all(|v| v.is_finite()));
            let (soft, _) = hash(&z).unwrap();
            assert!(soft.pooled.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn ste_passes_pooled_gradient_through_sign() {
        // dL/dpooled through the quantizer equals dL/dbits delivered downstream.
        let z = seeded_mat(3, 4, 21);
        let downstream = seeded_mat(1, 4, 22);
        let grad_with_sign = {
            let mut tape = Tape::new();
            let zn = tape.param(0, z.clone());
            let (_h, pooled, bits) = build_hash(&mut tape, zn);
            let _ = pooled;
            let grads = tape.backward(&[(bits, downstream.clone())]);
            grads.node(zn).unwrap().clone()
        };
        let grad_without_sign = {
            let mut tape = Tape::new();
            let zn = tape.param(0, z.clone());
            let h = tape.tanh(zn);
            let pooled = tape.mean_rows(h);
            let grads = tape.backward(&[(pooled, downstream.clone())]);
            grads.node(zn).unwrap().clone()
        };
        assert_eq!(grad_with_sign, grad_without_sign);
    }
}
