//! Dataset representation, binary container IO, splits, and a synthetic
//! generator producing cluster-structured frame sequences with planted
//! hard (high-noise) frames.
//!
//! Container layout (`.asvh`): magic `ASVH` | u16 version=1 | u8 dtype=0 (f32)
//! | u8 reserved=0 | u32 N | u32 M0 | u32 D | N·M0·D little-endian f32.
//! Labels (`.asvl`): magic `ASVL` | u16 version=1 | u32 N | u32 num_classes
//! | N × u32. Labels live in a separate file so training never reads them.

use crate::error::{AsvhError, Result};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// N videos × M0 frames × D-dim real features, with optional labels used
/// only at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatureSet {
    pub features: Array3<f32>,
    pub labels: Option<Vec<u32>>,
}

impl VideoFeatureSet {
    pub fn num_videos(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn frames_per_video(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }

    /// One video's frames as an M0×D f64 matrix.
    pub fn video(&self, i: usize) -> crate::tape::Mat {
        let v = self.features.index_axis(ndarray::Axis(0), i);
        v.mapv(|x| x as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(AsvhError::Contract(
                "feature set contains non-finite values".into(),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.num_videos() {
                return Err(AsvhError::Contract(format!(
                    "label count {} != video count {}",
                    labels.len(),
                    self.num_videos()
                )));
            }
        }
        Ok(())
    }
}

/// Index lists into a [`VideoFeatureSet`]. Query and gallery are disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self, num_videos: usize) -> Result<()> {
        for (name, idx) in [
            ("train", &self.train_indices),
            ("query", &self.query_indices),
            ("gallery", &self.gallery_indices),
        ] {
            if let Some(&bad) = idx.iter().find(|&&i| i >= num_videos) {
                return Err(AsvhError::Contract(format!(
                    "{name} index {bad} out of range (N={num_videos})"
                )));
            }
        }
        let gallery: std::collections::HashSet<_> = self.gallery_indices.iter().collect();
        if self.query_indices.iter().any(|i| gallery.contains(i)) {
            return Err(AsvhError::Contract(
                "query and gallery indices overlap".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of the synthetic cluster-structured generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub hard_frame_count: usize,
    pub hard_noise_scale: f64,
    pub base_noise_scale: f64,
    pub temporal_drift_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0
            || self.videos_per_class == 0
            || self.frames_per_video == 0
            || self.feature_dim == 0
        {
            return Err(AsvhError::Config("synthetic spec dimensions must be positive".into()));
        }
        if self.hard_frame_count >= self.frames_per_video {
            return Err(AsvhError::Config(format!(
                "hard_frame_count {} must be < frames_per_video {}",
                self.hard_frame_count, self.frames_per_video
            )));
        }
        if self.hard_noise_scale < 0.0
            || self.base_noise_scale < 0.0
            || self.temporal_drift_scale < 0.0
        {
            return Err(AsvhError::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Each video is a class prototype plus a smooth temporal drift plus
/// per-frame Gaussian noise; `hard_frame_count` frames per video receive
/// noise at `hard_noise_scale` instead of `base_noise_scale`. Returns the
/// planted hard-frame index set per video. Deterministic under `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(VideoFeatureSet, Vec<Vec<usize>>)> {
    spec.validate()?;
    let n = spec.num_classes * spec.videos_per_class;
    let (m0, d) = (spec.frames_per_video, spec.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    // Class prototypes: well separated in expectation at scale sqrt(D).
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..d).map(|_| 2.0 * unit.sample(&mut rng)).collect())
        .collect();

    let mut features = Array3::<f32>::zeros((n, m0, d));
    let mut labels = Vec::with_capacity(n);
    let mut hard_sets = Vec::with_capacity(n);

    for class in 0..spec.num_classes {
        for _ in 0..spec.videos_per_class {
            let vid = labels.len();
            labels.push(class as u32);

            let mut hard: Vec<usize> = rand::seq::index::sample(&mut rng, m0, spec.hard_frame_count).into_vec();
            hard.sort_unstable();

            // Smooth drift: random walk in feature space, scaled per step.
            let mut drift = vec![0.0f64; d];
            for frame in 0..m0 {
                for j in 0..d {
                    drift[j] += spec.temporal_drift_scale * unit.sample(&mut rng) / (m0 as f64).sqrt();
                }
                let scale = if hard.binary_search(&frame).is_ok() {
                    spec.hard_noise_scale
                } else {
                    spec.base_noise_scale
                };
                for j in 0..d {
                    let v = prototypes[class][j] + drift[j] + scale * unit.sample(&mut rng);
                    features[[vid, frame, j]] = v as f32;
                }
            }
            hard_sets.push(hard);
        }
    }

    Ok((
        VideoFeatureSet {
            features,
            labels: Some(labels),
        },
        hard_sets,
    ))
}

const FEATURE_MAGIC: &[u8; 4] = b"ASVH";
const LABEL_MAGIC: &[u8; 4] = b"ASVL";
const VERSION: u16 = 1;

fn format_err(offset: u64, message: impl Into<String>) -> AsvhError {
    AsvhError::Format {
        offset,
        message: message.into(),
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| format_err(offset, format!("truncated while reading {what}")))
}

/// Write the feature container (labels are not written; see
/// [`write_labels`]).
pub fn write_container(set: &VideoFeatureSet, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[0u8, 0u8])?; // dtype=0 (f32), reserved
    let (n, m0, d) = (
        set.num_videos() as u32,
        set.frames_per_video() as u32,
        set.feature_dim() as u32,
    );
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&m0.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for v in set.features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a feature container written by [`write_container`]. Labels are left
/// `None`; load them separately with [`read_labels`].
pub fn read_container(path: &Path) -> Result<VideoFeatureSet> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, 0, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected ASVH")));
    }
    let mut b2 = [0u8; 2];
    read_exact_at(&mut r, &mut b2, 4, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let mut b1 = [0u8; 1];
    read_exact_at(&mut r, &mut b1, 6, "dtype")?;
    if b1[0] != 0 {
        return Err(format_err(6, format!("unsupported dtype {}", b1[0])));
    }
    read_exact_at(&mut r, &mut b1, 7, "reserved")?;
    let mut b4 = [0u8; 4];
    read_exact_at(&mut r, &mut b4, 8, "N")?;
    let n = u32::from_le_bytes(b4) as usize;
    read_exact_at(&mut r, &mut b4, 12, "M0")?;
    let m0 = u32::from_le_bytes(b4) as usize;
    read_exact_at(&mut r, &mut b4, 16, "D")?;
    let d = u32::from_le_bytes(b4) as usize;
    let total = n
        .checked_mul(m0)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| format_err(8, "dimension overflow"))?;
    let mut data = Vec::with_capacity(total);
    let mut buf = [0u8; 4];
    for i in 0..total {
        read_exact_at(&mut r, &mut buf, 20 + 4 * i as u64, "payload")?;
        data.push(f32::from_le_bytes(buf));
    }
    let features = Array3::from_shape_vec((n, m0, d), data)
        .map_err(|e| format_err(20, format!("shape error: {e}")))?;
    Ok(VideoFeatureSet {
        features,
        labels: None,
    })
}

pub fn write_labels(labels: &[u32], num_classes: u32, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    w.write_all(&num_classes.to_le_bytes())?;
    for l in labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(Vec<u32>, u32)> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, 0, "magic")?;
    if &magic != LABEL_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected ASVL")));
    }
    let mut b2 = [0u8; 2];
    read_exact_at(&mut r, &mut b2, 4, "version")?;
    if u16::from_le_bytes(b2) != VERSION {
        return Err(format_err(4, "unsupported version"));
    }
    let mut b4 = [0u8; 4];
    read_exact_at(&mut r, &mut b4, 6, "N")?;
    let n = u32::from_le_bytes(b4) as usize;
    read_exact_at(&mut r, &mut b4, 10, "num_classes")?;
    let num_classes = u32::from_le_bytes(b4);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        read_exact_at(&mut r, &mut b4, 14 + 4 * i as u64, "labels")?;
        let l = u32::from_le_bytes(b4);
        if num_classes > 0 && l >= num_classes {
            return Err(format_err(
                14 + 4 * i as u64,
                format!("label {l} out of range [0, {num_classes})"),
            ));
        }
        labels.push(l);
    }
    Ok((labels, num_classes))
}

/// Split file: three lines "train:", "query:", "gallery:", each followed by
/// comma-separated indices on the same line.
pub fn write_split(split: &SplitSpec, path: &Path) -> Result<()> {
    let fmt = |v: &[usize]| {
        v.iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let text = format!(
        "train:{}\nquery:{}\ngallery:{}\n",
        fmt(&split.train_indices),
        fmt(&split.query_indices),
        fmt(&split.gallery_indices)
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path)?;
    let mut train = None;
    let mut query = None;
    let mut gallery = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| format_err(0, format!("split line missing ':' — {line}")))?;
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|_| format_err(0, format!("bad index '{t}'")))
                })
                .collect()
        };
        match key.trim() {
            "train" => train = Some(parse(rest)?),
            "query" => query = Some(parse(rest)?),
            "gallery" => gallery = Some(parse(rest)?),
            other => return Err(format_err(0, format!("unknown split section '{other}'"))),
        }
    }
    Ok(SplitSpec {
        train_indices: train.ok_or_else(|| format_err(0, "missing train section"))?,
        query_indices: query.ok_or_else(|| format_err(0, "missing query section"))?,
        gallery_indices: gallery.ok_or_else(|| format_err(0, "missing gallery section"))?,
    })
}
