//! KITTI odometry ingestion and sample construction: central crop plus
//! bilinear downscale to 128x96, horizontal-mirror augmentation,
//! consecutive-pair labels from ground-truth poses, an on-disk
//! preprocessed format, and shuffled batch iteration.

use crate::geometry::{
    mirror_transform, pose_to_label, relative_transform, GeometryError, MotionLabel, Pose,
};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const FRAME_HEIGHT: usize = 96;
pub const FRAME_WIDTH: usize = 128;
/// The two frames of a pair are stacked as input channels.
pub const PAIR_CHANNELS: usize = 2;

/// Central crop region applied to raw KITTI images before scaling.
pub const CROP_WIDTH: usize = 500;
pub const CROP_HEIGHT: usize = 375;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("raw image {axis} {got} is below the minimum {min}")]
    Undersized {
        axis: &'static str,
        got: usize,
        min: usize,
    },
    #[error("frame list ({frames}) and pose list ({poses}) lengths differ")]
    LengthMismatch { frames: usize, poses: usize },
    #[error("need at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("empty dataset")]
    Empty,
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("pose file {path}: {reason}")]
    PoseFile { path: PathBuf, reason: String },
    #[error("calib file {path}: {reason}")]
    CalibFile { path: PathBuf, reason: String },
    #[error("index file {path} line {line}: {reason}")]
    IndexFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters; only triangulation needs it.
    pub baseline: Option<f64>,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(DatasetError::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Intrinsics valid for preprocessed frames: the central crop shifts
    /// the principal point, the downscale multiplies focals and principal
    /// point by the scale factors.
    pub fn for_preprocessed(&self, raw_width: usize, raw_height: usize) -> CameraIntrinsics {
        let x0 = ((raw_width - CROP_WIDTH) / 2) as f64;
        let y0 = ((raw_height - CROP_HEIGHT) / 2) as f64;
        let sx = FRAME_WIDTH as f64 / CROP_WIDTH as f64;
        let sy = FRAME_HEIGHT as f64 / CROP_HEIGHT as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx - x0 + 0.5) * sx - 0.5,
            cy: (self.cy - y0 + 0.5) * sy - 0.5,
            baseline: self.baseline,
        }
    }
}

/// One preprocessed grayscale frame with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// (96, 128) intensities.
    pub pixels: Array2<u8>,
    pub source_sequence: String,
    pub source_index: usize,
    pub mirrored: bool,
}

impl Frame {
    pub fn from_pixels(
        pixels: Array2<u8>,
        source_sequence: &str,
        source_index: usize,
        mirrored: bool,
    ) -> Self {
        assert_eq!(pixels.dim(), (FRAME_HEIGHT, FRAME_WIDTH));
        Frame {
            pixels,
            source_sequence: source_sequence.to_string(),
            source_index,
            mirrored,
        }
    }

    /// Canonical on-disk file stem, e.g. `00_000042_o`.
    pub fn file_stem(&self) -> String {
        format!(
            "{}_{:06}_{}",
            self.source_sequence,
            self.source_index,
            if self.mirrored { "m" } else { "o" }
        )
    }
}

/// Normalized triangle-filter weights for one output index of a resize
/// from `src_len` to `dst_len`. The filter support scales with the
/// downscale factor so no source pixel is skipped.
fn triangle_weights(dst_len: usize, src_len: usize, i: usize) -> (usize, Vec<f64>) {
    let scale = src_len as f64 / dst_len as f64;
    let support = scale.max(1.0);
    let center = (i as f64 + 0.5) * scale - 0.5;
    let lo = ((center - support).ceil().max(0.0)) as usize;
    let hi = ((center + support).floor() as usize).min(src_len - 1);
    let mut w: Vec<f64> = (lo..=hi)
        .map(|k| (1.0 - (k as f64 - center).abs() / support).max(0.0))
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    (lo, w)
}

/// Central 500x375 crop (floor offsets) followed by a bilinear resize to
/// 128x96.
pub fn preprocess_image(
    raw: &Array2<u8>,
    source_sequence: &str,
    source_index: usize,
) -> Result<Frame, DatasetError> {
    let (h, w) = raw.dim();
    if w < CROP_WIDTH {
        return Err(DatasetError::Undersized {
            axis: "width",
            got: w,
            min: CROP_WIDTH,
        });
    }
    if h < CROP_HEIGHT {
        return Err(DatasetError::Undersized {
            axis: "height",
            got: h,
            min: CROP_HEIGHT,
        });
    }
    let x0 = (w - CROP_WIDTH) / 2;
    let y0 = (h - CROP_HEIGHT) / 2;

    // Separable resize of the cropped region: rows first, then columns.
    let row_w: Vec<(usize, Vec<f64>)> = (0..FRAME_HEIGHT)
        .map(|i| triangle_weights(FRAME_HEIGHT, CROP_HEIGHT, i))
        .collect();
    let col_w: Vec<(usize, Vec<f64>)> = (0..FRAME_WIDTH)
        .map(|j| triangle_weights(FRAME_WIDTH, CROP_WIDTH, j))
        .collect();
    let mut rows_done = Array2::<f64>::zeros((FRAME_HEIGHT, CROP_WIDTH));
    for i in 0..FRAME_HEIGHT {
        let (lo, wts) = &row_w[i];
        for c in 0..CROP_WIDTH {
            let mut acc = 0.0;
            for (k, wk) in wts.iter().enumerate() {
                acc += wk * raw[(y0 + lo + k, x0 + c)] as f64;
            }
            rows_done[(i, c)] = acc;
        }
    }
    let pixels = Array2::from_shape_fn((FRAME_HEIGHT, FRAME_WIDTH), |(i, j)| {
        let (lo, wts) = &col_w[j];
        let mut acc = 0.0;
        for (k, wk) in wts.iter().enumerate() {
            acc += wk * rows_done[(i, lo + k)];
        }
        acc.round().clamp(0.0, 255.0) as u8
    });
    Ok(Frame::from_pixels(pixels, source_sequence, source_index, false))
}

/// Horizontal flip; toggles the mirrored flag.
pub fn mirror_image(f: &Frame) -> Frame {
    let (h, w) = f.pixels.dim();
    let pixels = Array2::from_shape_fn((h, w), |(i, j)| f.pixels[(i, w - 1 - j)]);
    Frame {
        pixels,
        source_sequence: f.source_sequence.clone(),
        source_index: f.source_index,
        mirrored: !f.mirrored,
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub pair: (Frame, Frame),
    pub label: MotionLabel,
}

/// Builds the stride-1 sliding window of consecutive pairs. Labels are
/// relative transforms between the paired camera poses; for mirrored
/// frames the relative transform is conjugated by the mirror matrix.
pub fn build_pairs(frames: &[Frame], poses: &[Pose]) -> Result<Vec<TrainingSample>, DatasetError> {
    if frames.len() != poses.len() {
        return Err(DatasetError::LengthMismatch {
            frames: frames.len(),
            poses: poses.len(),
        });
    }
    if frames.len() < 2 {
        return Err(DatasetError::TooShort(frames.len()));
    }
    let mut out = Vec::with_capacity(frames.len() - 1);
    for i in 0..frames.len() - 1 {
        let mut rel = relative_transform(&poses[i], &poses[i + 1])?;
        if frames[i].mirrored {
            rel = mirror_transform(&rel);
        }
        out.push(TrainingSample {
            pair: (frames[i].clone(), frames[i + 1].clone()),
            label: pose_to_label(&rel),
        });
    }
    Ok(out)
}

/// Infinite stream of shuffled index batches; reshuffles each epoch, drops
/// the final short batch.
pub struct BatchIterator {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64) -> Result<Self, DatasetError> {
        if n_samples == 0 {
            return Err(DatasetError::Empty);
        }
        assert!(batch_size >= 1);
        let mut it = BatchIterator {
            order: (0..n_samples).collect(),
            pos: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        it.order.shuffle(&mut it.rng);
        Ok(it)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            // A batch larger than the dataset can never fill.
            if self.batch_size > self.order.len() {
                return None;
            }
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(b)
    }
}

/// Maps 8-bit intensity to the network range [-1, 1].
pub fn intensity_to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Stacks the selected pairs into an (N, 2, 96, 128) tensor in [-1, 1]
/// with their labels.
pub fn batch_tensor(
    samples: &[TrainingSample],
    indices: &[usize],
) -> (Array4<f64>, Vec<MotionLabel>) {
    let n = indices.len();
    let mut x = Array4::zeros((n, PAIR_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH));
    let mut labels = Vec::with_capacity(n);
    for (bi, &si) in indices.iter().enumerate() {
        let s = &samples[si];
        for (c, frame) in [(0, &s.pair.0), (1, &s.pair.1)] {
            for i in 0..FRAME_HEIGHT {
                for j in 0..FRAME_WIDTH {
                    x[(bi, c, i, j)] = intensity_to_unit(frame.pixels[(i, j)]);
                }
            }
        }
        labels.push(s.label);
    }
    (x, labels)
}

/// Distinct source sequences in a sample set, for hold-out checks.
pub fn sequences_present(samples: &[TrainingSample]) -> BTreeSet<(String, bool)> {
    samples
        .iter()
        .flat_map(|s| [&s.pair.0, &s.pair.1])
        .map(|f| (f.source_sequence.clone(), f.mirrored))
        .collect()
}

// ---------------------------------------------------------------------------
// KITTI odometry layout

/// Parses `poses/<NN>.txt`: one row-major 3x4 camera-to-world matrix per
/// line.
pub fn load_kitti_poses(path: &Path) -> Result<Vec<Pose>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    parse_kitti_poses(&text).map_err(|reason| DatasetError::PoseFile {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn parse_kitti_poses(text: &str) -> Result<Vec<Pose>, String> {
    let mut poses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", ln + 1))?;
        if vals.len() != 12 {
            return Err(format!("line {}: expected 12 values, got {}", ln + 1, vals.len()));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], //
            vals[4], vals[5], vals[6], //
            vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        poses.push(Pose::new(rotation, translation));
    }
    Ok(poses)
}

/// Parses `calib.txt` projection rows. `P0` is the left gray camera; `P1`,
/// if present, supplies the stereo baseline through its -fx*b entry.
pub fn load_kitti_calib(path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    parse_kitti_calib(&text).map_err(|reason| DatasetError::CalibFile {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn parse_kitti_calib(text: &str) -> Result<CameraIntrinsics, String> {
    let mut p0: Option<Vec<f64>> = None;
    let mut p1: Option<Vec<f64>> = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        if key != "P0" && key != "P1" {
            continue;
        }
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("{key}: {e}"))?;
        if vals.len() != 12 {
            return Err(format!("{key}: expected 12 values, got {}", vals.len()));
        }
        match key {
            "P0" => p0 = Some(vals),
            _ => p1 = Some(vals),
        }
    }
    let p0 = p0.ok_or("missing P0 row")?;
    let fx = p0[0];
    if fx <= 0.0 {
        return Err(format!("non-positive fx {fx}"));
    }
    let baseline = p1.map(|p| -p[3] / fx);
    Ok(CameraIntrinsics {
        fx,
        fy: p0[5],
        cx: p0[2],
        cy: p0[6],
        baseline,
    })
}

pub fn load_gray_png(path: &Path) -> Result<Array2<u8>, DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0]
    }))
}

pub fn save_gray_png(path: &Path, pixels: &Array2<u8>) -> Result<(), DatasetError> {
    let (h, w) = pixels.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([pixels[(y as usize, x as usize)]])
    });
    img.save(path).map_err(|e| DatasetError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub struct KittiSequence {
    pub frames: Vec<Frame>,
    pub poses: Vec<Pose>,
    /// Intrinsics already rescaled for the preprocessed frame size.
    pub intrinsics: CameraIntrinsics,
}

/// Loads and preprocesses `sequences/<seq>/image_0/*.png` with its pose
/// and calibration files.
pub fn load_kitti_sequence(root: &Path, seq: &str) -> Result<KittiSequence, DatasetError> {
    let seq_dir = root.join("sequences").join(seq);
    let image_dir = seq_dir.join("image_0");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    names.sort();
    let mut frames = Vec::with_capacity(names.len());
    let mut raw_dims = (0usize, 0usize);
    for (i, path) in names.iter().enumerate() {
        let raw = load_gray_png(path)?;
        raw_dims = raw.dim();
        frames.push(preprocess_image(&raw, seq, i)?);
    }
    if frames.is_empty() {
        return Err(DatasetError::Empty);
    }
    let poses = load_kitti_poses(&root.join("poses").join(format!("{seq}.txt")))?;
    if poses.len() != frames.len() {
        return Err(DatasetError::LengthMismatch {
            frames: frames.len(),
            poses: poses.len(),
        });
    }
    let raw_cal = load_kitti_calib(&seq_dir.join("calib.txt"))?;
    raw_cal.validate()?;
    Ok(KittiSequence {
        frames,
        poses,
        intrinsics: raw_cal.for_preprocessed(raw_dims.1, raw_dims.0),
    })
}

// ---------------------------------------------------------------------------
// Preprocessed on-disk format

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    a: String,
    b: String,
    x: [f64; 3],
    q: [f64; 4],
    seq: String,
    mirrored: bool,
}

/// Writes `frames/<seq>_<index>_<m|o>.png` plus `index.jsonl`, one record
/// per pair.
pub fn write_preprocessed(dir: &Path, samples: &[TrainingSample]) -> Result<(), DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let mut written: BTreeSet<String> = BTreeSet::new();
    let index_path = dir.join("index.jsonl");
    let mut index = std::io::BufWriter::new(std::fs::File::create(&index_path)?);
    for s in samples {
        for frame in [&s.pair.0, &s.pair.1] {
            let stem = frame.file_stem();
            if written.insert(stem.clone()) {
                save_gray_png(&frames_dir.join(format!("{stem}.png")), &frame.pixels)?;
            }
        }
        let rec = IndexRecord {
            a: format!("frames/{}.png", s.pair.0.file_stem()),
            b: format!("frames/{}.png", s.pair.1.file_stem()),
            x: [s.label.x.x, s.label.x.y, s.label.x.z],
            q: s.label.q.as_array(),
            seq: s.pair.0.source_sequence.clone(),
            mirrored: s.pair.0.mirrored,
        };
        serde_json::to_writer(&mut index, &rec)
            .map_err(|e| DatasetError::Io(std::io::Error::other(e)))?;
        index.write_all(b"\n")?;
    }
    Ok(())
}

fn frame_from_rel_path(dir: &Path, rel: &str, seq: &str, mirrored: bool) -> Result<Frame, DatasetError> {
    let path = dir.join(rel);
    let pixels = load_gray_png(&path)?;
    if pixels.dim() != (FRAME_HEIGHT, FRAME_WIDTH) {
        return Err(DatasetError::Image {
            path,
            reason: format!(
                "expected {FRAME_HEIGHT}x{FRAME_WIDTH}, got {}x{}",
                pixels.dim().0,
                pixels.dim().1
            ),
        });
    }
    // <seq>_<index>_<m|o>.png
    let stem = Path::new(rel)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("");
    let index = stem
        .rsplit('_')
        .nth(1)
        .and_then(|t| t.parse::<usize>().ok())
        .unwrap_or(0);
    Ok(Frame {
        pixels,
        source_sequence: seq.to_string(),
        source_index: index,
        mirrored,
    })
}

/// Reads a directory written by [`write_preprocessed`].
pub fn load_preprocessed(dir: &Path) -> Result<Vec<TrainingSample>, DatasetError> {
    use crate::geometry::Quaternion;
    let index_path = dir.join("index.jsonl");
    let file = std::io::BufReader::new(std::fs::File::open(&index_path)?);
    let mut samples = Vec::new();
    for (ln, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::IndexFile {
                path: index_path.clone(),
                line: ln + 1,
                reason: e.to_string(),
            })?;
        let a = frame_from_rel_path(dir, &rec.a, &rec.seq, rec.mirrored)?;
        let b = frame_from_rel_path(dir, &rec.b, &rec.seq, rec.mirrored)?;
        samples.push(TrainingSample {
            pair: (a, b),
            label: MotionLabel {
                x: Vector3::new(rec.x[0], rec.x[1], rec.x[2]),
                q: Quaternion {
                    w: rec.q[0],
                    x: rec.q[1],
                    y: rec.q[2],
                    z: rec.q[3],
                },
            },
        });
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rot_y;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    fn raw_constant(v: u8) -> Array2<u8> {
        Array2::from_elem((376, 1241), v)
    }

    #[test]
    fn preprocess_constant_image_stays_constant() {
        let f = preprocess_image(&raw_constant(77), "00", 0).unwrap();
        assert_eq!(f.pixels.dim(), (96, 128));
        assert!(f.pixels.iter().all(|&v| v == 77));
    }

    #[test]
    fn preprocess_center_maps_near_output_center() {
        let mut raw = raw_constant(0);
        raw[(188, 620)] = 255;
        let f = preprocess_image(&raw, "00", 0).unwrap();
        let (mut bi, mut bj, mut bv) = (0usize, 0usize, 0u8);
        for ((i, j), &v) in f.pixels.indexed_iter() {
            if v > bv {
                (bi, bj, bv) = (i, j, v);
            }
        }
        assert!(bv > 0);
        assert!((bi as i64 - 48).abs() <= 1, "row {bi}");
        assert!((bj as i64 - 64).abs() <= 1, "col {bj}");
    }

    #[test]
    fn preprocess_rejects_undersized_axes() {
        let narrow = Array2::from_elem((376, 499), 0u8);
        match preprocess_image(&narrow, "00", 0) {
            Err(DatasetError::Undersized { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("{other:?}"),
        }
        let short = Array2::from_elem((374, 1241), 0u8);
        match preprocess_image(&short, "00", 0) {
            Err(DatasetError::Undersized { axis, .. }) => assert_eq!(axis, "height"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preprocess_is_deterministic() {
        let mut raw = raw_constant(10);
        raw[(100, 600)] = 200;
        let a = preprocess_image(&raw, "00", 0).unwrap();
        let b = preprocess_image(&raw, "00", 0).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    fn test_frame(seed: u8) -> Frame {
        let pixels = Array2::from_shape_fn((96, 128), |(i, j)| {
            (i as u32 * 7 + j as u32 * 13 + seed as u32) as u8
        });
        Frame::from_pixels(pixels, "00", seed as usize, false)
    }

    #[test]
    fn mirror_is_an_involution() {
        let f = test_frame(3);
        let m = mirror_image(&f);
        assert!(m.mirrored);
        let back = mirror_image(&m);
        assert!(!back.mirrored);
        assert_eq!(back.pixels, f.pixels);
    }

    #[test]
    fn mirror_swaps_halves() {
        let pixels = Array2::from_shape_fn((96, 128), |(_, j)| if j < 64 { 0u8 } else { 255 });
        let f = Frame::from_pixels(pixels, "00", 0, false);
        let m = mirror_image(&f);
        assert!(m.pixels.column(0).iter().all(|&v| v == 255));
        assert!(m.pixels.column(127).iter().all(|&v| v == 0));
    }

    #[test]
    fn mirror_preserves_histogram() {
        let f = test_frame(9);
        let m = mirror_image(&f);
        let hist = |p: &Array2<u8>| {
            let mut h = [0u32; 256];
            for &v in p.iter() {
                h[v as usize] += 1;
            }
            h
        };
        assert_eq!(hist(&f.pixels), hist(&m.pixels));
    }

    fn forward_poses(n: usize, step: f64) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, step * i as f64)))
            .collect()
    }

    #[test]
    fn build_pairs_counts_and_identity() {
        let frames: Vec<Frame> = (0..2).map(|i| test_frame(i)).collect();
        let poses = vec![Pose::identity(), Pose::identity()];
        let samples = build_pairs(&frames, &poses).unwrap();
        assert_eq!(samples.len(), 1);
        assert_abs_diff_eq!(samples[0].label.x.norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(samples[0].label.q.w, 1.0, epsilon = 1e-12);

        let frames11: Vec<Frame> = (0..11).map(|i| test_frame(i)).collect();
        let samples = build_pairs(&frames11, &forward_poses(11, 0.5)).unwrap();
        assert_eq!(samples.len(), 10);
        for s in &samples {
            assert_abs_diff_eq!(s.label.x.x, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(s.label.x.y, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(s.label.x.z, 0.5, epsilon = 1e-9);
        }
    }

    #[test]
    fn build_pairs_rejects_length_mismatch() {
        let frames: Vec<Frame> = (0..3).map(|i| test_frame(i)).collect();
        assert!(matches!(
            build_pairs(&frames, &forward_poses(2, 0.5)),
            Err(DatasetError::LengthMismatch { .. })
        ));
        assert!(matches!(
            build_pairs(&frames[..1], &forward_poses(1, 0.5)),
            Err(DatasetError::TooShort(1))
        ));
    }

    #[test]
    fn mirrored_pair_labels_match_mirror_oracle() {
        let poses: Vec<Pose> = (0..3)
            .map(|i| {
                Pose::new(
                    rot_y(0.1 * i as f64),
                    Vector3::new(0.3 * i as f64, 0.0, 1.0 * i as f64),
                )
            })
            .collect();
        let orig: Vec<Frame> = (0..3).map(|i| test_frame(i)).collect();
        let mirrored: Vec<Frame> = orig.iter().map(mirror_image).collect();

        let s_orig = build_pairs(&orig, &poses).unwrap();
        let s_mir = build_pairs(&mirrored, &poses).unwrap();
        assert_eq!(s_orig.len(), s_mir.len());
        let m = crate::geometry::mirror_matrix();
        for (a, b) in s_orig.iter().zip(&s_mir) {
            // Independent oracle: conjugate the original rotation, keep t.
            let ra = a.label.q.normalized().to_rotation();
            let rb = b.label.q.normalized().to_rotation();
            assert_abs_diff_eq!(m * ra * m, rb, epsilon = 1e-9);
            assert_abs_diff_eq!(a.label.x, b.label.x, epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_iterator_counts_determinism_permutation() {
        let mut a = BatchIterator::new(250, 100, 42).unwrap();
        assert_eq!(a.batches_per_epoch(), 2);
        let b1 = a.next().unwrap();
        let b2 = a.next().unwrap();
        assert_eq!(b1.len(), 100);
        let mut seen: HashSet<usize> = b1.iter().copied().collect();
        seen.extend(b2.iter().copied());
        assert_eq!(seen.len(), 200, "no duplicates within an epoch");
        assert!(seen.iter().all(|&i| i < 250));

        let mut c = BatchIterator::new(250, 100, 42).unwrap();
        assert_eq!(c.next().unwrap(), b1);
        assert_eq!(c.next().unwrap(), b2);

        assert!(matches!(
            BatchIterator::new(0, 10, 0),
            Err(DatasetError::Empty)
        ));
    }

    #[test]
    fn batch_tensor_range_and_labels() {
        let frames: Vec<Frame> = (0..3).map(|i| test_frame(i)).collect();
        let samples = build_pairs(&frames, &forward_poses(3, 0.5)).unwrap();
        let (x, labels) = batch_tensor(&samples, &[0, 1]);
        assert_eq!(x.dim(), (2, 2, 96, 128));
        assert!(x.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(labels.len(), 2);
        // Spot check the scaling on a known pixel.
        assert_abs_diff_eq!(
            x[(0, 0, 0, 0)],
            samples[0].pair.0.pixels[(0, 0)] as f64 / 127.5 - 1.0,
            epsilon = 0.0
        );
    }

    #[test]
    fn preprocessed_round_trip() {
        let frames: Vec<Frame> = (0..4).map(|i| test_frame(i)).collect();
        let poses: Vec<Pose> = (0..4)
            .map(|i| Pose::new(rot_y(0.05 * i as f64), Vector3::new(0.0, 0.0, 0.4 * i as f64)))
            .collect();
        let samples = build_pairs(&frames, &poses).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_preprocessed(dir.path(), &samples).unwrap();
        let loaded = load_preprocessed(dir.path()).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.pair.0.pixels, b.pair.0.pixels);
            assert_eq!(a.pair.1.pixels, b.pair.1.pixels);
            assert_abs_diff_eq!(a.label.x, b.label.x, epsilon = 0.0);
            assert_eq!(a.label.q.as_array(), b.label.q.as_array());
            assert_eq!(a.pair.0.source_sequence, b.pair.0.source_sequence);
            assert_eq!(a.pair.0.mirrored, b.pair.0.mirrored);
        }
    }

    #[test]
    fn kitti_pose_and_calib_parsing() {
        let text = "1 0 0 1.5 0 1 0 -0.25 0 0 1 3.0\n";
        let poses = parse_kitti_poses(text).unwrap();
        assert_eq!(poses.len(), 1);
        assert_abs_diff_eq!(poses[0].translation, Vector3::new(1.5, -0.25, 3.0));
        assert!(parse_kitti_poses("1 2 3\n").is_err());

        let calib = "P0: 718.856 0 607.1928 0 0 718.856 185.2157 0 0 0 1 0\n\
                     P1: 718.856 0 607.1928 -386.1448 0 718.856 185.2157 0 0 0 1 0\n";
        let k = parse_kitti_calib(calib).unwrap();
        assert_abs_diff_eq!(k.fx, 718.856, epsilon = 1e-9);
        assert_abs_diff_eq!(k.baseline.unwrap(), 386.1448 / 718.856, epsilon = 1e-9);

        let scaled = k.for_preprocessed(1241, 376);
        assert_abs_diff_eq!(scaled.fx, 718.856 * 128.0 / 500.0, epsilon = 1e-9);
        // Raw principal point near raw center lands near the frame center.
        assert!((scaled.cx - 64.0).abs() < 5.0, "cx {}", scaled.cx);
        assert!((scaled.cy - 48.0).abs() < 5.0, "cy {}", scaled.cy);
    }

    #[test]
    fn mirrored_and_original_sets_have_equal_cardinality() {
        let orig: Vec<Frame> = (0..6).map(|i| test_frame(i)).collect();
        let mirrored: Vec<Frame> = orig.iter().map(mirror_image).collect();
        let poses = forward_poses(6, 0.5);
        let a = build_pairs(&orig, &poses).unwrap();
        let b = build_pairs(&mirrored, &poses).unwrap();
        assert_eq!(a.len(), b.len());
        let present = sequences_present(&a.iter().cloned().chain(b.iter().cloned()).collect::<Vec<_>>());
        assert!(present.contains(&("00".to_string(), false)));
        assert!(present.contains(&("00".to_string(), true)));
    }
}
