//! Sequence ingestion and result emission: detections (jsonl), ground truth
//! (KITTI tracking label layout), ego speed (plain or oxts rows), embedding
//! sidecars (tsv), tracking results (KITTI text or jsonl), and the on-disk
//! sequence-bundle directory tying them together.
//!
//! Bundle directory layout (written by the generator, read by the tracker):
//!
//! ```text
//! <seq>/meta.json          {"id","frames","dims","image_width","image_height",...}
//! <seq>/detections.jsonl   one Detection object per line
//! <seq>/gt.txt             KITTI tracking label rows (optional)
//! <seq>/speeds.txt         one km/h value per line
//! <seq>/embeddings.tsv     frame  gt_id  f0..f_{d-1}   (optional)
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::assoc::Detection;
use crate::error::{Error, Result};
use crate::metrics::{EvalBox, EvalFrame};
use crate::util::{gauss, seeded_rng};

/// KITTI object type names in class-id order.
const CLASS_NAMES: [&str; 8] =
    ["Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc"];

pub fn class_id_from_name(name: &str) -> Option<i32> {
    if name == "DontCare" {
        return Some(-1);
    }
    CLASS_NAMES.iter().position(|&n| n == name).map(|i| i as i32)
}

pub fn class_name(id: i32) -> &'static str {
    if id < 0 {
        "DontCare"
    } else {
        CLASS_NAMES.get(id as usize).copied().unwrap_or("Misc")
    }
}

/// One ground-truth box; `dont_care` rows are kept for ignore regions but
/// excluded from matching.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub track_id: i64,
    pub class_id: i32,
    /// Center format, `[x, y, w, h]` or `[x, y, z, w, h, l]`.
    pub bbox: Vec<f64>,
    pub dont_care: bool,
}

/// A fully loaded sequence: detections, optional ground truth, per-frame ego
/// speed, and optional embedding sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub id: String,
    pub frames: usize,
    /// 2 for image-plane boxes, 3 for metric boxes.
    pub dims: usize,
    pub image_size: Option<(u32, u32)>,
    pub scene_bounds: Option<Vec<f64>>,
    /// Per-frame detections, dense from frame 0.
    pub detections: Vec<Vec<Detection>>,
    pub gt: Option<Vec<Vec<GtBox>>>,
    /// Per-frame ego speed in km/h.
    pub speeds: Vec<f64>,
    /// Set when the speed file was shorter than the sequence and the last
    /// value was held.
    pub speeds_padded: bool,
    pub embeddings: Option<EmbeddingTable>,
}

impl SequenceBundle {
    pub fn obs_dim(&self) -> usize {
        if self.dims == 3 {
            6
        } else {
            4
        }
    }

    /// Normalizer for trajectory-loss centers: image diagonal for 2D,
    /// 10 m for 3D.
    pub fn center_norm(&self) -> f64 {
        match (self.dims, self.image_size) {
            (2, Some((w, h))) => ((w * w + h * h) as f64).sqrt(),
            (2, None) => 1000.0,
            _ => 10.0,
        }
    }
}

/// Embedding sidecar: `(frame, gt_track_id) -> d floats`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    map: BTreeMap<(usize, i64), Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, map: BTreeMap::new() }
    }

    pub fn insert(&mut self, frame: usize, track_id: i64, emb: Vec<f64>) -> Result<()> {
        if emb.len() != self.dim {
            return Err(Error::Config(format!(
                "embedding length {} != table dim {}",
                emb.len(),
                self.dim
            )));
        }
        self.map.insert((frame, track_id), emb);
        Ok(())
    }

    pub fn get(&self, frame: usize, track_id: i64) -> Option<&Vec<f64>> {
        self.map.get(&(frame, track_id))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for ((frame, id), emb) in &self.map {
            write!(w, "{frame}\t{id}")?;
            for v in emb {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut table: Option<EmbeddingTable> = None;
        for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 3 {
                return Err(Error::Format(format!("embeddings line {}: too few fields", ln + 1)));
            }
            let frame: usize = fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("embeddings line {}: bad frame", ln + 1)))?;
            let id: i64 = fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("embeddings line {}: bad id", ln + 1)))?;
            let emb: Vec<f64> = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("embeddings line {}: bad float", ln + 1)))?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(emb.len()));
            t.insert(frame, id, emb)
                .map_err(|e| Error::Format(format!("embeddings line {}: {e}", ln + 1)))?;
        }
        Ok(table.unwrap_or_else(|| EmbeddingTable::new(0)))
    }
}

/// Parse KITTI tracking labels into per-frame ground truth. Field layout per
/// row: `frame track_id type truncated occluded alpha bbox_l bbox_t bbox_r
/// bbox_b h w l x y z rotation_y [score]` (17 fields, 18 with score).
pub fn parse_kitti_tracking_labels(path: &Path, dims: usize) -> Result<Vec<Vec<GtBox>>> {
    let file = std::fs::File::open(path)?;
    let mut frames: Vec<Vec<GtBox>> = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_kitti_row(&line, dims)
            .map_err(|e| Error::Format(format!("gt line {}: {e}", ln + 1)))?;
        let (frame, gt) = row;
        if frames.len() <= frame {
            frames.resize_with(frame + 1, Vec::new);
        }
        frames[frame].push(gt);
    }
    Ok(frames)
}

fn parse_kitti_row(line: &str, dims: usize) -> std::result::Result<(usize, GtBox), String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 17 && f.len() != 18 {
        return Err(format!("expected 17 or 18 fields, got {}", f.len()));
    }
    let num = |i: usize| -> std::result::Result<f64, String> {
        f[i].parse::<f64>().map_err(|_| format!("bad number in field {}", i + 1))
    };
    let frame: usize = f[0].parse().map_err(|_| "bad frame index".to_string())?;
    let track_id: i64 = f[1].parse().map_err(|_| "bad track id".to_string())?;
    let class_id =
        class_id_from_name(f[2]).ok_or_else(|| format!("unknown object type '{}'", f[2]))?;
    let dont_care = class_id < 0;

    let bbox = if dims == 3 {
        let (h, w, l) = (num(10)?, num(11)?, num(12)?);
        let (x, y, z) = (num(13)?, num(14)?, num(15)?);
        if !dont_care && (w <= 0.0 || h <= 0.0 || l <= 0.0) {
            return Err("non-positive 3D dimensions".into());
        }
        vec![x, y, z, w, h, l]
    } else {
        let (left, top, right, bottom) = (num(6)?, num(7)?, num(8)?, num(9)?);
        if !dont_care && (right <= left || bottom <= top) {
            return Err("degenerate 2D box".into());
        }
        vec![(left + right) / 2.0, (top + bottom) / 2.0, right - left, bottom - top]
    };
    Ok((frame, GtBox { track_id, class_id, bbox, dont_care }))
}

/// Parse per-frame ego speed in km/h. Rows with a single field are plain
/// km/h values; rows with >= 25 fields are KITTI oxts records, from which
/// speed is `sqrt(vn^2 + ve^2) * 3.6`. When `expected` is given, a shorter
/// file is padded by holding the last value (flagged in the second return),
/// and a longer file is an error.
pub fn parse_ego_speed(path: &Path, expected: Option<usize>) -> Result<(Vec<f64>, bool)> {
    let file = std::fs::File::open(path)?;
    let mut speeds = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let v = if fields.len() == 1 {
            fields[0]
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("speed line {}: bad value", ln + 1)))?
        } else if fields.len() >= 25 {
            let vn: f64 = fields[6]
                .parse()
                .map_err(|_| Error::Format(format!("oxts line {}: bad vn", ln + 1)))?;
            let ve: f64 = fields[7]
                .parse()
                .map_err(|_| Error::Format(format!("oxts line {}: bad ve", ln + 1)))?;
            (vn * vn + ve * ve).sqrt() * 3.6
        } else {
            return Err(Error::Format(format!(
                "speed line {}: expected 1 (plain) or >=25 (oxts) fields, got {}",
                ln + 1,
                fields.len()
            )));
        };
        speeds.push(v.max(0.0));
    }
    let mut padded = false;
    if let Some(n) = expected {
        if speeds.len() > n {
            return Err(Error::Sequencing(format!(
                "speed file has {} rows for a {}-frame sequence",
                speeds.len(),
                n
            )));
        }
        if speeds.len() < n {
            if speeds.is_empty() {
                return Err(Error::Sequencing("speed file is empty".into()));
            }
            let last = *speeds.last().unwrap();
            speeds.resize(n, last);
            padded = true;
        }
    }
    Ok((speeds, padded))
}

/// Speed-noise protocols: relative `v(1 + sigma*n)` or pure `v*n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerturbMode {
    Relative(f64),
    PureNoise,
}

/// Inject per-frame Gaussian noise into a speed series (deterministic per
/// seed); negatives clamp to zero.
pub fn perturb_speed(speeds: &[f64], mode: PerturbMode, seed: u64) -> Result<Vec<f64>> {
    if let PerturbMode::Relative(sigma) = mode {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
        }
    }
    let mut rng = seeded_rng(seed);
    Ok(speeds
        .iter()
        .map(|&v| {
            let n = gauss(&mut rng);
            let out = match mode {
                PerturbMode::Relative(sigma) => v * (1.0 + sigma * n),
                PerturbMode::PureNoise => v * n,
            };
            out.max(0.0)
        })
        .collect())
}

/// One emitted track-per-frame record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub frame: usize,
    pub track_id: u64,
    pub class_id: i32,
    /// Center format, length 4 or 6.
    pub bbox: Vec<f64>,
    pub score: f64,
}

impl ResultRow {
    fn validate(&self) -> Result<()> {
        if self.bbox.len() != 4 && self.bbox.len() != 6 {
            return Err(Error::Config(format!("result box length {}", self.bbox.len())));
        }
        if !self.bbox.iter().all(|v| v.is_finite()) || !self.score.is_finite() {
            return Err(Error::Numeric("non-finite result row".into()));
        }
        let sizes = crate::kf::size_indices(self.bbox.len());
        if self.bbox[sizes].iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("result box sizes must be > 0".into()));
        }
        Ok(())
    }
}

/// Output encodings for [`write_results`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResultFormat {
    Kitti,
    Jsonl,
}

/// Write rows sorted ascending by `(frame, track_id)`; byte-stable for
/// identical input.
pub fn write_results(rows: &[ResultRow], path: &Path, format: ResultFormat) -> Result<()> {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.track_id));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in sorted {
        row.validate()?;
        match format {
            ResultFormat::Jsonl => {
                serde_json::to_writer(&mut w, row)?;
                writeln!(w)?;
            }
            ResultFormat::Kitti => {
                let name = class_name(row.class_id);
                if row.bbox.len() == 4 {
                    let (cx, cy, bw, bh) = (row.bbox[0], row.bbox[1], row.bbox[2], row.bbox[3]);
                    writeln!(
                        w,
                        "{} {} {} 0 0 -10 {:.6} {:.6} {:.6} {:.6} -1 -1 -1 -1000 -1000 -1000 -10 {:.6}",
                        row.frame,
                        row.track_id,
                        name,
                        cx - bw / 2.0,
                        cy - bh / 2.0,
                        cx + bw / 2.0,
                        cy + bh / 2.0,
                        row.score
                    )?;
                } else {
                    let b = &row.bbox;
                    writeln!(
                        w,
                        "{} {} {} 0 0 -10 -1 -1 -1 -1 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} -10 {:.6}",
                        row.frame, row.track_id, name, b[4], b[3], b[5], b[0], b[1], b[2], row.score
                    )?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_jsonl(path: &Path) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ResultRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("results line {}: {e}", ln + 1)))?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read back KITTI-format result rows (the inverse of [`write_results`]).
pub fn read_results_kitti(path: &Path, dims: usize) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (frame, gt) = parse_kitti_row(&line, dims)
            .map_err(|e| Error::Format(format!("results line {}: {e}", ln + 1)))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let score = if f.len() == 18 { f[17].parse::<f64>().unwrap_or(1.0) } else { 1.0 };
        rows.push(ResultRow {
            frame,
            track_id: gt.track_id.max(0) as u64,
            class_id: gt.class_id,
            bbox: gt.bbox,
            score,
        });
    }
    Ok(rows)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BundleMeta {
    id: String,
    frames: usize,
    dims: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene_bounds: Option<Vec<f64>>,
}

/// Persist a bundle as a directory (see module docs for the layout).
pub fn write_bundle(bundle: &SequenceBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = BundleMeta {
        id: bundle.id.clone(),
        frames: bundle.frames,
        dims: bundle.dims,
        image_width: bundle.image_size.map(|s| s.0),
        image_height: bundle.image_size.map(|s| s.1),
        scene_bounds: bundle.scene_bounds.clone(),
    };
    let mut meta_out = serde_json::to_vec_pretty(&meta)?;
    meta_out.push(b'\n');
    std::fs::write(dir.join("meta.json"), meta_out)?;

    let mut det = std::io::BufWriter::new(std::fs::File::create(dir.join("detections.jsonl"))?);
    for per_frame in &bundle.detections {
        for d in per_frame {
            serde_json::to_writer(&mut det, d)?;
            writeln!(det)?;
        }
    }
    det.flush()?;

    let mut sp = std::io::BufWriter::new(std::fs::File::create(dir.join("speeds.txt"))?);
    for v in &bundle.speeds {
        writeln!(sp, "{v}")?;
    }
    sp.flush()?;

    if let Some(gt) = &bundle.gt {
        let mut rows = Vec::new();
        for (frame, boxes) in gt.iter().enumerate() {
            for b in boxes {
                rows.push((frame, b));
            }
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("gt.txt"))?);
        for (frame, b) in rows {
            let name = class_name(b.class_id);
            if bundle.dims == 3 {
                let bb = &b.bbox;
                writeln!(
                    w,
                    "{} {} {} 0 0 -10 -1 -1 -1 -1 {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} -10",
                    frame, b.track_id, name, bb[4], bb[3], bb[5], bb[0], bb[1], bb[2]
                )?;
            } else {
                let (cx, cy, bw, bh) = (b.bbox[0], b.bbox[1], b.bbox[2], b.bbox[3]);
                writeln!(
                    w,
                    "{} {} {} 0 0 -10 {:.6} {:.6} {:.6} {:.6} -1 -1 -1 -1000 -1000 -1000 -10",
                    frame,
                    b.track_id,
                    name,
                    cx - bw / 2.0,
                    cy - bh / 2.0,
                    cx + bw / 2.0,
                    cy + bh / 2.0
                )?;
            }
        }
        w.flush()?;
    }

    if let Some(emb) = &bundle.embeddings {
        emb.write_tsv(&dir.join("embeddings.tsv"))?;
    }
    Ok(())
}

/// Load a bundle directory written by [`write_bundle`] (or hand-assembled in
/// the same layout).
pub fn read_bundle(dir: &Path) -> Result<SequenceBundle> {
    let meta_raw = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: BundleMeta = serde_json::from_str(&meta_raw)?;
    if meta.dims != 2 && meta.dims != 3 {
        return Err(Error::Format(format!("meta dims must be 2 or 3, got {}", meta.dims)));
    }

    let mut detections: Vec<Vec<Detection>> = vec![Vec::new(); meta.frames];
    let det_path = dir.join("detections.jsonl");
    if det_path.exists() {
        let file = std::fs::File::open(det_path)?;
        for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Detection = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("detections line {}: {e}", ln + 1)))?;
            d.validate()?;
            if d.frame >= meta.frames {
                return Err(Error::Format(format!(
                    "detections line {}: frame {} outside 0..{}",
                    ln + 1,
                    d.frame,
                    meta.frames
                )));
            }
            detections[d.frame].push(d);
        }
    }

    let gt_path = dir.join("gt.txt");
    let gt = if gt_path.exists() {
        let mut g = parse_kitti_tracking_labels(&gt_path, meta.dims)?;
        if g.len() > meta.frames {
            return Err(Error::Format(format!(
                "gt has frames up to {} but meta declares {}",
                g.len() - 1,
                meta.frames
            )));
        }
        g.resize_with(meta.frames, Vec::new);
        Some(g)
    } else {
        None
    };

    let (speeds, speeds_padded) = parse_ego_speed(&dir.join("speeds.txt"), Some(meta.frames))?;

    let emb_path = dir.join("embeddings.tsv");
    let embeddings = if emb_path.exists() { Some(EmbeddingTable::read_tsv(&emb_path)?) } else { None };

    Ok(SequenceBundle {
        id: meta.id,
        frames: meta.frames,
        dims: meta.dims,
        image_size: match (meta.image_width, meta.image_height) {
            (Some(w), Some(h)) => Some((w, h)),
            _ => None,
        },
        scene_bounds: meta.scene_bounds,
        detections,
        gt,
        speeds,
        speeds_padded,
        embeddings,
    })
}

/// Join a bundle's ground truth with predicted rows into evaluation frames.
/// DontCare ground truth becomes ignore regions: predictions whose
/// intersection covers more than half their own area are dropped.
pub fn build_eval_frames(bundle: &SequenceBundle, rows: &[ResultRow]) -> Result<Vec<EvalFrame>> {
    let gt = bundle
        .gt
        .as_ref()
        .ok_or_else(|| Error::Config(format!("bundle {} has no ground truth", bundle.id)))?;
    let mut per_frame_rows: Vec<Vec<&ResultRow>> = vec![Vec::new(); bundle.frames];
    for r in rows {
        if r.frame >= bundle.frames {
            return Err(Error::Sequencing(format!(
                "result row frame {} outside sequence length {}",
                r.frame, bundle.frames
            )));
        }
        per_frame_rows[r.frame].push(r);
    }

    let mut frames = Vec::with_capacity(bundle.frames);
    for f in 0..bundle.frames {
        let ignore: Vec<&GtBox> = gt[f].iter().filter(|b| b.dont_care).collect();
        let gt_boxes: Vec<EvalBox> = gt[f]
            .iter()
            .filter(|b| !b.dont_care)
            .map(|b| EvalBox { track_id: b.track_id, class_id: b.class_id, bbox: b.bbox.clone() })
            .collect();
        let pred_boxes: Vec<EvalBox> = per_frame_rows[f]
            .iter()
            .filter(|r| {
                !ignore.iter().any(|ig| {
                    let inter = intersection_area(&r.bbox, &ig.bbox);
                    let own = r.bbox[2] * r.bbox[3];
                    own > 0.0 && inter / own > 0.5
                })
            })
            .map(|r| EvalBox { track_id: r.track_id as i64, class_id: r.class_id, bbox: r.bbox.clone() })
            .collect();
        frames.push(EvalFrame {
            frame: f,
            ego_speed: bundle.speeds.get(f).copied().unwrap_or(0.0),
            gt: gt_boxes,
            pred: pred_boxes,
        });
    }
    Ok(frames)
}

fn intersection_area(a: &[f64], b: &[f64]) -> f64 {
    let overlap = |ca: f64, sa: f64, cb: f64, sb: f64| -> f64 {
        let lo = (ca - sa / 2.0).max(cb - sb / 2.0);
        let hi = (ca + sa / 2.0).min(cb + sb / 2.0);
        (hi - lo).max(0.0)
    };
    overlap(a[0], a[2], b[0], b[2]) * overlap(a[1], a[3], b[1], b[3])
}
