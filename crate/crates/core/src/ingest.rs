//! File formats and scene manifests.
//!
//! | format | layout |
//! |---|---|
//! | DMAP depth | `"DMAP"`, u16 LE version 1, u32 LE width, u32 LE height, `W·H` f32 LE, row-major |
//! | mask | binary PGM (`P5`), 8-bit, nonzero = foreground; written as 0/255 |
//! | pose | text, 16 decimals, row-major 4×4 world-from-camera, last row `0 0 0 1` |
//! | PSET points | `"PSET"`, u16 LE version 1, u32 LE count, `3·count` f32 LE |
//! | labels | text, one integer per line |
//! | manifest | JSON, see [`SceneManifest`] |
//!
//! Every writer is deterministic, so `save ∘ load ∘ save` is byte-identical.

pub mod boxworld;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, CameraIntrinsics, CameraPose, DepthMap, GeometryError, Point3};
use crate::instance3d::SuperpointPartition;
use crate::merger_net::FeatureMap;
use crate::metrics::MaskTrack;
use crate::scene::{ObjectId, Scene, SceneFrame};

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";
pub const PSET_MAGIC: &[u8; 4] = b"PSET";
pub const FORMAT_VERSION: u16 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const TRACKS_SCHEMA_VERSION: u32 = 1;
/// Orthonormality tolerance for rotations read from pose files.
pub const POSE_FILE_TOLERANCE: f64 = 1e-4;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACKS_FILE: &str = "tracks.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: missing file", path.display())]
    MissingFile { path: PathBuf },
    #[error("{}: bad magic, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },
    #[error("{}: unsupported version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("{}: length mismatch, expected {expected} bytes, got {got}", path.display())]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        got: u64,
    },
    #[error("{}: malformed PGM: {reason}", path.display())]
    MalformedPgm { path: PathBuf, reason: String },
    #[error("{}: mask is {got_w}x{got_h}, frame is {want_w}x{want_h}", path.display())]
    MaskDimensions {
        path: PathBuf,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("{}: malformed pose: {reason}", path.display())]
    MalformedPose { path: PathBuf, reason: String },
    #[error("{}: pose rotation not orthonormal (deviation {deviation:.3e}, det {det})", path.display())]
    NonOrthonormalPose {
        path: PathBuf,
        deviation: f64,
        det: f64,
    },
    #[error("{}: invalid manifest field {field}: {reason}", path.display())]
    Manifest {
        path: PathBuf,
        field: String,
        reason: String,
    },
    #[error("{}: line {line}: {reason}", path.display())]
    Labels {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Geometry {
        path: PathBuf,
        source: GeometryError,
    },
    #[error("feature map needs at least one channel raster")]
    NoChannels,
    #[error("invalid box world: {0}")]
    BoxWorld(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IngestError::MissingFile {
                path: path.to_path_buf(),
            }
        } else {
            IngestError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IngestError> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn header(bytes: &[u8], magic: &'static [u8; 4], path: &Path) -> Result<(), IngestError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(IngestError::BadMagic {
            path: path.to_path_buf(),
            expected: std::str::from_utf8(magic).unwrap_or("?"),
        });
    }
    if bytes.len() < 6 {
        return Err(IngestError::LengthMismatch {
            path: path.to_path_buf(),
            expected: 6,
            got: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(IngestError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn encode_dmap(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * depth.values().len());
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for v in depth.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dmap(bytes: &[u8], path: &Path) -> Result<DepthMap, IngestError> {
    header(bytes, DMAP_MAGIC, path)?;
    if bytes.len() < 14 {
        return Err(IngestError::LengthMismatch {
            path: path.to_path_buf(),
            expected: 14,
            got: bytes.len() as u64,
        });
    }
    let (w, h) = (u32_at(bytes, 6) as u64, u32_at(bytes, 10) as u64);
    let expected = 14 + 4 * w * h;
    if bytes.len() as u64 != expected {
        return Err(IngestError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            got: bytes.len() as u64,
        });
    }
    let values = (0..(w * h) as usize)
        .map(|i| f32_at(bytes, 14 + 4 * i))
        .collect();
    DepthMap::new(w as usize, h as usize, values).map_err(|source| IngestError::Geometry {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dmap(path: &Path) -> Result<DepthMap, IngestError> {
    decode_dmap(&read_bytes(path)?, path)
}

pub fn save_dmap(path: &Path, depth: &DepthMap) -> Result<(), IngestError> {
    write_bytes(path, &encode_dmap(depth))
}

/// Stacks single-channel DMAP rasters into one multi-channel feature map.
pub fn load_feature_map(paths: &[PathBuf]) -> Result<FeatureMap, IngestError> {
    let channels: Vec<DepthMap> = paths
        .iter()
        .map(|p| load_dmap(p))
        .collect::<Result<_, _>>()?;
    let Some(first) = channels.first() else {
        return Err(IngestError::NoChannels);
    };
    let (w, h) = (first.width(), first.height());
    for (p, c) in paths.iter().zip(&channels) {
        if (c.width(), c.height()) != (w, h) {
            return Err(IngestError::LengthMismatch {
                path: p.clone(),
                expected: (14 + 4 * w * h) as u64,
                got: (14 + 4 * c.width() * c.height()) as u64,
            });
        }
    }
    let mut values = Vec::with_capacity(w * h * channels.len());
    for i in 0..w * h {
        values.extend(channels.iter().map(|c| c.values()[i] as f64));
    }
    FeatureMap::new(h, w, channels.len(), values).map_err(|e| IngestError::Manifest {
        path: paths[0].clone(),
        field: "feature map".into(),
        reason: e.to_string(),
    })
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<BinaryMask, IngestError> {
    let bad = |reason: &str| IngestError::MalformedPgm {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(IngestError::BadMagic {
            path: path.to_path_buf(),
            expected: "P5",
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments before each header token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let expected = (pos + w * h) as u64;
    if bytes.len() as u64 != expected {
        return Err(IngestError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            got: bytes.len() as u64,
        });
    }
    let data = bytes[pos..].iter().map(|&b| b != 0).collect();
    BinaryMask::new(w, h, data).map_err(|source| IngestError::Geometry {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mask(path: &Path) -> Result<BinaryMask, IngestError> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<(), IngestError> {
    write_bytes(path, &encode_pgm(mask))
}

/// Four lines of four numbers in shortest round-trip decimal form.
pub fn encode_pose(pose: &CameraPose) -> String {
    let mut out = String::new();
    for row in pose.to_matrix4() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn decode_pose(text: &str, path: &Path) -> Result<CameraPose, IngestError> {
    let bad = |reason: String| IngestError::MalformedPose {
        path: path.to_path_buf(),
        reason,
    };
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| bad(format!("not a number: {t:?}")))
        })
        .collect::<Result<_, _>>()?;
    if nums.len() != 16 {
        return Err(bad(format!("expected 16 numbers, found {}", nums.len())));
    }
    if nums.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite entry".into()));
    }
    if nums[12..] != [0.0, 0.0, 0.0, 1.0] {
        return Err(bad(format!(
            "last row must be 0 0 0 1, got {:?}",
            &nums[12..]
        )));
    }
    let r = Matrix3::new(
        nums[0], nums[1], nums[2], nums[4], nums[5], nums[6], nums[8], nums[9], nums[10],
    );
    let t = Vector3::new(nums[3], nums[7], nums[11]);
    CameraPose::with_tolerance(r, t, POSE_FILE_TOLERANCE).map_err(|e| match e {
        GeometryError::NonOrthonormal { deviation, det } => IngestError::NonOrthonormalPose {
            path: path.to_path_buf(),
            deviation,
            det,
        },
        other => bad(other.to_string()),
    })
}

pub fn load_pose(path: &Path) -> Result<CameraPose, IngestError> {
    decode_pose(&read_text(path)?, path)
}

pub fn save_pose(path: &Path, pose: &CameraPose) -> Result<(), IngestError> {
    write_bytes(path, encode_pose(pose).as_bytes())
}

pub fn encode_pset(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 12 * points.len());
    out.extend_from_slice(PSET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for c in [p.x, p.y, p.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pset(bytes: &[u8], path: &Path) -> Result<Vec<Point3>, IngestError> {
    header(bytes, PSET_MAGIC, path)?;
    if bytes.len() < 10 {
        return Err(IngestError::LengthMismatch {
            path: path.to_path_buf(),
            expected: 10,
            got: bytes.len() as u64,
        });
    }
    let n = u32_at(bytes, 6) as u64;
    let expected = 10 + 12 * n;
    if bytes.len() as u64 != expected {
        return Err(IngestError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            got: bytes.len() as u64,
        });
    }
    Ok((0..n as usize)
        .map(|i| {
            let at = 10 + 12 * i;
            Vector3::new(
                f32_at(bytes, at) as f64,
                f32_at(bytes, at + 4) as f64,
                f32_at(bytes, at + 8) as f64,
            )
        })
        .collect())
}

pub fn encode_labels<T: std::fmt::Display>(labels: &[T]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn decode_labels<T: std::str::FromStr>(text: &str, path: &Path) -> Result<Vec<T>, IngestError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.trim().parse::<T>().map_err(|_| IngestError::Labels {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("not an integer label: {line:?}"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub depth: String,
    pub pose: String,
    pub intrinsics: CameraIntrinsics,
    #[serde(default)]
    pub masks: BTreeMap<ObjectId, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth: Option<String>,
}

/// Scene description; every path is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub schema_version: u32,
    pub scene_id: String,
    pub frames: Vec<FrameRecord>,
    /// PSET scene point cloud.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<String>,
    /// Superpoint id per scene point (labels file).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superpoints: Option<String>,
    /// Ground-truth instance id per scene point (labels file, negative = none).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_instances: Option<String>,
}

fn manifest_err(path: &Path, field: impl Into<String>, reason: impl Into<String>) -> IngestError {
    IngestError::Manifest {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    }
}

pub fn read_manifest(path: &Path) -> Result<SceneManifest, IngestError> {
    let text = read_text(path)?;
    let m: SceneManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err(path, "json", e.to_string()))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(manifest_err(
            path,
            "schema_version",
            format!("unsupported version {}", m.schema_version),
        ));
    }
    Ok(m)
}

fn to_json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Loads and validates a scene. `path` may be the manifest file or its
/// directory.
pub fn load_scene(path: &Path) -> Result<Scene, IngestError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let m = read_manifest(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::with_capacity(m.frames.len());
    for (i, rec) in m.frames.iter().enumerate() {
        rec.intrinsics.validate().map_err(|e| {
            manifest_err(
                &manifest_path,
                format!("frames[{i}].intrinsics"),
                e.to_string(),
            )
        })?;
        let (w, h) = (rec.intrinsics.width, rec.intrinsics.height);
        let check_depth = |p: &Path, d: &DepthMap| {
            if (d.width(), d.height()) != (w, h) {
                Err(IngestError::Geometry {
                    path: p.to_path_buf(),
                    source: GeometryError::DimensionMismatch {
                        what: "depth",
                        got_w: d.width(),
                        got_h: d.height(),
                        want_w: w,
                        want_h: h,
                    },
                })
            } else {
                Ok(())
            }
        };
        let depth_path = root.join(&rec.depth);
        let depth = load_dmap(&depth_path)?;
        check_depth(&depth_path, &depth)?;
        let gt_depth = match &rec.gt_depth {
            Some(p) => {
                let gp = root.join(p);
                let d = load_dmap(&gp)?;
                check_depth(&gp, &d)?;
                Some(d)
            }
            None => None,
        };
        let pose = load_pose(&root.join(&rec.pose))?;
        let mut masks = BTreeMap::new();
        for (id, p) in &rec.masks {
            let mp = root.join(p);
            let mask = load_mask(&mp)?;
            if (mask.width(), mask.height()) != (w, h) {
                return Err(IngestError::MaskDimensions {
                    path: mp,
                    got_w: mask.width(),
                    got_h: mask.height(),
                    want_w: w,
                    want_h: h,
                });
            }
            masks.insert(*id, mask);
        }
        frames.push(SceneFrame {
            intrinsics: rec.intrinsics,
            pose,
            depth,
            gt_depth,
            masks,
        });
    }
    let points = match &m.points {
        Some(p) => {
            let pp = root.join(p);
            Some(decode_pset(&read_bytes(&pp)?, &pp)?)
        }
        None => None,
    };
    let n_points = points.as_ref().map(Vec::len);
    let check_count = |field: &str, got: usize| match n_points {
        Some(n) if n != got => Err(manifest_err(
            &manifest_path,
            field,
            format!("{got} labels for {n} scene points"),
        )),
        None => Err(manifest_err(&manifest_path, field, "requires points")),
        _ => Ok(()),
    };
    let superpoints = match &m.superpoints {
        Some(p) => {
            let sp = root.join(p);
            let labels: Vec<u32> = decode_labels(&read_text(&sp)?, &sp)?;
            check_count("superpoints", labels.len())?;
            Some(
                SuperpointPartition::new(labels)
                    .map_err(|e| manifest_err(&manifest_path, "superpoints", e.to_string()))?,
            )
        }
        None => None,
    };
    let gt_labels = match &m.gt_instances {
        Some(p) => {
            let gp = root.join(p);
            let labels: Vec<i64> = decode_labels(&read_text(&gp)?, &gp)?;
            check_count("gt_instances", labels.len())?;
            Some(labels)
        }
        None => None,
    };
    Ok(Scene {
        id: m.scene_id,
        frames,
        points,
        superpoints,
        gt_labels,
    })
}

/// Writes a scene under `dir` with fixed file names and returns the manifest
/// path.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<PathBuf, IngestError> {
    let mut records = Vec::with_capacity(scene.frames.len());
    for (i, f) in scene.frames.iter().enumerate() {
        let depth = format!("depth/{i:05}.dmap");
        save_dmap(&dir.join(&depth), &f.depth)?;
        let pose = format!("pose/{i:05}.txt");
        save_pose(&dir.join(&pose), &f.pose)?;
        let gt_depth = match &f.gt_depth {
            Some(d) => {
                let p = format!("gt_depth/{i:05}.dmap");
                save_dmap(&dir.join(&p), d)?;
                Some(p)
            }
            None => None,
        };
        let mut masks = BTreeMap::new();
        for (id, m) in &f.masks {
            let p = format!("masks/{i:05}_{id}.pgm");
            save_mask(&dir.join(&p), m)?;
            masks.insert(*id, p);
        }
        records.push(FrameRecord {
            depth,
            pose,
            intrinsics: f.intrinsics,
            masks,
            gt_depth,
        });
    }
    let points = match &scene.points {
        Some(pts) => {
            write_bytes(&dir.join("points.pset"), &encode_pset(pts))?;
            Some("points.pset".to_string())
        }
        None => None,
    };
    let superpoints = match &scene.superpoints {
        Some(sp) => {
            write_bytes(
                &dir.join("superpoints.txt"),
                encode_labels(sp.labels()).as_bytes(),
            )?;
            Some("superpoints.txt".to_string())
        }
        None => None,
    };
    let gt_instances = match &scene.gt_labels {
        Some(l) => {
            write_bytes(&dir.join("gt_instances.txt"), encode_labels(l).as_bytes())?;
            Some("gt_instances.txt".to_string())
        }
        None => None,
    };
    let manifest = SceneManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        scene_id: scene.id.clone(),
        frames: records,
        points,
        superpoints,
        gt_instances,
    };
    let path = dir.join(MANIFEST_FILE);
    write_bytes(&path, to_json_text(&manifest).as_bytes())?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecordFile {
    pub id: String,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectId>,
    /// Frame index → PGM path relative to the track-set directory.
    #[serde(default)]
    pub masks: BTreeMap<usize, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSetFile {
    pub schema_version: u32,
    pub tracks: Vec<TrackRecordFile>,
}

/// One mask track with its identity and optional keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub id: String,
    pub keyframe: Option<usize>,
    pub object: Option<ObjectId>,
    pub track: MaskTrack,
}

/// Reads `dir/tracks.json`. A directory without it holds zero tracks.
pub fn load_track_set(dir: &Path) -> Result<Vec<TrackRecord>, IngestError> {
    if !dir.is_dir() {
        return Err(IngestError::MissingFile {
            path: dir.to_path_buf(),
        });
    }
    let path = dir.join(TRACKS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = read_text(&path)?;
    let set: TrackSetFile =
        serde_json::from_str(&text).map_err(|e| manifest_err(&path, "json", e.to_string()))?;
    if set.schema_version != TRACKS_SCHEMA_VERSION {
        return Err(manifest_err(
            &path,
            "schema_version",
            format!("unsupported version {}", set.schema_version),
        ));
    }
    let mut out = Vec::with_capacity(set.tracks.len());
    let mut seen = std::collections::BTreeSet::new();
    for (i, t) in set.tracks.iter().enumerate() {
        if !seen.insert(t.id.clone()) {
            return Err(manifest_err(
                &path,
                format!("tracks[{i}].id"),
                format!("duplicate id {:?}", t.id),
            ));
        }
        if t.keyframe.is_some_and(|k| k >= t.num_frames) {
            return Err(manifest_err(
                &path,
                format!("tracks[{i}].keyframe"),
                "beyond num_frames",
            ));
        }
        let mut frames = vec![None; t.num_frames];
        for (&f, p) in &t.masks {
            if f >= t.num_frames {
                return Err(manifest_err(
                    &path,
                    format!("tracks[{i}].masks"),
                    format!("frame {f} beyond num_frames"),
                ));
            }
            frames[f] = Some(load_mask(&dir.join(p))?);
        }
        out.push(TrackRecord {
            id: t.id.clone(),
            keyframe: t.keyframe,
            object: t.object,
            track: MaskTrack::new(frames),
        });
    }
    Ok(out)
}

/// Writes visible masks and `tracks.json` under `dir`.
pub fn save_track_set(dir: &Path, tracks: &[TrackRecord]) -> Result<PathBuf, IngestError> {
    let mut records = Vec::with_capacity(tracks.len());
    for (i, t) in tracks.iter().enumerate() {
        let mut masks = BTreeMap::new();
        for f in 0..t.track.len() {
            if let Some(m) = t.track.frames[f].as_ref() {
                let p = format!("masks/{i:04}_{f:05}.pgm");
                save_mask(&dir.join(&p), m)?;
                masks.insert(f, p);
            }
        }
        records.push(TrackRecordFile {
            id: t.id.clone(),
            num_frames: t.track.len(),
            keyframe: t.keyframe,
            object: t.object,
            masks,
        });
    }
    let path = dir.join(TRACKS_FILE);
    let set = TrackSetFile {
        schema_version: TRACKS_SCHEMA_VERSION,
        tracks: records,
    };
    write_bytes(&path, to_json_text(&set).as_bytes())?;
    Ok(path)
}
