//! Shot features, scene annotations, predictions and reports on disk.
//!
//! * `features.jsonl`: one shot per line,
//!   `{"video_id", "shot_index", "start_sec", "end_sec", "vis": [..], "aud": [..]}`.
//!   Per-shot visual features are expected to come from the key frame at the
//!   middle of the shot; extraction itself happens upstream.
//! * `features.bin`: packed little-endian variant of the same data.
//! * `scenes.json` / `predictions.json`:
//!   `{"videos": [{"video_id", "scenes": [{"start_shot", "end_shot", "category"}]}]}`.
//! * `report.json`: see [`crate::metrics::ReportJson`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_scheme::{check_partition, LabelScheme, SceneAnnotation, SchemeMode};
use crate::metrics::EvalReport;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub video_id: String,
    pub shot_index: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    #[serde(rename = "vis")]
    pub vis_feat: Vec<f64>,
    #[serde(rename = "aud")]
    pub aud_feat: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub video_id: String,
    pub shots: Vec<ShotRecord>,
    pub scenes: Option<Vec<SceneAnnotation>>,
}

impl VideoSequence {
    pub fn n_shots(&self) -> usize {
        self.shots.len()
    }

    pub fn vis_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.shots.iter().map(|s| s.vis_feat.as_slice()).collect();
        Matrix::from_rows(&rows)
    }

    pub fn aud_matrix(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.shots.iter().map(|s| s.aud_feat.as_slice()).collect();
        Matrix::from_rows(&rows)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.shots
            .first()
            .map_or((0, 0), |s| (s.vis_feat.len(), s.aud_feat.len()))
    }

    pub fn without_scenes(&self) -> Self {
        VideoSequence {
            scenes: None,
            ..self.clone()
        }
    }
}

/// Videos sharing one label scheme and feature dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoSequence>,
    pub scheme: LabelScheme,
}

impl Corpus {
    pub fn new(videos: Vec<VideoSequence>, scheme: LabelScheme) -> Result<Self> {
        let dims = videos.first().map(VideoSequence::dims);
        for v in &videos {
            if Some(v.dims()) != dims {
                return Err(Error::DimMismatch(format!(
                    "video {} has dims {:?}, expected {:?}",
                    v.video_id,
                    v.dims(),
                    dims.unwrap_or_default()
                )));
            }
            if let Some(scenes) = &v.scenes {
                validate_scenes(&v.video_id, scenes, v.n_shots(), &scheme)?;
            }
        }
        Ok(Corpus { videos, scheme })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.videos.first().map_or((0, 0), VideoSequence::dims)
    }
}

fn validate_scenes(
    video_id: &str,
    scenes: &[SceneAnnotation],
    n_shots: usize,
    scheme: &LabelScheme,
) -> Result<()> {
    check_partition(scenes, n_shots).map_err(|reason| Error::InvalidPartition {
        video_id: video_id.to_string(),
        reason,
    })?;
    if scheme.mode() == SchemeMode::Ssc {
        for s in scenes {
            match s.category {
                None => {
                    return Err(Error::MissingCategory(format!(
                        "video {video_id} scene [{}, {}]",
                        s.start_shot, s.end_shot
                    )))
                }
                Some(c) if c.0 >= scheme.num_categories() => {
                    return Err(Error::UnknownCategory(format!("#{}", c.0)))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn validate_shot(s: &ShotRecord) -> Result<()> {
    if !(s.start_sec.is_finite() && s.end_sec.is_finite() && s.start_sec < s.end_sec) {
        return Err(Error::InvalidShot(format!(
            "video {} shot {}: start_sec {} must be below end_sec {}",
            s.video_id, s.shot_index, s.start_sec, s.end_sec
        )));
    }
    if !s.vis_feat.iter().chain(&s.aud_feat).all(|x| x.is_finite()) {
        return Err(Error::InvalidShot(format!(
            "video {} shot {}: non-finite feature value",
            s.video_id, s.shot_index
        )));
    }
    Ok(())
}

/// Groups shots into videos (sorted by id), orders by shot index and checks
/// density, uniqueness and feature dimensions.
pub fn group_shots(shots: Vec<ShotRecord>) -> Result<Vec<VideoSequence>> {
    let mut dims: Option<(usize, usize)> = None;
    let mut by_video: BTreeMap<String, Vec<ShotRecord>> = BTreeMap::new();
    for s in shots {
        validate_shot(&s)?;
        let d = (s.vis_feat.len(), s.aud_feat.len());
        match dims {
            None => dims = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::DimMismatch(format!(
                    "video {} shot {} has (vis, aud) dims {:?}, expected {:?}",
                    s.video_id, s.shot_index, d, expected
                )))
            }
            _ => {}
        }
        by_video.entry(s.video_id.clone()).or_default().push(s);
    }
    by_video
        .into_iter()
        .map(|(video_id, mut shots)| {
            shots.sort_by_key(|s| s.shot_index);
            for (i, s) in shots.iter().enumerate() {
                if s.shot_index < i {
                    return Err(Error::DuplicateShot {
                        video_id,
                        shot_index: s.shot_index,
                    });
                }
                if s.shot_index > i {
                    return Err(Error::ShotGap {
                        video_id,
                        missing: i,
                    });
                }
            }
            Ok(VideoSequence {
                video_id,
                shots,
                scenes: None,
            })
        })
        .collect()
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<VideoSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut shots = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let shot: ShotRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        shots.push(shot);
    }
    group_shots(shots)
}

pub fn save_features(path: impl AsRef<Path>, videos: &[VideoSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in videos {
        for s in &v.shots {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const FEATURE_MAGIC: &[u8; 8] = b"OSMSLFT1";

#[derive(Serialize, Deserialize)]
struct BinHeader {
    d_vis: usize,
    d_aud: usize,
    videos: Vec<(String, usize)>,
}

/// Packed layout: magic, u64 header length, JSON header, then per shot
/// `start_sec, end_sec, vis…, aud…` as little-endian f64.
pub fn save_features_bin(path: impl AsRef<Path>, videos: &[VideoSequence]) -> Result<()> {
    let path = path.as_ref();
    let (d_vis, d_aud) = videos.first().map_or((0, 0), VideoSequence::dims);
    let header = serde_json::to_vec(&BinHeader {
        d_vis,
        d_aud,
        videos: videos
            .iter()
            .map(|v| (v.video_id.clone(), v.n_shots()))
            .collect(),
    })?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for v in videos {
        for s in &v.shots {
            if (s.vis_feat.len(), s.aud_feat.len()) != (d_vis, d_aud) {
                return Err(Error::DimMismatch(format!(
                    "video {} shot {}",
                    v.video_id, s.shot_index
                )));
            }
            for x in [s.start_sec, s.end_sec]
                .iter()
                .chain(&s.vis_feat)
                .chain(&s.aud_feat)
            {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load_features_bin(path: impl AsRef<Path>) -> Result<Vec<VideoSequence>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: BinHeader = serde_json::from_slice(&bytes[16..body])?;
    let per_shot = 2 + header.d_vis + header.d_aud;
    let total: usize = header.videos.iter().map(|(_, n)| n).sum();
    if bytes.len() != body + total * per_shot * 8 {
        return Err(corrupt("payload size does not match header"));
    }
    let mut floats = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut shots = Vec::with_capacity(total);
    for (video_id, n) in &header.videos {
        for shot_index in 0..*n {
            let mut take = |k: usize| (&mut floats).take(k).collect::<Vec<f64>>();
            let times = take(2);
            let vis_feat = take(header.d_vis);
            let aud_feat = take(header.d_aud);
            shots.push(ShotRecord {
                video_id: video_id.clone(),
                shot_index,
                start_sec: times[0],
                end_sec: times[1],
                vis_feat,
                aud_feat,
            });
        }
    }
    group_shots(shots)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub start_shot: usize,
    pub end_shot: usize,
    pub category: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScenes {
    pub video_id: String,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenesFile {
    pub videos: Vec<VideoScenes>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn resolve(records: &[SceneRecord], scheme: &LabelScheme) -> Result<Vec<SceneAnnotation>> {
    records
        .iter()
        .map(|r| {
            let category = match (scheme.mode(), &r.category) {
                (SchemeMode::Ss, _) => None,
                (SchemeMode::Ssc, Some(name)) => Some(scheme.category_id(name)?),
                (SchemeMode::Ssc, None) => None,
            };
            Ok(SceneAnnotation::new(r.start_shot, r.end_shot, category))
        })
        .collect()
}

/// Reads a scenes/predictions file on its own, validating each video's
/// partition against its own extent.
pub fn load_scene_map(
    path: impl AsRef<Path>,
    scheme: &LabelScheme,
) -> Result<BTreeMap<String, Vec<SceneAnnotation>>> {
    let file: ScenesFile = read_json(path.as_ref())?;
    let mut out = BTreeMap::new();
    for v in file.videos {
        let scenes = resolve(&v.scenes, scheme)?;
        let n = scenes.last().map_or(0, |s| s.end_shot + 1);
        validate_scenes(&v.video_id, &scenes, n, scheme)?;
        if out.insert(v.video_id.clone(), scenes).is_some() {
            return Err(Error::Config(format!("video {} listed twice", v.video_id)));
        }
    }
    Ok(out)
}

/// Attaches scenes from `path` to `videos`, checking every partition.
pub fn load_scenes(
    path: impl AsRef<Path>,
    videos: Vec<VideoSequence>,
    scheme: &LabelScheme,
) -> Result<Vec<VideoSequence>> {
    let file: ScenesFile = read_json(path.as_ref())?;
    attach_scenes(&file, videos, scheme)
}

pub fn attach_scenes(
    file: &ScenesFile,
    mut videos: Vec<VideoSequence>,
    scheme: &LabelScheme,
) -> Result<Vec<VideoSequence>> {
    for vs in &file.videos {
        let video = videos
            .iter_mut()
            .find(|v| v.video_id == vs.video_id)
            .ok_or_else(|| Error::UnknownVideo(vs.video_id.clone()))?;
        let scenes = resolve(&vs.scenes, scheme)?;
        validate_scenes(&vs.video_id, &scenes, video.n_shots(), scheme)?;
        video.scenes = Some(scenes);
    }
    Ok(videos)
}

pub fn scenes_file(videos: &[VideoSequence], scheme: &LabelScheme) -> ScenesFile {
    ScenesFile {
        videos: videos
            .iter()
            .filter_map(|v| {
                v.scenes.as_ref().map(|scenes| VideoScenes {
                    video_id: v.video_id.clone(),
                    scenes: scenes
                        .iter()
                        .map(|s| SceneRecord {
                            start_shot: s.start_shot,
                            end_shot: s.end_shot,
                            category: s
                                .category
                                .and_then(|c| scheme.category_name(c))
                                .map(str::to_string),
                        })
                        .collect(),
                })
            })
            .collect(),
    }
}

/// Writes the scenes attached to `videos` (gold or predicted).
pub fn save_scenes(
    path: impl AsRef<Path>,
    videos: &[VideoSequence],
    scheme: &LabelScheme,
) -> Result<()> {
    write_json(path.as_ref(), &scenes_file(videos, scheme))
}

pub fn save_predictions(
    path: impl AsRef<Path>,
    videos: &[VideoSequence],
    scheme: &LabelScheme,
) -> Result<()> {
    save_scenes(path, videos, scheme)
}

pub fn save_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    write_json(path.as_ref(), &report.to_json())
}

pub fn save_scheme(path: impl AsRef<Path>, scheme: &LabelScheme) -> Result<()> {
    write_json(path.as_ref(), scheme)
}

pub fn load_scheme(path: impl AsRef<Path>) -> Result<LabelScheme> {
    read_json::<LabelScheme>(path.as_ref())?.validated()
}

pub fn write_json_file<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_json(path.as_ref(), value)
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    read_json(path.as_ref())
}
