//! File formats: newline-delimited scene records, binary weights, JSON
//! artifacts and the TOML pipeline configuration.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::confidence::SceneConfidence;
use crate::error::{Error, Result};
use crate::features::{Detection3D, ModalityEmbedding, ModalityTag};
use crate::geometry::Box3D;
use crate::gnn::{ModelConfig, ModelParams};
use crate::nn::Tensor;
use crate::pipeline::{PipelineConfig, Scene, SceneScores};
use crate::track::{TrackState, Trajectory, TrajectorySet};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"GTWT";
/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "GRAPHTRACK_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Header,
    Det,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRecord {
    pub present: bool,
    #[serde(default)]
    pub vector: Vec<f64>,
}

/// One line of a scene file other than the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: String,
    pub frame: usize,
    pub timestamp: f64,
    pub kind: RecordKind,
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub modalities: BTreeMap<ModalityTag, ModalityRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub frames: usize,
    pub ground_truth: bool,
}

/// Optional first line; fixes scene order, frame counts and whether a
/// scene has (possibly empty) ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneHeader {
    pub kind: RecordKind,
    pub format_version: u32,
    pub scenes: Vec<SceneSummary>,
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

#[derive(Default)]
struct SceneBuilder {
    frames: usize,
    has_gt: bool,
    dets: BTreeMap<usize, Vec<Detection3D>>,
    gt: BTreeMap<u64, (usize, Vec<TrackState>)>,
    timestamps: BTreeMap<usize, f64>,
}

/// Parses a scene file. `origin` names the source in diagnostics.
pub fn parse_scenes(reader: impl BufRead, origin: &str) -> Result<Vec<Scene>> {
    let mut order: Vec<String> = Vec::new();
    let mut builders: BTreeMap<String, SceneBuilder> = BTreeMap::new();
    let mut dims: BTreeMap<ModalityTag, usize> = BTreeMap::new();
    let mut seen_record = false;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(origin, lineno, e.to_string()))?;
        if value.get("kind").and_then(|v| v.as_str()) == Some("header") {
            if seen_record {
                return Err(parse_err(origin, lineno, "header must be the first record"));
            }
            let h: SceneHeader = serde_json::from_value(value).map_err(|e| parse_err(origin, lineno, e.to_string()))?;
            if h.format_version != FORMAT_VERSION {
                return Err(parse_err(origin, lineno, format!("unsupported format version {}", h.format_version)));
            }
            for s in h.scenes {
                if builders.contains_key(&s.id) {
                    return Err(parse_err(origin, lineno, format!("scene {:?} listed twice", s.id)));
                }
                order.push(s.id.clone());
                builders.insert(
                    s.id,
                    SceneBuilder {
                        frames: s.frames,
                        has_gt: s.ground_truth,
                        ..SceneBuilder::default()
                    },
                );
            }
            seen_record = true;
            continue;
        }
        seen_record = true;
        let r: SceneRecord = serde_json::from_value(value).map_err(|e| parse_err(origin, lineno, e.to_string()))?;
        let bad = |m: String| parse_err(origin, lineno, m);
        let bbox = Box3D::new(r.center, r.size, r.yaw).map_err(|e| bad(e.to_string()))?;
        if !(r.timestamp.is_finite() && r.timestamp >= 0.0) {
            return Err(bad(format!("timestamp {} must be finite and non-negative", r.timestamp)));
        }
        if !(0.0..=1.0).contains(&r.score) || r.velocity.iter().any(|v| !v.is_finite()) {
            return Err(bad("score must lie in [0, 1] and velocity must be finite".into()));
        }
        if !builders.contains_key(&r.scene_id) {
            order.push(r.scene_id.clone());
        }
        let b = builders.entry(r.scene_id.clone()).or_default();
        match b.timestamps.get(&r.frame) {
            Some(&t) if t != r.timestamp => return Err(bad(format!("frame {} has timestamps {t} and {}", r.frame, r.timestamp))),
            Some(_) => {}
            None => {
                let before = b.timestamps.range(..r.frame).next_back().map(|(_, &t)| t);
                let after = b.timestamps.range(r.frame + 1..).next().map(|(_, &t)| t);
                if before.is_some_and(|t| t >= r.timestamp) || after.is_some_and(|t| t <= r.timestamp) {
                    return Err(bad(format!("timestamp {} of frame {} is out of order", r.timestamp, r.frame)));
                }
                b.timestamps.insert(r.frame, r.timestamp);
            }
        }
        b.frames = b.frames.max(r.frame + 1);
        match r.kind {
            RecordKind::Header => unreachable!("headers are handled above"),
            RecordKind::Det => {
                let mut det = Detection3D::new(bbox, r.velocity, r.class_id, r.score, r.frame, r.timestamp);
                det.gt_instance = r.instance;
                for (tag, m) in r.modalities {
                    if m.present {
                        if m.vector.is_empty() || m.vector.iter().any(|v| !v.is_finite()) {
                            return Err(bad(format!("{tag} vector must be non-empty and finite")));
                        }
                        let want = *dims.entry(tag).or_insert(m.vector.len());
                        if want != m.vector.len() {
                            return Err(bad(format!("{tag} vector has width {}, earlier records use {want}", m.vector.len())));
                        }
                        det.modalities.insert(tag, ModalityEmbedding::present(tag, m.vector));
                    } else {
                        det.modalities.insert(
                            tag,
                            ModalityEmbedding {
                                tag,
                                present: false,
                                vector: m.vector,
                            },
                        );
                    }
                }
                b.dets.entry(r.frame).or_default().push(det);
            }
            RecordKind::Gt => {
                let id = r.instance.ok_or_else(|| bad("ground-truth record without instance".into()))?;
                let entry = b.gt.entry(id).or_insert((r.class_id, Vec::new()));
                if entry.0 != r.class_id {
                    return Err(bad(format!("instance {id} changes class")));
                }
                if entry.1.iter().any(|s| s.frame_index == r.frame) {
                    return Err(bad(format!("instance {id} appears twice in frame {}", r.frame)));
                }
                entry.1.push(TrackState {
                    frame_index: r.frame,
                    bbox,
                    velocity: r.velocity,
                    score: r.score,
                });
                b.has_gt = true;
            }
        }
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let mut b = builders.remove(&id).expect("scene builder");
            let detections = (0..b.frames).map(|f| b.dets.remove(&f).unwrap_or_default()).collect();
            let gt = b.has_gt.then(|| {
                TrajectorySet::new(
                    b.gt.into_iter()
                        .map(|(track_id, (class_id, mut states))| {
                            states.sort_by_key(|s| s.frame_index);
                            Trajectory { track_id, class_id, states }
                        })
                        .collect(),
                )
            });
            Scene { id, detections, gt }
        })
        .collect())
}

fn record(scene: &str, kind: RecordKind, class_id: usize, s: &TrackState, timestamp: f64) -> SceneRecord {
    SceneRecord {
        scene_id: scene.to_string(),
        frame: s.frame_index,
        timestamp,
        kind,
        class_id,
        center: s.bbox.center,
        size: s.bbox.size,
        yaw: s.bbox.yaw,
        velocity: s.velocity,
        score: s.score,
        instance: None,
        modalities: BTreeMap::new(),
    }
}

/// Writes scenes with a header. Ground-truth timestamps are taken from
/// the frame's detections, or `frame * frame_period` for frames without.
pub fn write_scenes(mut w: impl Write, scenes: &[Scene], frame_period: f64) -> Result<()> {
    let header = SceneHeader {
        kind: RecordKind::Header,
        format_version: FORMAT_VERSION,
        scenes: scenes
            .iter()
            .map(|s| SceneSummary {
                id: s.id.clone(),
                frames: s.detections.len().max(s.gt.as_ref().map_or(0, |g| g.num_frames())),
                ground_truth: s.gt.is_some(),
            })
            .collect(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
    for s in scenes {
        let stamp = |f: usize| {
            s.detections
                .get(f)
                .and_then(|d| d.first())
                .map_or(f as f64 * frame_period, |d| d.timestamp)
        };
        for dets in &s.detections {
            for d in dets {
                let mut r = record(&s.id, RecordKind::Det, d.class_id, &TrackState::from(d), d.timestamp);
                r.instance = d.gt_instance;
                r.modalities = d
                    .modalities
                    .iter()
                    .map(|(&tag, m)| {
                        (
                            tag,
                            ModalityRecord {
                                present: m.present,
                                vector: m.vector.clone(),
                            },
                        )
                    })
                    .collect();
                writeln!(w, "{}", serde_json::to_string(&r).map_err(json_err)?)?;
            }
        }
        for t in s.gt.iter().flat_map(|g| &g.tracks) {
            for st in &t.states {
                let mut r = record(&s.id, RecordKind::Gt, t.class_id, st, stamp(st.frame_index));
                r.instance = Some(t.track_id);
                writeln!(w, "{}", serde_json::to_string(&r).map_err(json_err)?)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn json_err(e: serde_json::Error) -> Error {
    Error::InvalidArgument(format!("serialization failed: {e}"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| with_path(e, path))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| with_path(e, path))?))
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    parse_scenes(open(path)?, &path.display().to_string())
}

pub fn save_scenes(path: &Path, scenes: &[Scene], frame_period: f64) -> Result<()> {
    write_scenes(create(path)?, scenes, frame_period)
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    format_version: u32,
    model: ModelConfig,
}

/// Binary weights: magic, version, header length and JSON header with the
/// model configuration, then `count` named tensors as little-endian f64.
pub fn write_weights(mut w: impl Write, params: &ModelParams) -> Result<()> {
    let header = serde_json::to_vec(&WeightsHeader {
        format_version: FORMAT_VERSION,
        model: params.config.clone(),
    })
    .map_err(json_err)?;
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&u32_len(header.len())?.to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&u32_len(params.store.len())?.to_le_bytes())?;
    for (name, t) in params.store.iter() {
        w.write_all(&u32_len(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_len(t.rows())?.to_le_bytes())?;
        w.write_all(&u32_len(t.cols())?.to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Weights(format!("length {n} does not fit the format")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Weights("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_weights(mut r: impl Read) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Weights("not a weights file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Weights(format!("unsupported format version {version}")));
    }
    let mut header = vec![0u8; read_u32(&mut r)? as usize];
    r.read_exact(&mut header).map_err(truncated)?;
    let header: WeightsHeader = serde_json::from_slice(&header).map_err(|e| Error::Weights(format!("bad header: {e}")))?;
    let mut params = ModelParams::new(header.model)?;
    let count = read_u32(&mut r)? as usize;
    if count != params.store.len() {
        return Err(Error::Weights(format!("{count} tensors for a model with {}", params.store.len())));
    }
    let mut loaded = vec![false; count];
    for _ in 0..count {
        let mut name = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let id = params
            .store
            .find(&name)
            .ok_or_else(|| Error::Weights(format!("unknown tensor {name:?}")))?;
        if std::mem::replace(&mut loaded[id.index()], true) {
            return Err(Error::Weights(format!("tensor {name:?} appears twice")));
        }
        let want = params.store.get(id).shape();
        if want != (rows, cols) {
            return Err(Error::Weights(format!("tensor {name:?} is {rows}x{cols}, expected {}x{}", want.0, want.1)));
        }
        let mut data = vec![0.0; rows * cols];
        let mut b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut b).map_err(truncated)?;
            *v = f64::from_le_bytes(b);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Weights(format!("tensor {name:?} holds non-finite values")));
        }
        *params.store.get_mut(id) = Tensor::new(rows, cols, data)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Weights("unexpected bytes after the last tensor".into()));
    }
    Ok(params)
}

pub fn save_weights(path: &Path, params: &ModelParams) -> Result<()> {
    write_weights(create(path)?, params)
}

pub fn load_weights(path: &Path) -> Result<ModelParams> {
    read_weights(open(path)?)
}

/// A JSON artifact tagged with the format version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format_version: u32,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(
        &mut w,
        &Versioned {
            format_version: FORMAT_VERSION,
            body,
        },
    )
    .map_err(json_err)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let v: Versioned<T> = serde_json::from_reader(open(path)?).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if v.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("unsupported format version {}", v.format_version),
        });
    }
    Ok(v.body)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTracks {
    pub id: String,
    pub tracks: TrajectorySet,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TracksFile {
    pub scenes: Vec<SceneTracks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScoreRecord {
    pub id: String,
    pub scores: SceneScores,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoresFile {
    pub scenes: Vec<SceneScoreRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntropy {
    pub id: String,
    #[serde(flatten)]
    pub confidence: SceneConfidence,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EntropyFile {
    pub scenes: Vec<SceneEntropy>,
    pub mean_entropy: f64,
    /// Scenes kept by the entropy filter.
    pub selected: Vec<String>,
}

/// One line of the plot export: a track's BEV path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub scene_id: String,
    pub track_id: u64,
    pub class_id: usize,
    pub frames: Vec<usize>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub yaw: Vec<f64>,
}

impl PlotRecord {
    pub fn from_track(scene_id: &str, t: &Trajectory) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            track_id: t.track_id,
            class_id: t.class_id,
            frames: t.states.iter().map(|s| s.frame_index).collect(),
            x: t.states.iter().map(|s| s.bbox.center[0]).collect(),
            y: t.states.iter().map(|s| s.bbox.center[1]).collect(),
            yaw: t.states.iter().map(|s| s.bbox.yaw).collect(),
        }
    }
}

pub fn write_plot_data(path: &Path, scenes: &[SceneTracks]) -> Result<()> {
    let mut w = create(path)?;
    for s in scenes {
        for t in &s.tracks.tracks {
            writeln!(w, "{}", serde_json::to_string(&PlotRecord::from_track(&s.id, t)).map_err(json_err)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a TOML configuration; missing keys take their defaults and the
/// result is validated.
pub fn parse_config(text: &str, origin: &str) -> Result<PipelineConfig> {
    let cfg = decode_config(text, origin)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Like [`parse_config`] but leaves validation to the caller, who may still
/// apply overrides.
pub fn decode_config(text: &str, origin: &str) -> Result<PipelineConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(origin, &e))?;
    if let Some(v) = table.remove("format_version") {
        if v.as_integer() != Some(FORMAT_VERSION as i64) {
            return Err(Error::Config(format!("{origin}: unsupported format_version {v}")));
        }
    }
    table.try_into().map_err(|e: toml::de::Error| config_err(origin, &e))
}

fn config_err(origin: &str, e: &toml::de::Error) -> Error {
    Error::Config(format!("{origin}: {}", e.message()))
}

pub fn config_to_toml(cfg: &PipelineConfig) -> Result<String> {
    let body = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("format_version = {FORMAT_VERSION}\n\n{body}"))
}

/// The configuration file to use: the explicit path, else the one named by
/// [`CONFIG_ENV`], else none.
pub fn config_path(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

/// Loads the file chosen by [`config_path`], or the built-in defaults. The
/// result is not validated yet.
pub fn load_config(explicit: Option<&Path>) -> Result<PipelineConfig> {
    match config_path(explicit) {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| with_path(e, &p))?;
            decode_config(&text, &p.display().to_string())
        }
        None => Ok(PipelineConfig::default()),
    }
}
