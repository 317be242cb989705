use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graphtrack::confidence::{filter_scenes, FilterDirection};
use graphtrack::gnn::{ModalitySpec, ModelParams};
use graphtrack::graph::{build_scene_graphs, label_edges, Window};
use graphtrack::io::{self, EntropyFile, SceneEntropy, SceneScoreRecord, SceneTracks, ScoresFile, TracksFile};
use graphtrack::metrics::{evaluate, EvalScene};
use graphtrack::pipeline::{
    class_counts, evaluate_outputs, labeled_detections, run_pipeline, scene_confidence, score_scene, tracks_from_scores, train_on_scenes,
    PipelineConfig, Scene, SceneOutput,
};
use graphtrack::postproc::refine;
use graphtrack::synth::{generate_scene, SceneConfig};
use serde::Serialize;

/// Offline graph-based 3D multi-object tracking.
#[derive(Parser)]
#[command(name = "graphtrack", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults to $GRAPHTRACK_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override configuration keys.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true)]
    window_len: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Past neighbors kept per node when building edges.
    #[arg(long, global = true)]
    k_past: Option<usize>,
    /// Same-frame neighbors of the frame-wise attention graph.
    #[arg(long, global = true)]
    k_frame: Option<usize>,
    #[arg(long, global = true)]
    num_classes: Option<usize>,
    /// Message-passing steps.
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Class-balancing factor of the training loss.
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Lowest edge score clustering considers.
    #[arg(long, global = true)]
    theta_min: Option<f64>,
    /// Edge score needed to join two existing tracks.
    #[arg(long, global = true)]
    theta_join: Option<f64>,
    /// Detection score an unclustered detection needs to become a track.
    #[arg(long, global = true)]
    singleton_min_score: Option<f64>,
    #[arg(long, global = true)]
    still_iou_min: Option<f64>,
    #[arg(long, global = true)]
    join_iou_min: Option<f64>,
    /// Skip trajectory refinement.
    #[arg(long, global = true)]
    no_postprocess: bool,
    /// Center-distance gate of the evaluation, meters.
    #[arg(long, global = true)]
    gate: Option<f64>,
    #[arg(long, global = true)]
    recall_points: Option<usize>,
    /// Seed of model initialization and training order.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Write the per-window tracking graphs of every scene.
    BuildGraphs {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train edge-classification weights on labeled scenes.
    TrainToy {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        weights_out: PathBuf,
    },
    /// Score the edges of every window.
    Infer {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn edge scores into trajectories (without refinement).
    Cluster {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpolate, repair, join and smooth trajectories.
    Postprocess {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// CLEAR-MOT and AMOTA against the scenes' ground truth.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edge-score entropy per scene, with the entropy filter applied.
    Entropy {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Direction::Above)]
        keep: Direction,
    },
    /// Scenes and weights in, trajectories, metrics and entropy out.
    Pipeline {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    /// Seed of the first scene; scene k uses seed + k.
    #[arg(long = "scene-seed", default_value_t = 0)]
    scene_seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    p_fn: Option<f64>,
    #[arg(long)]
    fp_rate: Option<f64>,
    /// Scene generator settings (TOML), applied before the flags above.
    #[arg(long)]
    synth_config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Above,
    Below,
}

struct Loaded {
    cfg: PipelineConfig,
    from_file: bool,
}

fn load_config(cli: &Cli) -> Result<Loaded> {
    let from_file = io::config_path(cli.config.as_deref()).is_some();
    let mut cfg = io::load_config(cli.config.as_deref())?;
    let o = &cli.overrides;
    let g = &mut cfg.graph;
    set(&mut g.window_len, o.window_len);
    set(&mut g.stride, o.stride);
    set(&mut g.k_past, o.k_past);
    set(&mut g.k_frame, o.k_frame);
    if let Some(c) = o.num_classes {
        cfg.graph.num_classes = c;
        cfg.model.num_classes = c;
    }
    set(&mut cfg.model.depth, o.depth);
    set(&mut cfg.model.hidden, o.hidden);
    set(&mut cfg.model.heads, o.heads);
    set(&mut cfg.train.beta, o.beta);
    set(&mut cfg.train.epochs, o.epochs);
    set(&mut cfg.train.lr, o.lr);
    set(&mut cfg.cluster.theta_min, o.theta_min);
    set(&mut cfg.cluster.theta_join, o.theta_join);
    set(&mut cfg.cluster.singleton_min_score, o.singleton_min_score);
    set(&mut cfg.postproc.still_iou_min, o.still_iou_min);
    set(&mut cfg.postproc.join_iou_min, o.join_iou_min);
    if o.no_postprocess {
        cfg.postprocess = false;
    }
    set(&mut cfg.gate.max_distance, o.gate);
    set(&mut cfg.recall_points, o.recall_points);
    if let Some(s) = o.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(Loaded { cfg, from_file })
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Without a configuration file the model hyperparameters come from the
/// weights header; with one they must agree with it.
fn load_weights(path: &Path, loaded: &mut Loaded) -> Result<ModelParams> {
    let params = io::load_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
    if !loaded.from_file {
        let keep_classes = loaded.cfg.model.num_classes;
        loaded.cfg.model = params.config.clone();
        if loaded.cfg.graph.num_classes != params.config.num_classes && loaded.cfg.graph.num_classes == keep_classes {
            loaded.cfg.graph.num_classes = params.config.num_classes;
        }
    }
    loaded.cfg.validate()?;
    loaded.cfg.check_weights(&params)?;
    Ok(params)
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    Ok(io::read_scenes(path)?)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    io::write_json(path, v).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut base = match &args.synth_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SceneConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneConfig::default(),
    };
    set(&mut base.frames, args.frames);
    set(&mut base.p_fn, args.p_fn);
    set(&mut base.fp_rate, args.fp_rate);
    let scenes = (0..args.scenes)
        .map(|k| {
            let s = generate_scene(&SceneConfig {
                seed: args.scene_seed + k as u64,
                ..base.clone()
            })?;
            Ok(Scene {
                id: format!("synth-{:04}", args.scene_seed + k as u64),
                detections: s.labeled_detections(),
                gt: Some(s.gt_tracks),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::save_scenes(&args.out, &scenes, base.frame_period)?;
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct GraphEdgeRecord {
    src: usize,
    dst: usize,
    feature: [f64; 5],
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

#[derive(Serialize)]
struct WindowRecord {
    window: Window,
    nodes: Vec<usize>,
    edges: Vec<GraphEdgeRecord>,
    frame_neighbors: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct SceneGraphs {
    id: String,
    windows: Vec<WindowRecord>,
}

#[derive(Serialize)]
struct GraphsFile {
    scenes: Vec<SceneGraphs>,
}

fn build_graphs(cfg: &PipelineConfig, scenes: &[Scene]) -> Result<GraphsFile> {
    let mut out = Vec::new();
    for s in scenes {
        let labeled = s.detections.iter().flatten().any(|d| d.gt_instance.is_some()) || s.gt.is_some();
        let dets = if labeled { labeled_detections(s, cfg.gate.max_distance)? } else { s.detections.clone() };
        let mut windows = Vec::new();
        for mut w in build_scene_graphs(&dets, &cfg.graph)? {
            if labeled {
                label_edges(&mut w.graph);
            }
            let g = &w.graph;
            windows.push(WindowRecord {
                window: g.window,
                nodes: g.nodes.iter().map(|n| n.global_id).collect(),
                edges: g
                    .edges
                    .iter()
                    .map(|e| GraphEdgeRecord {
                        src: g.nodes[e.src].global_id,
                        dst: g.nodes[e.dst].global_id,
                        feature: e.feature.0,
                        label: e.label,
                    })
                    .collect(),
                frame_neighbors: w.frame_knn.neighbors.iter().map(|nb| nb.iter().map(|&k| g.nodes[k].global_id).collect()).collect(),
            });
        }
        out.push(SceneGraphs { id: s.id.clone(), windows });
    }
    Ok(GraphsFile { scenes: out })
}

/// Sets modality widths from the data when the model still lists a
/// modality the scenes never carry or carry at another width.
fn fit_modalities(cfg: &mut PipelineConfig, scenes: &[Scene]) {
    let mut widths: BTreeMap<_, usize> = BTreeMap::new();
    for d in scenes.iter().flat_map(|s| s.detections.iter().flatten()) {
        for (tag, m) in &d.modalities {
            if m.present {
                widths.entry(*tag).or_insert(m.vector.len());
            }
        }
    }
    let tokens = cfg.model.modality_tokens;
    cfg.model.modalities = widths
        .into_iter()
        .filter(|(_, dim)| dim % tokens == 0)
        .map(|(tag, dim)| ModalitySpec { tag, dim })
        .collect();
}

fn train_toy(loaded: &Loaded, scenes_path: &Path, weights_out: &Path) -> Result<()> {
    let mut cfg = loaded.cfg.clone();
    let scenes = read_scenes(scenes_path)?;
    if scenes.is_empty() {
        bail!("{} holds no scenes to train on", scenes_path.display());
    }
    if !loaded.from_file {
        fit_modalities(&mut cfg, &scenes);
    }
    let labeled = scenes
        .iter()
        .map(|s| labeled_detections(s, cfg.gate.max_distance))
        .collect::<graphtrack::Result<Vec<_>>>()?;
    let counts = class_counts(&scenes, cfg.model.num_classes);
    let mut params = ModelParams::new(cfg.model.clone())?;
    let losses = train_on_scenes(&mut params, &labeled, &cfg.graph, &counts, &cfg.train)?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.6}", e + 1);
    }
    io::save_weights(weights_out, &params)?;
    println!("wrote {} parameters to {}", params.num_parameters(), weights_out.display());
    Ok(())
}

fn score_all(cfg: &PipelineConfig, params: &ModelParams, scenes: &[Scene]) -> Result<ScoresFile> {
    use rayon::prelude::*;
    let scenes = scenes
        .par_iter()
        .map(|s| {
            Ok(SceneScoreRecord {
                id: s.id.clone(),
                scores: score_scene(params, &s.detections, &cfg.graph)?,
            })
        })
        .collect::<graphtrack::Result<Vec<_>>>()?;
    Ok(ScoresFile { scenes })
}

fn scores_for<'a>(scores: &'a ScoresFile, id: &str) -> Result<&'a SceneScoreRecord> {
    scores
        .scenes
        .iter()
        .find(|s| s.id == id)
        .with_context(|| format!("no scores for scene {id:?}"))
}

fn tracks_for<'a>(tracks: &'a TracksFile, id: &str) -> Result<&'a SceneTracks> {
    tracks
        .scenes
        .iter()
        .find(|s| s.id == id)
        .with_context(|| format!("no tracks for scene {id:?}"))
}

fn entropy_file(records: Vec<SceneEntropy>, keep: FilterDirection) -> EntropyFile {
    let by_id: BTreeMap<String, f64> = records.iter().map(|r| (r.id.clone(), r.confidence.scene_entropy)).collect();
    let mean_entropy = if records.is_empty() {
        0.0
    } else {
        by_id.values().sum::<f64>() / by_id.len() as f64
    };
    EntropyFile {
        selected: filter_scenes(&by_id, keep).into_iter().collect(),
        scenes: records,
        mean_entropy,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Command::Synth(args) = &cli.command {
        return synth(args);
    }
    let mut loaded = load_config(&cli)?;
    match &cli.command {
        Command::Synth(_) => unreachable!("handled above"),
        Command::BuildGraphs { scenes, out } => {
            let scenes = read_scenes(scenes)?;
            write_json(out, &build_graphs(&loaded.cfg, &scenes)?)?;
        }
        Command::TrainToy { scenes, weights_out } => train_toy(&loaded, scenes, weights_out)?,
        Command::Infer { scenes, weights, out } => {
            let params = load_weights(weights, &mut loaded)?;
            let scenes = read_scenes(scenes)?;
            write_json(out, &score_all(&loaded.cfg, &params, &scenes)?)?;
        }
        Command::Cluster { scenes, scores, out } => {
            let scenes = read_scenes(scenes)?;
            let scores: ScoresFile = io::read_json(scores)?;
            let cfg = PipelineConfig {
                postprocess: false,
                ..loaded.cfg.clone()
            };
            let mut file = TracksFile::default();
            for s in &scenes {
                let sc = scores_for(&scores, &s.id)?;
                file.scenes.push(SceneTracks {
                    id: s.id.clone(),
                    tracks: tracks_from_scores(&s.detections, &sc.scores, &cfg)?,
                });
            }
            write_json(out, &file)?;
        }
        Command::Postprocess { tracks, out } => {
            let mut file: TracksFile = io::read_json(tracks)?;
            for s in &mut file.scenes {
                s.tracks = refine(&s.tracks, &loaded.cfg.postproc)?;
            }
            write_json(out, &file)?;
        }
        Command::Eval { scenes, tracks, out } => {
            let scenes = read_scenes(scenes)?;
            let tracks: TracksFile = io::read_json(tracks)?;
            let mut eval = Vec::new();
            for s in &scenes {
                if let Some(gt) = &s.gt {
                    eval.push(EvalScene {
                        pred: tracks_for(&tracks, &s.id)?.tracks.clone(),
                        gt: gt.clone(),
                    });
                }
            }
            let report = evaluate(&eval, &loaded.cfg.gate, loaded.cfg.recall_points)?;
            println!("AMOTA {:.4}  MOTA {:.4}  recall {:.4}", report.overall.amota, report.overall.mota, report.overall.recall);
            write_json(out, &report)?;
        }
        Command::Entropy { scores, out, keep } => {
            let scores: ScoresFile = io::read_json(scores)?;
            let records = scores
                .scenes
                .iter()
                .map(|s| {
                    Ok(SceneEntropy {
                        id: s.id.clone(),
                        confidence: scene_confidence(&s.scores)?,
                    })
                })
                .collect::<graphtrack::Result<Vec<_>>>()?;
            let dir = match keep {
                Direction::Above => FilterDirection::AboveMean,
                Direction::Below => FilterDirection::BelowMean,
            };
            write_json(out, &entropy_file(records, dir))?;
        }
        Command::Pipeline { scenes, weights, out_dir } => {
            let params = load_weights(weights, &mut loaded)?;
            let scenes = read_scenes(scenes)?;
            let output = run_pipeline(&loaded.cfg, &scenes, &params)?;
            std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let tracks = TracksFile {
                scenes: output
                    .scenes
                    .iter()
                    .map(|s: &SceneOutput| SceneTracks {
                        id: s.id.clone(),
                        tracks: s.tracks.clone(),
                    })
                    .collect(),
            };
            write_json(&out_dir.join("tracks.json"), &tracks)?;
            io::write_plot_data(&out_dir.join("plot.jsonl"), &tracks.scenes)?;
            let records = output
                .scenes
                .iter()
                .map(|s| SceneEntropy {
                    id: s.id.clone(),
                    confidence: s.confidence.clone(),
                })
                .collect();
            write_json(&out_dir.join("entropy.json"), &entropy_file(records, FilterDirection::AboveMean))?;
            let report = match output.report {
                Some(r) => Some(r),
                None => evaluate_outputs(&scenes, &output.scenes, &loaded.cfg)?,
            };
            if let Some(r) = report {
                println!("AMOTA {:.4}  MOTA {:.4}  recall {:.4}", r.overall.amota, r.overall.mota, r.overall.recall);
                write_json(&out_dir.join("report.json"), &r)?;
            }
            println!(
                "{} scenes, {} tracks -> {}",
                output.scenes.len(),
                output.scenes.iter().map(|s| s.tracks.len()).sum::<usize>(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
