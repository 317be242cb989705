//! Seeded synthetic driving scenes: ground-truth trajectories plus noisy,
//! incomplete detections with clutter and intermittent sensor embeddings.
//!
//! Also hosts the frame-to-frame greedy IoU tracker used as a comparison
//! floor.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Detection3D, ModalityEmbedding, ModalityTag};
use crate::geometry::{bev_iou, wrap_unchecked, Box3D};
use crate::graph::GtBox;
use crate::track::{TrackState, Trajectory, TrajectorySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub class_id: usize,
    /// Relative spawn frequency.
    pub weight: f64,
    /// Mean `(w, l, h)`.
    pub size: [f64; 3],
    /// Typical speed of a moving instance, m/s.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub center_sigma: f64,
    pub yaw_sigma: f64,
    pub velocity_sigma: f64,
    /// Relative jitter of each box dimension.
    pub size_sigma: f64,
    /// Uniform score range of true detections.
    pub true_score: [f64; 2],
    /// Uniform score range of clutter.
    pub clutter_score: [f64; 2],
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            center_sigma: 0.15,
            yaw_sigma: 0.05,
            velocity_sigma: 0.3,
            size_sigma: 0.03,
            true_score: [0.35, 1.0],
            clutter_score: [0.05, 0.6],
        }
    }
}

/// Presence of one sensor embedding, falling linearly with range from
/// `presence_near` at the ego to `presence_far` at the scene edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityModel {
    pub tag: ModalityTag,
    pub dim: usize,
    pub presence_near: f64,
    pub presence_far: f64,
}

impl ModalityModel {
    fn presence(&self, range: f64, extent: f64) -> f64 {
        let t = (range / extent).min(1.0);
        self.presence_near + (self.presence_far - self.presence_near) * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    /// Seconds between frames.
    pub frame_period: f64,
    pub classes: Vec<ClassPrior>,
    /// Inclusive range of the number of instances per scene.
    pub objects: [usize; 2],
    pub noise: NoiseModel,
    pub p_fn: f64,
    /// Mean number of clutter detections per frame (Poisson).
    pub fp_rate: f64,
    pub p_yaw_flip: f64,
    /// Fraction of instances that never move.
    pub p_static: f64,
    /// Standard deviation of the per-instance turn rate, rad/s.
    pub turn_sigma: f64,
    /// Shortest lifetime of an instance, in frames.
    pub min_lifetime: usize,
    /// Half side of the square scene, meters.
    pub extent: f64,
    pub modalities: Vec<ModalityModel>,
    pub embedding_noise: f64,
    pub clutter_prototypes: usize,
    /// Seed of the clutter prototype pool, shared by every scene.
    pub clutter_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 40,
            frame_period: 0.5,
            classes: vec![
                ClassPrior {
                    class_id: 0,
                    weight: 0.5,
                    size: [1.9, 4.6, 1.7],
                    speed: 7.0,
                },
                ClassPrior {
                    class_id: 1,
                    weight: 0.3,
                    size: [0.7, 0.7, 1.8],
                    speed: 1.3,
                },
                ClassPrior {
                    class_id: 2,
                    weight: 0.2,
                    size: [0.7, 1.8, 1.5],
                    speed: 4.0,
                },
            ],
            objects: [6, 12],
            noise: NoiseModel::default(),
            p_fn: 0.15,
            fp_rate: 2.0,
            p_yaw_flip: 0.03,
            p_static: 0.3,
            turn_sigma: 0.05,
            min_lifetime: 5,
            extent: 50.0,
            modalities: vec![
                ModalityModel {
                    tag: ModalityTag::Camera,
                    dim: 64,
                    presence_near: 0.9,
                    presence_far: 0.7,
                },
                ModalityModel {
                    tag: ModalityTag::Lidar,
                    dim: 128,
                    presence_near: 0.95,
                    presence_far: 0.2,
                },
            ],
            embedding_noise: 0.3,
            clutter_prototypes: 4,
            clutter_seed: 0x5eed,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")))
            }
        };
        let sigma = |name: &str, s: f64| {
            if s >= 0.0 && s.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {s} must be a finite non-negative deviation")))
            }
        };
        if self.frames == 0 {
            return bad("a scene needs at least one frame".into());
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return bad(format!("frame_period {} must be positive", self.frame_period));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad(format!("extent {} must be positive", self.extent));
        }
        if self.classes.is_empty() {
            return bad("at least one class prior is required".into());
        }
        for c in &self.classes {
            if !(c.weight > 0.0 && c.weight.is_finite()) || c.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return bad(format!("class {} needs a positive weight and size", c.class_id));
            }
            sigma("class speed", c.speed)?;
        }
        if self.objects[0] > self.objects[1] {
            return bad(format!("object range {:?} is empty", self.objects));
        }
        prob("p_fn", self.p_fn)?;
        prob("p_yaw_flip", self.p_yaw_flip)?;
        prob("p_static", self.p_static)?;
        sigma("fp_rate", self.fp_rate)?;
        sigma("turn_sigma", self.turn_sigma)?;
        sigma("embedding_noise", self.embedding_noise)?;
        let n = &self.noise;
        sigma("center_sigma", n.center_sigma)?;
        sigma("yaw_sigma", n.yaw_sigma)?;
        sigma("velocity_sigma", n.velocity_sigma)?;
        sigma("size_sigma", n.size_sigma)?;
        for (name, [lo, hi]) in [("true_score", n.true_score), ("clutter_score", n.clutter_score)] {
            prob(name, lo)?;
            prob(name, hi)?;
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        for (k, m) in self.modalities.iter().enumerate() {
            prob("presence_near", m.presence_near)?;
            prob("presence_far", m.presence_far)?;
            if m.dim == 0 {
                return bad(format!("modality {} has zero width", m.tag));
            }
            if self.modalities[..k].iter().any(|o| o.tag == m.tag) {
                return bad(format!("modality {} listed twice", m.tag));
            }
        }
        if self.clutter_prototypes == 0 && !self.modalities.is_empty() && self.fp_rate > 0.0 {
            return bad("clutter needs at least one embedding prototype".into());
        }
        Ok(())
    }

    /// Highest class id plus one.
    pub fn num_classes(&self) -> usize {
        self.classes.iter().map(|c| c.class_id + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub gt_tracks: TrajectorySet,
    /// Detections per frame, without ground-truth ids.
    pub detections: Vec<Vec<Detection3D>>,
    /// Generating instance of every detection; `None` for clutter.
    pub provenance: Vec<Vec<Option<u64>>>,
}

impl SyntheticScene {
    pub fn num_frames(&self) -> usize {
        self.detections.len()
    }

    /// Ground-truth boxes grouped by frame.
    pub fn annotations(&self) -> Vec<Vec<GtBox>> {
        let mut out = vec![Vec::new(); self.num_frames()];
        for t in &self.gt_tracks.tracks {
            for s in &t.states {
                out[s.frame_index].push(GtBox {
                    instance: t.track_id,
                    class_id: t.class_id,
                    bbox: s.bbox,
                });
            }
        }
        out
    }

    /// Detections with `gt_instance` set from the exact provenance.
    pub fn labeled_detections(&self) -> Vec<Vec<Detection3D>> {
        self.detections
            .iter()
            .zip(&self.provenance)
            .map(|(dets, prov)| {
                dets.iter()
                    .zip(prov)
                    .map(|(d, p)| Detection3D { gt_instance: *p, ..d.clone() })
                    .collect()
            })
            .collect()
    }
}

struct Instance {
    id: u64,
    class_id: usize,
    size: [f64; 3],
    position: [f64; 2],
    heading: f64,
    speed: f64,
    turn_rate: f64,
    birth: usize,
    death: usize,
    prototypes: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gaussian(rng, 1.0)).collect()
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn clutter_pool(cfg: &SceneConfig) -> Vec<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.clutter_seed);
    (0..cfg.clutter_prototypes)
        .map(|_| cfg.modalities.iter().map(|m| unit_vector(&mut rng, m.dim)).collect())
        .collect()
}

fn embeddings(rng: &mut ChaCha8Rng, cfg: &SceneConfig, prototypes: &[Vec<f64>], range: f64) -> BTreeMap<ModalityTag, ModalityEmbedding> {
    cfg.modalities
        .iter()
        .zip(prototypes)
        .map(|(m, proto)| {
            let e = if rng.random_bool(m.presence(range, cfg.extent)) {
                ModalityEmbedding::present(m.tag, proto.iter().map(|&v| v + gaussian(rng, cfg.embedding_noise)).collect())
            } else {
                ModalityEmbedding::absent(m.tag, m.dim)
            };
            (m.tag, e)
        })
        .collect()
}

fn jitter_size(rng: &mut ChaCha8Rng, size: [f64; 3], rel: f64) -> [f64; 3] {
    size.map(|s| s * (1.0 + gaussian(rng, rel)).max(0.5))
}

fn spawn(rng: &mut ChaCha8Rng, cfg: &SceneConfig, id: u64, pick: &WeightedIndex<f64>) -> Instance {
    let prior = &cfg.classes[pick.sample(rng)];
    let moving = !rng.random_bool(cfg.p_static);
    let speed = if moving { prior.speed * rng.random_range(0.6..1.4) } else { 0.0 };
    let reach = 0.8 * cfg.extent;
    let birth = if cfg.frames > 1 && rng.random_bool(0.5) { rng.random_range(0..cfg.frames) } else { 0 };
    let min_life = cfg.min_lifetime.clamp(1, cfg.frames);
    let death = (birth + rng.random_range(min_life..=cfg.frames)).min(cfg.frames);
    Instance {
        id,
        class_id: prior.class_id,
        size: jitter_size(rng, prior.size, 0.05),
        position: [rng.random_range(-reach..reach), rng.random_range(-reach..reach)],
        heading: rng.random_range(-PI..PI),
        speed,
        turn_rate: if moving { gaussian(rng, cfg.turn_sigma) } else { 0.0 },
        birth,
        death,
        prototypes: cfg.modalities.iter().map(|m| unit_vector(rng, m.dim)).collect(),
    }
}

/// Generates one scene; a pure function of `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<f64> = cfg.classes.iter().map(|c| c.weight).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("class weights: {e}")))?;
    let clutter_classes = WeightedIndex::new(vec![1.0; cfg.classes.len()]).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pool = clutter_pool(cfg);
    let clutter_count = if cfg.fp_rate > 0.0 {
        Some(Poisson::new(cfg.fp_rate).map_err(|e| Error::InvalidArgument(format!("fp_rate: {e}")))?)
    } else {
        None
    };
    let n_obj = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let mut instances: Vec<Instance> = (0..n_obj).map(|k| spawn(&mut rng, cfg, k as u64 + 1, &pick)).collect();

    let mut gt: BTreeMap<u64, Vec<TrackState>> = BTreeMap::new();
    let mut detections = Vec::with_capacity(cfg.frames);
    let mut provenance = Vec::with_capacity(cfg.frames);
    let dt = cfg.frame_period;
    let n = &cfg.noise;
    for f in 0..cfg.frames {
        let t = f as f64 * dt;
        let mut frame: Vec<(Detection3D, Option<u64>)> = Vec::new();
        for inst in &mut instances {
            if f > inst.birth && f < inst.death {
                inst.heading = wrap_unchecked(inst.heading + inst.turn_rate * dt);
                inst.position[0] += inst.speed * inst.heading.cos() * dt;
                inst.position[1] += inst.speed * inst.heading.sin() * dt;
            }
            let inside = inst.position.iter().all(|p| p.abs() <= cfg.extent);
            if !inside && f >= inst.birth {
                inst.death = inst.death.min(f);
            }
            if f < inst.birth || f >= inst.death {
                continue;
            }
            let vel = [inst.speed * inst.heading.cos(), inst.speed * inst.heading.sin()];
            let bbox = Box3D::new([inst.position[0], inst.position[1], 0.5 * inst.size[2]], inst.size, inst.heading)?;
            gt.entry(inst.id).or_default().push(TrackState {
                frame_index: f,
                bbox,
                velocity: vel,
                score: 1.0,
            });
            if rng.random_bool(cfg.p_fn) {
                continue;
            }
            let mut yaw = inst.heading + gaussian(&mut rng, n.yaw_sigma);
            if rng.random_bool(cfg.p_yaw_flip) {
                yaw += PI;
            }
            let center = [
                bbox.center[0] + gaussian(&mut rng, n.center_sigma),
                bbox.center[1] + gaussian(&mut rng, n.center_sigma),
                bbox.center[2] + gaussian(&mut rng, 0.5 * n.center_sigma),
            ];
            let size = jitter_size(&mut rng, inst.size, n.size_sigma);
            let v = [vel[0] + gaussian(&mut rng, n.velocity_sigma), vel[1] + gaussian(&mut rng, n.velocity_sigma)];
            let score = uniform(&mut rng, n.true_score);
            let mut det = Detection3D::new(Box3D::new(center, size, wrap_unchecked(yaw))?, v, inst.class_id, score, f, t);
            det.modalities = embeddings(&mut rng, cfg, &inst.prototypes, center[0].hypot(center[1]));
            frame.push((det, Some(inst.id)));
        }
        let clutter = clutter_count.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..clutter {
            let prior = &cfg.classes[clutter_classes.sample(&mut rng)];
            let center = [
                rng.random_range(-cfg.extent..cfg.extent),
                rng.random_range(-cfg.extent..cfg.extent),
                0.5 * prior.size[2],
            ];
            let speed = prior.speed * rng.random_range(0.0..1.0);
            let heading = rng.random_range(-PI..PI);
            let size = jitter_size(&mut rng, prior.size, 0.1);
            let score = uniform(&mut rng, n.clutter_score);
            let mut det = Detection3D::new(
                Box3D::new(center, size, heading)?,
                [speed * heading.cos(), speed * heading.sin()],
                prior.class_id,
                score,
                f,
                t,
            );
            if !pool.is_empty() {
                let proto = &pool[rng.random_range(0..pool.len())];
                det.modalities = embeddings(&mut rng, cfg, proto, center[0].hypot(center[1]));
            }
            frame.push((det, None));
        }
        frame.shuffle(&mut rng);
        let (dets, prov): (Vec<_>, Vec<_>) = frame.into_iter().unzip();
        detections.push(dets);
        provenance.push(prov);
    }

    let class_of: BTreeMap<u64, usize> = instances.iter().map(|i| (i.id, i.class_id)).collect();
    let gt_tracks = TrajectorySet::new(
        gt.into_iter()
            .map(|(id, states)| Trajectory {
                track_id: id,
                class_id: class_of[&id],
                states,
            })
            .collect(),
    );
    Ok(SyntheticScene {
        gt_tracks,
        detections,
        provenance,
    })
}

/// Number of ground-truth instances per class over `scenes`, indexed by
/// class id up to `num_classes`.
pub fn instance_counts(scenes: &[SyntheticScene], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for t in scenes.iter().flat_map(|s| &s.gt_tracks.tracks) {
        if let Some(c) = counts.get_mut(t.class_id) {
            *c += 1;
        }
    }
    counts
}

/// Frame-to-frame greedy association without a motion model: every track
/// alive in the previous frame is offered to same-class detections of the
/// current frame in descending BEV-IoU order, down to `iou_min`. A track
/// missing one frame is never resumed.
pub fn oracle_greedy_baseline(detections: &[Vec<Detection3D>], iou_min: f64) -> Result<TrajectorySet> {
    let mut tracks: Vec<Trajectory> = Vec::new();
    let mut alive: Vec<usize> = Vec::new();
    for (f, dets) in detections.iter().enumerate() {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (a, &ti) in alive.iter().enumerate() {
            let t = &tracks[ti];
            let last = t.states.last().expect("alive track has a state");
            for (d, det) in dets.iter().enumerate() {
                if det.class_id != t.class_id {
                    continue;
                }
                let iou = bev_iou(&last.bbox, &det.bbox)?;
                if iou >= iou_min && iou > 0.0 {
                    pairs.push((iou, a, d));
                }
            }
        }
        pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut track_used = vec![false; alive.len()];
        let mut owner: Vec<Option<usize>> = vec![None; dets.len()];
        for (_, a, d) in pairs {
            if !track_used[a] && owner[d].is_none() {
                track_used[a] = true;
                owner[d] = Some(alive[a]);
            }
        }
        let mut next_alive = Vec::with_capacity(dets.len());
        for (d, det) in dets.iter().enumerate() {
            let mut state = TrackState::from(det);
            state.frame_index = f;
            let ti = match owner[d] {
                Some(ti) => ti,
                None => {
                    tracks.push(Trajectory {
                        track_id: tracks.len() as u64,
                        class_id: det.class_id,
                        states: Vec::new(),
                    });
                    tracks.len() - 1
                }
            };
            tracks[ti].states.push(state);
            next_alive.push(ti);
        }
        next_alive.sort_unstable();
        alive = next_alive;
    }
    Ok(TrajectorySet::new(tracks))
}
