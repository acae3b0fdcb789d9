//! Synthetic scene generation, per-point label derivation, object rotation
//! augmentation and the `.scene.json` file format.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EonError, Result};
use crate::geometry::{bev_iou, dist2, rotate_point_about, OrientedBox, Vec3};
use crate::rotgroup::{wrap_angle, CyclicGroup};

pub const SCENE_FORMAT_VERSION: u32 = 1;
const MAX_PLACEMENT_REJECTIONS: usize = 1000;
const TEMPLATE_CLOUD_POINTS: usize = 512;
const TEMPLATE_CLOUD_SEED: u64 = 0x5eed_7e3f;
/// Minimum Chamfer distance between a template and any non-trivial rotation of it.
pub const ASYMMETRY_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Cuboid {
    center: Vec3,
    size: Vec3,
}

/// Canonical (yaw 0) object shape built from axis-aligned cuboid parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTemplate {
    pub class_id: usize,
    pub name: String,
    pub box_size: Vec3,
    parts: Vec<Cuboid>,
    pub canonical_cloud: Vec<Vec3>,
}

impl ShapeTemplate {
    fn from_parts(class_id: usize, name: &str, parts: Vec<Cuboid>) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &parts {
            for i in 0..3 {
                lo[i] = lo[i].min(p.center[i] - 0.5 * p.size[i]);
                hi[i] = hi[i].max(p.center[i] + 0.5 * p.size[i]);
            }
        }
        // Recenter so the bounding box is centered at the origin.
        let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
        let parts: Vec<Cuboid> = parts
            .into_iter()
            .map(|p| Cuboid {
                center: [p.center[0] - mid[0], p.center[1] - mid[1], p.center[2] - mid[2]],
                size: p.size,
            })
            .collect();
        let box_size = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        let mut t = Self {
            class_id,
            name: name.to_string(),
            box_size,
            parts,
            canonical_cloud: Vec::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_CLOUD_SEED + class_id as u64);
        t.canonical_cloud = (0..TEMPLATE_CLOUD_POINTS)
            .map(|_| t.sample_surface(&mut rng))
            .collect();
        t
    }

    /// Uniform sample on the union of part surfaces (area weighted).
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let faces: Vec<(&Cuboid, usize, f64, f64)> = self
            .parts
            .iter()
            .flat_map(|p| {
                let areas = [p.size[1] * p.size[2], p.size[0] * p.size[2], p.size[0] * p.size[1]];
                (0..3).flat_map(move |axis| [(p, axis, -1.0, areas[axis]), (p, axis, 1.0, areas[axis])])
            })
            .collect();
        let total: f64 = faces.iter().map(|f| f.3).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = faces[faces.len() - 1];
        for f in &faces {
            if pick < f.3 {
                chosen = *f;
                break;
            }
            pick -= f.3;
        }
        let (part, axis, side, _) = chosen;
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = if i == axis {
                part.center[i] + side * 0.5 * part.size[i]
            } else {
                part.center[i] + (rng.random::<f64>() - 0.5) * part.size[i]
            };
        }
        p
    }

    /// Smallest Chamfer distance between the canonical cloud and its rotation
    /// by any non-identity element of `group`.
    pub fn min_rotated_chamfer(&self, group: &CyclicGroup) -> f64 {
        group
            .elements()
            .filter(|g| !g.is_identity())
            .map(|g| {
                let (c, s) = g.cos_sin();
                let rotated: Vec<Vec3> = self
                    .canonical_cloud
                    .iter()
                    .map(|p| rotate_point_about(*p, [0.0; 3], c, s))
                    .collect();
                chamfer_distance(&self.canonical_cloud, &rotated)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_asymmetric(&self, group: &CyclicGroup) -> Result<()> {
        let d = self.min_rotated_chamfer(group);
        if group.order() > 1 && d <= ASYMMETRY_THRESHOLD {
            return Err(EonError::Config(format!(
                "template `{}` is rotationally self-similar under C{} (chamfer {d:.4} m)",
                self.name,
                group.order()
            )));
        }
        Ok(())
    }
}

/// Symmetric mean nearest-neighbor distance.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one_way = |x: &[Vec3], y: &[Vec3]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist2(*p, *q)).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

fn cuboid(x0: f64, x1: f64, y0: f64, y1: f64, z0: f64, z1: f64) -> Cuboid {
    Cuboid {
        center: [0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.5 * (z0 + z1)],
        size: [x1 - x0, y1 - y0, z1 - z0],
    }
}

/// The three built-in shapes: `L-plate`, `T-plate` and the thin `wedge-bar`.
pub fn default_templates() -> Vec<ShapeTemplate> {
    let l_plate = ShapeTemplate::from_parts(
        0,
        "L-plate",
        vec![
            cuboid(-0.5, 0.5, -0.4, -0.15, 0.0, 0.5),
            cuboid(-0.5, -0.25, -0.15, 0.4, 0.0, 0.5),
        ],
    );
    let t_plate = ShapeTemplate::from_parts(
        1,
        "T-plate",
        vec![
            cuboid(-0.5, 0.5, 0.2, 0.45, 0.0, 0.4),
            cuboid(-0.15, 0.15, -0.45, 0.2, 0.0, 0.4),
        ],
    );
    let steps = 4;
    let wedge_parts = (0..steps)
        .map(|i| {
            let x0 = -0.6 + 1.2 * i as f64 / steps as f64;
            let x1 = -0.6 + 1.2 * (i + 1) as f64 / steps as f64;
            let h = 0.15 + 0.55 * (i + 1) as f64 / steps as f64;
            cuboid(x0, x1, -0.125, 0.125, 0.0, h)
        })
        .collect();
    let wedge = ShapeTemplate::from_parts(2, "wedge-bar", wedge_parts);
    vec![l_plate, t_plate, wedge]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawMode {
    /// Yaws exactly on group angles.
    Grid,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGenConfig {
    pub group_order: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<usize>,
    /// Placement area extents `(x, y)` in meters, centered at the origin.
    pub area: [f64; 2],
    pub min_separation: f64,
    pub points_per_object: usize,
    /// Floor points per square meter.
    pub floor_density: f64,
    pub wall_points: usize,
    pub noise_sigma: f64,
    pub yaw_mode: YawMode,
    pub seed: u64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            group_order: 4,
            min_objects: 2,
            max_objects: 4,
            classes: vec![0, 1, 2],
            area: [5.0, 5.0],
            min_separation: 0.3,
            points_per_object: 96,
            floor_density: 8.0,
            wall_points: 64,
            noise_sigma: 0.005,
            yaw_mode: YawMode::Uniform,
            seed: 7,
        }
    }
}

impl SceneGenConfig {
    /// Grid-yaw objects on an empty ground, pairwise farther apart than `gap`.
    pub fn isolated(group_order: usize, gap: f64) -> Self {
        Self {
            group_order,
            min_objects: 2,
            max_objects: 3,
            area: [14.0, 14.0],
            min_separation: gap,
            floor_density: 0.0,
            wall_points: 0,
            yaw_mode: YawMode::Grid,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        CyclicGroup::new(self.group_order)?;
        if self.min_objects > self.max_objects {
            return Err(EonError::Config("min_objects exceeds max_objects".into()));
        }
        if self.max_objects > 0 && (self.classes.is_empty() || self.points_per_object == 0) {
            return Err(EonError::Config(
                "objects require a non-empty class set and positive points_per_object".into(),
            ));
        }
        let n_templates = default_templates().len();
        if let Some(c) = self.classes.iter().find(|c| **c >= n_templates) {
            return Err(EonError::Config(format!("unknown class id {c}")));
        }
        if !(self.noise_sigma >= 0.0) || !(self.floor_density >= 0.0) || !(self.min_separation >= 0.0) {
            return Err(EonError::Config(
                "noise_sigma, floor_density and min_separation must be non-negative".into(),
            ));
        }
        if !(self.area[0] > 0.0 && self.area[1] > 0.0) {
            return Err(EonError::Config("area extents must be positive".into()));
        }
        Ok(())
    }

    pub fn group(&self) -> Result<CyclicGroup> {
        CyclicGroup::new(self.group_order)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneLabels {
    pub foreground: Vec<bool>,
    /// Bin index for foreground points, `-1` for background.
    pub orientation_bin: Vec<i64>,
    pub vote_target: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub group_order: usize,
    pub points: Vec<Vec3>,
    /// `-1` for background.
    pub object_id: Vec<i64>,
    /// `-1` for background.
    pub class_id: Vec<i64>,
    pub gt_boxes: Vec<OrientedBox>,
    pub labels: SceneLabels,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn group(&self) -> Result<CyclicGroup> {
        CyclicGroup::new(self.group_order)
    }

    /// Checks every scene invariant.
    pub fn validate(&self) -> Result<()> {
        let p = self.points.len();
        let lens = [
            self.object_id.len(),
            self.class_id.len(),
            self.labels.foreground.len(),
            self.labels.orientation_bin.len(),
            self.labels.vote_target.len(),
        ];
        if lens.iter().any(|l| *l != p) {
            return Err(EonError::LabelConsistency(format!(
                "per-point array lengths {lens:?} differ from point count {p}"
            )));
        }
        let group = self.group()?;
        let relabeled = derive_labels(&self.points, &self.object_id, &self.gt_boxes, &group)?;
        for i in 0..p {
            let oid = self.object_id[i];
            if oid >= 0 {
                let b = &self.gt_boxes[oid as usize];
                if self.class_id[i] != b.class_id as i64 {
                    return Err(EonError::LabelConsistency(format!(
                        "point {i} class {} differs from box class {}",
                        self.class_id[i], b.class_id
                    )));
                }
            }
        }
        if relabeled != self.labels {
            return Err(EonError::LabelConsistency(
                "stored labels differ from labels derived from boxes".into(),
            ));
        }
        Ok(())
    }

    /// Indices of the points assigned to `object_id`.
    pub fn object_points(&self, object_id: usize) -> Vec<usize> {
        self.object_id
            .iter()
            .enumerate()
            .filter(|(_, o)| **o == object_id as i64)
            .map(|(i, _)| i)
            .collect()
    }

    /// Rotates one object (its points and box) about its box's vertical axis.
    /// `cos`/`sin` are passed explicitly so exact quarter turns stay exact.
    pub fn rotate_object(&self, object_id: usize, angle: f64, cos: f64, sin: f64) -> Result<Scene> {
        let Some(b) = self.gt_boxes.get(object_id) else {
            return Err(EonError::InvalidArgument(format!(
                "object {object_id} not in scene ({} objects)",
                self.gt_boxes.len()
            )));
        };
        let pivot = b.center;
        let mut out = self.clone();
        for i in self.object_points(object_id) {
            out.points[i] = rotate_point_about(self.points[i], pivot, cos, sin);
        }
        out.gt_boxes[object_id].yaw = wrap_angle(b.yaw + angle);
        out.labels = derive_labels(&out.points, &out.object_id, &out.gt_boxes, &self.group()?)?;
        Ok(out)
    }

    /// Rotates the whole scene about the origin.
    pub fn rotate_scene(&self, angle: f64, cos: f64, sin: f64) -> Result<Scene> {
        let mut out = self.clone();
        for p in out.points.iter_mut() {
            *p = rotate_point_about(*p, [0.0; 3], cos, sin);
        }
        for b in out.gt_boxes.iter_mut() {
            b.center = rotate_point_about(b.center, [0.0; 3], cos, sin);
            b.yaw = wrap_angle(b.yaw + angle);
        }
        out.labels = derive_labels(&out.points, &out.object_id, &out.gt_boxes, &self.group()?)?;
        Ok(out)
    }
}

/// Foreground mask, orientation bins and vote targets from boxes.
///
/// Points assigned to an object must lie inside its box. Unassigned points
/// that fall inside some box are labeled with the first containing box.
pub fn derive_labels(
    points: &[Vec3],
    object_id: &[i64],
    gt_boxes: &[OrientedBox],
    group: &CyclicGroup,
) -> Result<SceneLabels> {
    if points.len() != object_id.len() {
        return Err(EonError::LabelConsistency(format!(
            "{} points but {} object assignments",
            points.len(),
            object_id.len()
        )));
    }
    let bins = gt_boxes
        .iter()
        .map(|b| group.angle_to_bin(b.yaw).map(|g| g.index() as i64))
        .collect::<Result<Vec<_>>>()?;
    let n = points.len();
    let mut labels = SceneLabels {
        foreground: vec![false; n],
        orientation_bin: vec![-1; n],
        vote_target: vec![[0.0; 3]; n],
    };
    for (i, (p, oid)) in points.iter().zip(object_id).enumerate() {
        let owner = if *oid >= 0 {
            let b = gt_boxes.get(*oid as usize).ok_or_else(|| {
                EonError::LabelConsistency(format!("point {i} assigned to missing object {oid}"))
            })?;
            if !b.contains(*p) {
                return Err(EonError::LabelConsistency(format!(
                    "point {i} assigned to object {oid} lies outside its box"
                )));
            }
            Some(*oid as usize)
        } else {
            gt_boxes.iter().position(|b| b.contains(*p))
        };
        if let Some(k) = owner {
            let c = gt_boxes[k].center;
            labels.foreground[i] = true;
            labels.orientation_bin[i] = bins[k];
            labels.vote_target[i] = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
        }
    }
    Ok(labels)
}

fn half_diagonal(size: Vec3) -> f64 {
    0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt()
}

/// Deterministic synthetic scene for `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let group = cfg.group()?;
    let templates = default_templates();
    for c in &cfg.classes {
        templates[*c].check_asymmetric(&group)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0))
        .map_err(|e| EonError::Config(format!("noise distribution: {e}")))?;
    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        if cfg.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };

    let n_objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let [ax, ay] = cfg.area;
    let mut boxes: Vec<OrientedBox> = Vec::with_capacity(n_objects);
    let mut rejections = 0;
    while boxes.len() < n_objects {
        let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
        let size = templates[class].box_size;
        let yaw = match cfg.yaw_mode {
            YawMode::Grid => group.element(rng.random_range(0..group.order()))?.angle(),
            YawMode::Uniform => rng.random_range(-PI..PI),
        };
        let r = half_diagonal(size);
        let (mx, my) = (0.5 * ax - r, 0.5 * ay - r);
        if mx <= 0.0 || my <= 0.0 {
            return Err(EonError::GenerationFailure {
                seed,
                reason: "placement area smaller than an object".into(),
            });
        }
        let center = [
            rng.random_range(-mx..mx),
            rng.random_range(-my..my),
            0.5 * size[2],
        ];
        let candidate = OrientedBox::new(center, size, yaw, class)?;
        let clear = boxes.iter().all(|b| {
            let dx = b.center[0] - center[0];
            let dy = b.center[1] - center[1];
            let gap = (dx * dx + dy * dy).sqrt() - r - half_diagonal(b.size);
            gap >= cfg.min_separation && bev_iou(b, &candidate) == 0.0
        });
        if clear {
            boxes.push(candidate);
        } else {
            rejections += 1;
            if rejections >= MAX_PLACEMENT_REJECTIONS {
                return Err(EonError::GenerationFailure {
                    seed,
                    reason: format!(
                        "could not place object {} after {MAX_PLACEMENT_REJECTIONS} rejections",
                        boxes.len()
                    ),
                });
            }
        }
    }

    let mut points = Vec::new();
    let mut object_id = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        let t = &templates[b.class_id];
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..cfg.points_per_object {
            let mut p = t.sample_surface(&mut rng);
            for i in 0..3 {
                p[i] = (p[i] + jitter(&mut rng)).clamp(-0.5 * t.box_size[i], 0.5 * t.box_size[i]);
            }
            let world = rotate_point_about(p, [0.0; 3], c, s);
            points.push([world[0] + b.center[0], world[1] + b.center[1], world[2] + b.center[2]]);
            object_id.push(k as i64);
        }
    }

    let floor_count = (cfg.floor_density * ax * ay).round() as usize;
    for _ in 0..floor_count {
        let p = [
            rng.random_range(-0.5 * ax..0.5 * ax),
            rng.random_range(-0.5 * ay..0.5 * ay),
            jitter(&mut rng),
        ];
        // Floor under an object is occluded; keep background strictly outside boxes.
        let q = [p[0], p[1], 0.0];
        if boxes.iter().any(|b| b.contains(q) || b.contains(p)) {
            continue;
        }
        points.push(p);
        object_id.push(-1);
    }
    if cfg.wall_points > 0 {
        let wall_height = 1.5;
        for _ in 0..cfg.wall_points {
            let p = [
                rng.random_range(-0.5 * ax..0.5 * ax),
                0.5 * ay + 0.1 + jitter(&mut rng),
                rng.random_range(0.0..wall_height),
            ];
            points.push(p);
            object_id.push(-1);
        }
        for _ in 0..cfg.wall_points {
            let p = [
                0.5 * ax + 0.1 + jitter(&mut rng),
                rng.random_range(-0.5 * ay..0.5 * ay),
                rng.random_range(0.0..wall_height),
            ];
            points.push(p);
            object_id.push(-1);
        }
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    let points: Vec<Vec3> = order.iter().map(|i| points[*i]).collect();
    let object_id: Vec<i64> = order.iter().map(|i| object_id[*i]).collect();
    let class_id = object_id
        .iter()
        .map(|o| if *o >= 0 { boxes[*o as usize].class_id as i64 } else { -1 })
        .collect();
    let labels = derive_labels(&points, &object_id, &boxes, &group)?;
    Ok(Scene {
        group_order: cfg.group_order,
        points,
        object_id,
        class_id,
        gt_boxes: boxes,
        labels,
    })
}

/// Rotates every object's member points about its box axis by an
/// independent angle in `±max_degrees`, updating yaws and labels.
pub fn object_rotation_augment(scene: &Scene, max_degrees: f64, seed: u64) -> Result<Scene> {
    if !(max_degrees >= 0.0) {
        return Err(EonError::InvalidArgument(format!(
            "max_degrees must be non-negative, got {max_degrees}"
        )));
    }
    if max_degrees == 0.0 {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = max_degrees.to_radians();
    let mut out = scene.clone();
    for k in 0..scene.gt_boxes.len() {
        let angle = rng.random_range(-max..=max);
        let (s, c) = angle.sin_cos();
        let pivot = out.gt_boxes[k].center;
        for i in scene.object_points(k) {
            out.points[i] = rotate_point_about(out.points[i], pivot, c, s);
        }
        out.gt_boxes[k].yaw = wrap_angle(out.gt_boxes[k].yaw + angle);
    }
    out.labels = derive_labels(&out.points, &out.object_id, &out.gt_boxes, &scene.group()?)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    center: Vec3,
    size: Vec3,
    yaw: f64,
    class_id: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    foreground: Vec<u8>,
    orientation_bin: Vec<i64>,
    vote_target: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    format_version: u32,
    group_order: usize,
    points: Vec<Vec3>,
    object_id: Vec<i64>,
    class_id: Vec<i64>,
    gt_boxes: Vec<BoxRecord>,
    labels: LabelRecord,
}

/// JSON formatter writing every `f64` with 17 significant digits.
pub(crate) struct Digits17;

impl serde_json::ser::Formatter for Digits17 {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub(crate) fn to_json_17<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Digits17);
    value
        .serialize(&mut ser)
        .map_err(|e| EonError::parse("json serialization", e.to_string()))?;
    Ok(buf)
}

pub fn scene_to_json(scene: &Scene) -> Result<Vec<u8>> {
    let record = SceneRecord {
        format_version: SCENE_FORMAT_VERSION,
        group_order: scene.group_order,
        points: scene.points.clone(),
        object_id: scene.object_id.clone(),
        class_id: scene.class_id.clone(),
        gt_boxes: scene
            .gt_boxes
            .iter()
            .map(|b| BoxRecord {
                center: b.center,
                size: b.size,
                yaw: b.yaw,
                class_id: b.class_id,
            })
            .collect(),
        labels: LabelRecord {
            foreground: scene.labels.foreground.iter().map(|f| *f as u8).collect(),
            orientation_bin: scene.labels.orientation_bin.clone(),
            vote_target: scene.labels.vote_target.clone(),
        },
    };
    to_json_17(&record)
}

pub fn scene_from_json(bytes: &[u8], context: &str, expected_group: Option<usize>) -> Result<Scene> {
    let record: SceneRecord =
        serde_json::from_slice(bytes).map_err(|e| EonError::parse(context, e.to_string()))?;
    if record.format_version != SCENE_FORMAT_VERSION {
        return Err(EonError::parse(
            context,
            format!("unsupported format_version {}", record.format_version),
        ));
    }
    if let Some(expected) = expected_group {
        if expected != record.group_order {
            return Err(EonError::GroupMismatch {
                expected,
                found: record.group_order,
            });
        }
    }
    let gt_boxes = record
        .gt_boxes
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            OrientedBox::new(b.center, b.size, b.yaw, b.class_id)
                .map_err(|e| EonError::parse(format!("{context}: gt_boxes[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let foreground = record
        .labels
        .foreground
        .iter()
        .enumerate()
        .map(|(i, f)| match f {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(EonError::parse(
                format!("{context}: labels.foreground[{i}]"),
                format!("expected 0 or 1, got {other}"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        group_order: record.group_order,
        points: record.points,
        object_id: record.object_id,
        class_id: record.class_id,
        gt_boxes,
        labels: SceneLabels {
            foreground,
            orientation_bin: record.labels.orientation_bin,
            vote_target: record.labels.vote_target,
        },
    };
    let n = scene.points.len();
    for (name, len) in [
        ("object_id", scene.object_id.len()),
        ("class_id", scene.class_id.len()),
        ("labels.foreground", scene.labels.foreground.len()),
        ("labels.orientation_bin", scene.labels.orientation_bin.len()),
        ("labels.vote_target", scene.labels.vote_target.len()),
    ] {
        if len != n {
            return Err(EonError::parse(
                format!("{context}: {name}"),
                format!("length {len} differs from {n} points"),
            ));
        }
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let bytes = scene_to_json(scene)?;
    fs::write(path, bytes).map_err(|e| EonError::io(path, e))
}

/// Loads a scene, optionally requiring a specific group order.
pub fn load_scene(path: &Path, expected_group: Option<usize>) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| EonError::io(path, e))?;
    scene_from_json(&bytes, &path.display().to_string(), expected_group)
}

/// `manifest.json`: split name → scene paths relative to the manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EonError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| EonError::parse(path.display().to_string(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| EonError::parse("manifest", e.to_string()))?;
        let mut f = fs::File::create(path).map_err(|e| EonError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| EonError::io(path, e))
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| EonError::Config(format!("manifest has no split `{name}`")))
    }

    pub fn load_split(&self, root: &Path, name: &str, expected_group: Option<usize>) -> Result<Vec<Scene>> {
        self.split(name)?
            .iter()
            .map(|rel| load_scene(&root.join(rel), expected_group))
            .collect()
    }
}

/// Per-split scene seeds derived from the config seed.
pub fn scene_seed(base: u64, split_index: u64, scene_index: u64) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add(split_index.wrapping_mul(10_000_019))
        .wrapping_add(scene_index)
}

/// Generates `counts` scenes per split into `dir` and writes `manifest.json`.
pub fn generate_dataset(
    cfg: &SceneGenConfig,
    counts: &BTreeMap<String, usize>,
    dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| EonError::io(&scene_dir, e))?;
    let mut manifest = DatasetManifest::default();
    let mut jobs: Vec<(String, u64, PathBuf, String)> = Vec::new();
    for (split_index, (split, count)) in counts.iter().enumerate() {
        let mut rels = Vec::with_capacity(*count);
        for i in 0..*count {
            let rel = format!("scenes/{split}_{i:05}.scene.json");
            let seed = scene_seed(cfg.seed, split_index as u64, i as u64);
            jobs.push((split.clone(), seed, dir.join(&rel), rel.clone()));
            rels.push(rel);
        }
        manifest.splits.insert(split.clone(), rels);
    }
    crate::parallel::run_indexed(workers, jobs.len(), |i| {
        let (_, seed, path, _) = &jobs[i];
        let scene = generate_scene(cfg, *seed)?;
        save_scene(&scene, path)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneGenConfig {
        SceneGenConfig {
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&cfg(), 11).unwrap();
        let b = generate_scene(&cfg(), 11).unwrap();
        assert_eq!(scene_to_json(&a).unwrap(), scene_to_json(&b).unwrap());
        let c = generate_scene(&cfg(), 12).unwrap();
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn zero_objects_is_background_only() {
        let c = SceneGenConfig {
            min_objects: 0,
            max_objects: 0,
            ..cfg()
        };
        let s = generate_scene(&c, 1).unwrap();
        assert!(s.gt_boxes.is_empty());
        assert!(!s.points.is_empty());
        assert!(s.labels.foreground.iter().all(|f| !f));
        assert!(s.labels.orientation_bin.iter().all(|b| *b == -1));
    }

    #[test]
    fn grid_yaws_are_exact_bins() {
        let c = SceneGenConfig {
            yaw_mode: YawMode::Grid,
            ..cfg()
        };
        let group = c.group().unwrap();
        for seed in 0..10 {
            let s = generate_scene(&c, seed).unwrap();
            for b in &s.gt_boxes {
                let bin = group.angle_to_bin(b.yaw).unwrap();
                assert!(crate::rotgroup::wrap_angle(b.yaw - bin.angle()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn templates_are_asymmetric() {
        for t in default_templates() {
            for n in 2..=8 {
                let g = CyclicGroup::new(n).unwrap();
                let d = t.min_rotated_chamfer(&g);
                assert!(d > ASYMMETRY_THRESHOLD, "{} N={n} chamfer {d}", t.name);
            }
        }
    }

    #[test]
    fn derive_labels_examples() {
        let c4 = CyclicGroup::new(4).unwrap();
        let b = OrientedBox::new([1.0, 1.0, 0.5], [1.0; 3], PI / 2.0, 0).unwrap();
        let pts = vec![[1.1, 0.9, 0.4], [3.0, 3.0, 0.0]];
        let labels = derive_labels(&pts, &[0, -1], &[b], &c4).unwrap();
        assert_eq!(labels.foreground, vec![true, false]);
        assert_eq!(labels.orientation_bin, vec![1, -1]);
        let vt = labels.vote_target[0];
        assert!((vt[0] + 0.1).abs() < 1e-12 && (vt[1] - 0.1).abs() < 1e-12 && (vt[2] - 0.1).abs() < 1e-12);
        assert_eq!(labels.vote_target[1], [0.0; 3]);
        // Assigned but outside.
        let err = derive_labels(&[[5.0, 5.0, 5.0]], &[0], &[OrientedBox::new([0.0; 3], [1.0; 3], 0.0, 0).unwrap()], &c4);
        assert!(matches!(err, Err(EonError::LabelConsistency(_))));
    }

    #[test]
    fn augmentation_bounds_and_containment() {
        let s = generate_scene(&cfg(), 5).unwrap();
        assert_eq!(object_rotation_augment(&s, 0.0, 9).unwrap(), s);
        let a = object_rotation_augment(&s, 30.0, 9).unwrap();
        a.validate().unwrap();
        for (b0, b1) in s.gt_boxes.iter().zip(&a.gt_boxes) {
            let d = wrap_angle(b1.yaw - b0.yaw).abs();
            assert!(d <= 30f64.to_radians() + 1e-12);
            assert_eq!(b0.center, b1.center);
        }
        for i in 0..s.len() {
            if s.object_id[i] < 0 {
                assert_eq!(s.points[i], a.points[i]);
            }
        }
        assert!(object_rotation_augment(&s, -1.0, 0).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&cfg(), 2).unwrap();
        let path = dir.path().join("a.scene.json");
        save_scene(&s, &path).unwrap();
        let back = load_scene(&path, Some(4)).unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            load_scene(&path, Some(8)),
            Err(EonError::GroupMismatch { expected: 8, found: 4 })
        ));

        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("gt_boxes");
        fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        let err = load_scene(&path, None).unwrap_err().to_string();
        assert!(err.contains("gt_boxes"), "{err}");
    }

    #[test]
    fn floats_written_with_17_digits() {
        let bytes = to_json_17(&vec![0.1f64, 1.0 / 3.0]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, "[1.0000000000000001e-1,3.3333333333333331e-1]");
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, vec![0.1, 1.0 / 3.0]);
    }
}
