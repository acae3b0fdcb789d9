//! Oriented boxes, frame transforms and rotated-box IoU.

use serde::{Deserialize, Serialize};

use crate::error::{EonError, Result};
use crate::rotgroup::{mat3_apply, wrap_angle, yaw_matrix, GroupElement};

pub type Vec3 = [f64; 3];

/// Slack for containment tests so surface points survive rigid motions.
pub const BOUNDARY_TOLERANCE: f64 = 1e-9;

fn default_score() -> f64 {
    1.0
}

fn is_default_score(s: &f64) -> bool {
    *s == 1.0
}

/// Gravity-aligned box with a yaw angle. `size` holds full extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub class_id: usize,
    #[serde(default = "default_score", skip_serializing_if = "is_default_score")]
    pub score: f64,
}

impl OrientedBox {
    pub fn new(center: Vec3, size: Vec3, yaw: f64, class_id: usize) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: wrap_angle(yaw),
            class_id,
            score: 1.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|c| c.is_finite()) || !self.yaw.is_finite() {
            return Err(EonError::InvalidArgument("box has non-finite pose".into()));
        }
        if !self.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(EonError::InvalidArgument(format!(
                "box extents must be positive, got {:?}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Expresses a scene point in the box frame (centered, yaw removed).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Boundary points (within [`BOUNDARY_TOLERANCE`]) count as inside.
    pub fn contains(&self, p: Vec3) -> bool {
        let l = self.to_local(p);
        (0..3).all(|i| l[i].abs() <= 0.5 * self.size[i] + BOUNDARY_TOLERANCE)
    }

    /// Corners in binary-counter order over (x, y, z) signs, x most
    /// significant: corner `i` uses `+x` iff bit 2 is set, `+y` iff bit 1,
    /// `+z` iff bit 0.
    pub fn corners(&self) -> [Vec3; 8] {
        let r = yaw_matrix(self.yaw);
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sign = |bit: usize| if i & (1 << bit) != 0 { 0.5 } else { -0.5 };
            let local = [
                sign(2) * self.size[0],
                sign(1) * self.size[1],
                sign(0) * self.size[2],
            ];
            let w = mat3_apply(&r, local);
            *corner = [
                w[0] + self.center[0],
                w[1] + self.center[1],
                w[2] + self.center[2],
            ];
        }
        out
    }

    /// Counter-clockwise bird's-eye-view footprint.
    pub fn bev_polygon(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = 0.5 * self.size[0];
        let hy = 0.5 * self.size[1];
        let local = [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]];
        local.map(|[x, y]| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }

    fn z_range(&self) -> (f64, f64) {
        (
            self.center[2] - 0.5 * self.size[2],
            self.center[2] + 0.5 * self.size[2],
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub positions: Vec<Vec3>,
}

impl PointSet {
    pub fn new(positions: Vec<Vec3>) -> Result<Self> {
        if positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(EonError::InvalidArgument(
                "point coordinates must be finite".into(),
            ));
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn box_corners(b: &OrientedBox) -> [Vec3; 8] {
    b.corners()
}

/// Boundary points count as inside.
pub fn points_in_box(points: &PointSet, b: &OrientedBox) -> Vec<bool> {
    points.positions.iter().map(|p| b.contains(*p)).collect()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clipping of `subject` by a convex CCW `clip` polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let dp = cross(a, b, p);
            let dq = cross(a, b, q);
            if dp >= 0.0 {
                output.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// BEV footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let pa = a.bev_polygon();
    let pb = b.bev_polygon();
    polygon_area(&clip_convex(&pa, &pb)).max(0.0)
}

/// 3D IoU of two yaw-only boxes: BEV polygon intersection times vertical
/// overlap over the union of volumes.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    const EPS: f64 = 1e-12;
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= EPS {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= EPS {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// BEV-only IoU, used for placement checks.
pub fn bev_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    if union <= 1e-12 {
        0.0
    } else {
        inter / union
    }
}

/// Maps an object-frame box (center given as an offset from `region_center`)
/// into the scene frame: `c = region_center + R_h c_inv`, `θ = θ_inv + angle(h)`.
pub fn box_to_scene_frame(box_inv: &OrientedBox, h: &GroupElement, region_center: Vec3) -> OrientedBox {
    let r = h.rotation_matrix();
    let c = mat3_apply(&r, box_inv.center);
    OrientedBox {
        center: [
            region_center[0] + c[0],
            region_center[1] + c[1],
            region_center[2] + c[2],
        ],
        size: box_inv.size,
        yaw: wrap_angle(box_inv.yaw + h.angle()),
        class_id: box_inv.class_id,
        score: box_inv.score,
    }
}

/// Inverse of [`box_to_scene_frame`].
pub fn box_to_object_frame(box_scene: &OrientedBox, h: &GroupElement, region_center: Vec3) -> OrientedBox {
    let r = h.inverse().rotation_matrix();
    let d = [
        box_scene.center[0] - region_center[0],
        box_scene.center[1] - region_center[1],
        box_scene.center[2] - region_center[2],
    ];
    OrientedBox {
        center: mat3_apply(&r, d),
        size: box_scene.size,
        yaw: wrap_angle(box_scene.yaw - h.angle()),
        class_id: box_scene.class_id,
        score: box_scene.score,
    }
}

/// `p' = pivot + R_yaw (p - pivot)`.
pub fn rotate_point_about(p: Vec3, pivot: Vec3, cos: f64, sin: f64) -> Vec3 {
    let dx = p[0] - pivot[0];
    let dy = p[1] - pivot[1];
    [
        pivot[0] + cos * dx - sin * dy,
        pivot[1] + sin * dx + cos * dy,
        p[2],
    ]
}

pub fn rotate_points_about(points: &PointSet, pivot: Vec3, yaw: f64) -> PointSet {
    let (s, c) = yaw.sin_cos();
    PointSet {
        positions: points
            .positions
            .iter()
            .map(|p| rotate_point_about(*p, pivot, c, s))
            .collect(),
    }
}

pub fn distance(a: Vec3, b: Vec3) -> f64 {
    dist2(a, b).sqrt()
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
