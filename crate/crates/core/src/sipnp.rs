//! Joint multi-object pose refinement with side information.
//!
//! All object poses and a shared floor plane are optimised together with Adam
//! on
//!
//! ```text
//! total = reprojection + ω_surface · surface + ω_collision · collision
//! ```
//!
//! where `reprojection` sums squared pixel residuals over every object's
//! inlier matches, `surface` sums squared floor distances of every object's
//! four bottom box vertices, and `collision` sums 3D box IOUs over object
//! pairs. Rotations are parameterised by quaternions, renormalised after each
//! step; gradients are exact and hand-derived.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::{fit_plane, Mat3, Plane, RigidTransform, UnitQuaternion, Vec3};
use crate::geom::CameraIntrinsics;
use crate::pnp::Correspondence;
use crate::tol;

/// Depth below which the projection is clamped and a barrier kicks in.
pub const DEPTH_CLAMP: f64 = 1e-6;
/// Weight of the quadratic barrier on depths below [`DEPTH_CLAMP`].
pub const DEPTH_BARRIER: f64 = 1e6;

/// An object with known geometry, expressed in its own frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub keypoints: Vec<Vec3>,
    pub bbox_corners: [Vec3; 8],
    /// The bottom face of the box, used for the floor constraint.
    pub bottom_vertices: [Vec3; 4],
    /// Boxes tested for collisions. A plain object has just its own box; a
    /// merged compound keeps one box per member.
    pub collision_boxes: Vec<[Vec3; 8]>,
    pub mesh: Option<String>,
}

impl SceneObject {
    /// Builds an object from explicit corners and the indices of the four
    /// bottom corners, validating the box.
    pub fn new(id: impl Into<String>, keypoints: Vec<Vec3>, bbox_corners: [Vec3; 8], bottom: [usize; 4]) -> Result<Self> {
        let id = id.into();
        if bottom.iter().any(|&i| i >= 8) {
            return Err(Error::InvalidInput(format!("object {id}: bottom vertex index out of range")));
        }
        let mut seen = bottom.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != 4 {
            return Err(Error::InvalidInput(format!("object {id}: bottom vertex indices must be distinct")));
        }
        let obj = Self {
            bottom_vertices: bottom.map(|i| bbox_corners[i]),
            collision_boxes: vec![bbox_corners],
            id,
            keypoints,
            bbox_corners,
            mesh: None,
        };
        obj.validate()?;
        Ok(obj)
    }

    /// Axis-aligned box `[min, max]` in the object frame; the bottom face is `z = min.z`.
    pub fn from_box(id: impl Into<String>, keypoints: Vec<Vec3>, min: Vec3, max: Vec3) -> Result<Self> {
        Self::new(id, keypoints, box_corners(&min, &max), [0, 1, 2, 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints.is_empty() {
            return Err(Error::InvalidInput(format!("object {}: no keypoints", self.id)));
        }
        if !is_box(&self.bbox_corners) {
            return Err(Error::InvalidInput(format!("object {}: bbox corners do not form a box", self.id)));
        }
        let scale = box_scale(&self.bbox_corners);
        for v in &self.bottom_vertices {
            if !self.bbox_corners.iter().any(|c| (c - v).norm() <= 1e-9 * scale) {
                return Err(Error::InvalidInput(format!("object {}: bottom vertex is not a box corner", self.id)));
            }
        }
        Ok(())
    }
}

/// Corners of the axis-aligned box `[min, max]`, bottom face (`z = min.z`) first.
pub fn box_corners(min: &Vec3, max: &Vec3) -> [Vec3; 8] {
    [
        Vec3::new(min.x, min.y, min.z),
        Vec3::new(max.x, min.y, min.z),
        Vec3::new(max.x, max.y, min.z),
        Vec3::new(min.x, max.y, min.z),
        Vec3::new(min.x, min.y, max.z),
        Vec3::new(max.x, min.y, max.z),
        Vec3::new(max.x, max.y, max.z),
        Vec3::new(min.x, max.y, max.z),
    ]
}

fn box_scale(c: &[Vec3; 8]) -> f64 {
    let (lo, hi) = aabb(c);
    (hi - lo).norm().max(1e-300)
}

/// True when the eight corners are `o + {0,1}·e1 + {0,1}·e2 + {0,1}·e3` for
/// pairwise-orthogonal, non-zero edges.
fn is_box(c: &[Vec3; 8]) -> bool {
    let scale = box_scale(c);
    let tol = 1e-9 * scale;
    let edges: Vec<Vec3> = c[1..].iter().map(|p| p - c[0]).collect();
    let near = |a: &Vec3, b: &Vec3| (a - b).norm() <= tol;
    for i in 0..7 {
        for j in i + 1..7 {
            for k in j + 1..7 {
                let (a, b, e) = (edges[i], edges[j], edges[k]);
                if a.norm() <= tol || b.norm() <= tol || e.norm() <= tol {
                    continue;
                }
                let ortho = |x: &Vec3, y: &Vec3| x.dot(y).abs() <= 1e-9 * x.norm() * y.norm().max(1e-300) + tol * tol;
                if !(ortho(&a, &b) && ortho(&a, &e) && ortho(&b, &e)) {
                    continue;
                }
                let rest = [a + b, a + e, b + e, a + b + e];
                let others: Vec<&Vec3> = (0..7).filter(|&m| m != i && m != j && m != k).map(|m| &edges[m]).collect();
                if rest.iter().all(|r| others.iter().any(|o| near(r, o)))
                    && others.iter().all(|o| rest.iter().any(|r| near(r, o)))
                {
                    return true;
                }
            }
        }
    }
    false
}

/// Axis-aligned bounds of a point set.
pub fn aabb(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// IOU of the axis-aligned hulls of two corner sets, in `[0, 1]`.
pub fn bbox_iou_3d(box_a: &[Vec3; 8], box_b: &[Vec3; 8]) -> f64 {
    let (a_lo, a_hi) = aabb(box_a);
    let (b_lo, b_hi) = aabb(box_b);
    let mut inter = 1.0;
    for k in 0..3 {
        let o = a_hi[k].min(b_hi[k]) - a_lo[k].max(b_lo[k]);
        if o <= 0.0 {
            return 0.0;
        }
        inter *= o;
    }
    let vol_a = (a_hi - a_lo).product();
    let vol_b = (b_hi - b_lo).product();
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiPnpConfig {
    pub omega_surface: f64,
    pub omega_collision: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub optimize_plane: bool,
}

impl Default for SiPnpConfig {
    fn default() -> Self {
        Self {
            omega_surface: 1e6,
            omega_collision: 1e4,
            learning_rate: 0.001,
            steps: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            optimize_plane: true,
        }
    }
}

impl SiPnpConfig {
    pub fn validate(&self) -> Result<()> {
        let weights_ok = self.omega_surface >= 0.0 && self.omega_collision >= 0.0;
        let adam_ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0;
        if !weights_ok || !adam_ok || self.steps == 0 {
            return Err(Error::InvalidInput(format!("invalid SI-PnP config: {self:?}")));
        }
        Ok(())
    }
}

/// Loss components at one state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub reprojection: f64,
    pub surface: f64,
    pub collision: f64,
    pub total: f64,
}

impl LossComponents {
    fn weighted(reprojection: f64, surface: f64, collision: f64, cfg: &SiPnpConfig) -> Self {
        Self {
            reprojection,
            surface,
            collision,
            total: reprojection + cfg.omega_surface * surface + cfg.omega_collision * collision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossComponents,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSolution {
    pub transforms: BTreeMap<String, RigidTransform>,
    pub floor: Plane,
    pub loss_trace: Vec<LossRecord>,
    pub inliers: BTreeMap<String, Vec<usize>>,
    pub matching_scores: BTreeMap<String, f64>,
    pub neglected: Vec<String>,
    /// The run hit a non-finite loss and stopped early.
    pub diverged: bool,
    /// Optimiser step whose state is returned (the lowest total loss seen).
    pub best_step: usize,
}

/// Free parameters: raw quaternion and translation per object plus the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub quaternions: Vec<[f64; 4]>,
    pub translations: Vec<Vec3>,
    pub plane: [f64; 4],
}

impl SceneParams {
    pub fn new(transforms: &[RigidTransform], floor: &Plane) -> Self {
        Self {
            quaternions: transforms.iter().map(|t| t.rotation.to_array()).collect(),
            translations: transforms.iter().map(|t| t.translation).collect(),
            plane: floor.coeffs,
        }
    }

    pub fn transforms(&self) -> Result<Vec<RigidTransform>> {
        self.quaternions
            .iter()
            .zip(&self.translations)
            .map(|(q, t)| Ok(RigidTransform::new(UnitQuaternion::from_array(*q)?, *t)))
            .collect()
    }

    pub fn floor(&self) -> Result<Plane> {
        Plane::from_array(self.plane)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(7 * self.quaternions.len() + 4);
        for (q, t) in self.quaternions.iter().zip(&self.translations) {
            out.extend_from_slice(q);
            out.extend_from_slice(t.as_slice());
        }
        out.extend_from_slice(&self.plane);
        out
    }

    fn assign(&mut self, flat: &[f64]) {
        for (i, (q, t)) in self.quaternions.iter_mut().zip(self.translations.iter_mut()).enumerate() {
            let o = 7 * i;
            q.copy_from_slice(&flat[o..o + 4]);
            *t = Vec3::new(flat[o + 4], flat[o + 5], flat[o + 6]);
        }
        let o = 7 * self.quaternions.len();
        self.plane.copy_from_slice(&flat[o..o + 4]);
    }

    /// Projects quaternions back to unit length and the plane to a unit normal.
    fn renormalize(&mut self) {
        for q in &mut self.quaternions {
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                q.iter_mut().for_each(|c| *c /= n);
            }
        }
        let n = self.plane[..3].iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.plane.iter_mut().for_each(|c| *c /= n);
        }
    }
}

/// Partial derivatives of the total loss, laid out like [`SceneParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradient {
    pub quaternions: Vec<[f64; 4]>,
    pub translations: Vec<Vec3>,
    /// Absent when the plane is frozen.
    pub plane: Option<[f64; 4]>,
}

impl SceneGradient {
    pub fn norm(&self) -> f64 {
        let q: f64 = self.quaternions.iter().flatten().map(|g| g * g).sum();
        let t: f64 = self.translations.iter().map(|g| g.norm_squared()).sum();
        let p: f64 = self.plane.iter().flatten().map(|g| g * g).sum();
        (q + t + p).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Component losses evaluated directly from transforms.

/// Squared pixel residuals over all given matches (inliers only).
pub fn reprojection_loss(
    k: &CameraIntrinsics,
    transforms: &[RigidTransform],
    correspondences: &[Vec<Correspondence>],
) -> f64 {
    transforms
        .iter()
        .zip(correspondences)
        .map(|(tr, corrs)| {
            let r = tr.rotation_matrix();
            corrs
                .iter()
                .map(|c| point_reprojection(k, &(r * c.object_point + tr.translation), c, false).0)
                .sum::<f64>()
        })
        .sum()
}

/// Squared floor distance of every bottom vertex.
pub fn surface_loss(objects: &[SceneObject], transforms: &[RigidTransform], floor: &Plane) -> f64 {
    objects
        .iter()
        .zip(transforms)
        .flat_map(|(o, tr)| o.bottom_vertices.iter().map(move |v| floor.signed_distance(&tr.apply(v)).powi(2)))
        .sum()
}

/// Sum of box IOUs over unordered object pairs.
pub fn collision_loss(objects: &[SceneObject], transforms: &[RigidTransform]) -> f64 {
    let boxes: Vec<Vec<[Vec3; 8]>> = objects
        .iter()
        .zip(transforms)
        .map(|(o, tr)| o.collision_boxes.iter().map(|b| b.map(|c| tr.apply(&c))).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            for a in &boxes[i] {
                for b in &boxes[j] {
                    total += bbox_iou_3d(a, b);
                }
            }
        }
    }
    total
}

/// Weighted total and its components.
pub fn total_loss(
    k: &CameraIntrinsics,
    objects: &[SceneObject],
    transforms: &[RigidTransform],
    floor: &Plane,
    correspondences: &[Vec<Correspondence>],
    cfg: &SiPnpConfig,
) -> Result<LossComponents> {
    check_lengths(objects, transforms.len(), correspondences)?;
    let params = SceneParams::new(transforms, floor);
    Ok(evaluate(k, objects, &params, correspondences, cfg, false).0)
}

/// Exact gradient of the total loss at `params`.
pub fn gradient(
    k: &CameraIntrinsics,
    objects: &[SceneObject],
    params: &SceneParams,
    correspondences: &[Vec<Correspondence>],
    cfg: &SiPnpConfig,
) -> Result<SceneGradient> {
    check_lengths(objects, params.quaternions.len(), correspondences)?;
    let (loss, grad) = evaluate(k, objects, params, correspondences, cfg, true);
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(grad.expect("gradient requested"))
}

/// Loss at raw parameters; quaternions and plane normals need not be unit.
pub fn loss_at(
    k: &CameraIntrinsics,
    objects: &[SceneObject],
    params: &SceneParams,
    correspondences: &[Vec<Correspondence>],
    cfg: &SiPnpConfig,
) -> Result<LossComponents> {
    check_lengths(objects, params.quaternions.len(), correspondences)?;
    Ok(evaluate(k, objects, params, correspondences, cfg, false).0)
}

fn check_lengths(objects: &[SceneObject], n_poses: usize, corrs: &[Vec<Correspondence>]) -> Result<()> {
    if objects.len() != n_poses || objects.len() != corrs.len() {
        return Err(Error::InvalidInput(format!(
            "{} objects, {} poses, {} correspondence lists",
            objects.len(),
            n_poses,
            corrs.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fused loss and gradient.

/// Squared residual of one match at camera-frame point `p`, and optionally
/// its gradient with respect to `p`.
fn point_reprojection(k: &CameraIntrinsics, p: &Vec3, c: &Correspondence, want_grad: bool) -> (f64, Vec3) {
    let (s, barrier, barrier_grad) = if p.z >= DEPTH_CLAMP {
        (p.z, 0.0, 0.0)
    } else {
        let gap = DEPTH_CLAMP - p.z;
        (DEPTH_CLAMP, DEPTH_BARRIER * gap * gap, -2.0 * DEPTH_BARRIER * gap)
    };
    let clamped = p.z < DEPTH_CLAMP;
    let eu = (k.fx * p.x + k.skew * p.y) / s + k.cx - c.image_point.u;
    let ev = k.fy * p.y / s + k.cy - c.image_point.v;
    let value = eu * eu + ev * ev + barrier;
    if !want_grad {
        return (value, Vec3::zeros());
    }
    let gx = 2.0 * eu * k.fx / s;
    let gy = 2.0 * (eu * k.skew + ev * k.fy) / s;
    let gz = if clamped {
        barrier_grad
    } else {
        -2.0 * (eu * (k.fx * p.x + k.skew * p.y) + ev * k.fy * p.y) / (s * s)
    };
    (value, Vec3::new(gx, gy, gz))
}

/// Rotation matrix of the normalised quaternion and its partials with
/// respect to each normalised component `(w, x, y, z)`.
fn rotation_and_partials(u: &[f64; 4]) -> (Mat3, [Mat3; 4]) {
    let [w, x, y, z] = *u;
    let r = Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Mat3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Mat3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    (r, [dw, dx, dy, dz])
}

/// d IOU / d(bounds) for two AABBs. Returns `(iou, d_lo_a, d_hi_a, d_lo_b, d_hi_b)`.
fn iou_with_bound_grads(a_lo: &Vec3, a_hi: &Vec3, b_lo: &Vec3, b_hi: &Vec3) -> Option<(f64, [Vec3; 4])> {
    let mut overlap = [0.0; 3];
    for k in 0..3 {
        overlap[k] = a_hi[k].min(b_hi[k]) - a_lo[k].max(b_lo[k]);
        if overlap[k] <= 0.0 {
            return None;
        }
    }
    let ext_a = a_hi - a_lo;
    let ext_b = b_hi - b_lo;
    let inter = overlap[0] * overlap[1] * overlap[2];
    let vol_a = ext_a.product();
    let vol_b = ext_b.product();
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        return None;
    }
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_vol = -inter / (union * union);
    let mut g = [Vec3::zeros(); 4];
    for k in 0..3 {
        let others = |e: [f64; 3]| e[(k + 1) % 3] * e[(k + 2) % 3];
        let di_do = d_inter * others(overlap);
        // overlap_k = min(a_hi, b_hi) - max(a_lo, b_lo), ties credited to box a
        if a_hi[k] <= b_hi[k] {
            g[1][k] += di_do;
        } else {
            g[3][k] += di_do;
        }
        if a_lo[k] >= b_lo[k] {
            g[0][k] -= di_do;
        } else {
            g[2][k] -= di_do;
        }
        let da = d_vol * others([ext_a.x, ext_a.y, ext_a.z]);
        let db = d_vol * others([ext_b.x, ext_b.y, ext_b.z]);
        g[1][k] += da;
        g[0][k] -= da;
        g[3][k] += db;
        g[2][k] -= db;
    }
    Some((iou, g))
}

/// Indices of the corners attaining the per-axis minimum and maximum.
fn extreme_corners(c: &[Vec3; 8]) -> ([usize; 3], [usize; 3]) {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for (i, p) in c.iter().enumerate() {
        for k in 0..3 {
            if p[k] < c[lo[k]][k] {
                lo[k] = i;
            }
            if p[k] > c[hi[k]][k] {
                hi[k] = i;
            }
        }
    }
    (lo, hi)
}

struct PoseState {
    unit: [f64; 4],
    norm: f64,
    r: Mat3,
    dr: [Mat3; 4],
    t: Vec3,
}

fn evaluate(
    k: &CameraIntrinsics,
    objects: &[SceneObject],
    params: &SceneParams,
    corrs: &[Vec<Correspondence>],
    cfg: &SiPnpConfig,
    want_grad: bool,
) -> (LossComponents, Option<SceneGradient>) {
    let n = objects.len();
    let poses: Vec<PoseState> = params
        .quaternions
        .iter()
        .zip(&params.translations)
        .map(|(q, t)| {
            let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            let unit = q.map(|c| c / norm);
            let (r, dr) = rotation_and_partials(&unit);
            PoseState { unit, norm, r, dr, t: *t }
        })
        .collect();
    // dL/dR and dL/dt per object, accumulated unweighted per term then scaled
    let mut g_rot = vec![Mat3::zeros(); n];
    let mut g_t = vec![Vec3::zeros(); n];

    let mut reprojection = 0.0;
    for (i, pose) in poses.iter().enumerate() {
        for c in &corrs[i] {
            let p = pose.r * c.object_point + pose.t;
            let (value, dp) = point_reprojection(k, &p, c, want_grad);
            reprojection += value;
            if want_grad {
                g_rot[i] += dp * c.object_point.transpose();
                g_t[i] += dp;
            }
        }
    }

    let normal = Vec3::new(params.plane[0], params.plane[1], params.plane[2]);
    let normal_len = normal.norm();
    let offset = params.plane[3];
    let mut surface = 0.0;
    let mut g_normal = Vec3::zeros();
    let mut g_offset = 0.0;
    let ws = cfg.omega_surface;
    for (i, (obj, pose)) in objects.iter().zip(&poses).enumerate() {
        for v in &obj.bottom_vertices {
            let p = pose.r * v + pose.t;
            let r = (normal.dot(&p) + offset) / normal_len;
            surface += r * r;
            if want_grad {
                let dp = normal * (2.0 * r / normal_len);
                g_rot[i] += ws * dp * v.transpose();
                g_t[i] += ws * dp;
                g_normal += (p - normal * (r / normal_len)) * (2.0 * r / normal_len);
                g_offset += 2.0 * r / normal_len;
            }
        }
    }

    let wc = cfg.omega_collision;
    let mut collision = 0.0;
    let world_boxes: Vec<Vec<[Vec3; 8]>> = objects
        .iter()
        .zip(&poses)
        .map(|(o, pose)| o.collision_boxes.iter().map(|b| b.map(|c| pose.r * c + pose.t)).collect())
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            for (ai, a) in world_boxes[i].iter().enumerate() {
                for (bi, b) in world_boxes[j].iter().enumerate() {
                    let (a_lo, a_hi) = aabb(a);
                    let (b_lo, b_hi) = aabb(b);
                    let Some((iou, bound_grads)) = iou_with_bound_grads(&a_lo, &a_hi, &b_lo, &b_hi) else {
                        continue;
                    };
                    collision += iou;
                    if !want_grad {
                        continue;
                    }
                    let sides = [
                        (i, &objects[i].collision_boxes[ai], a, bound_grads[0], bound_grads[1]),
                        (j, &objects[j].collision_boxes[bi], b, bound_grads[2], bound_grads[3]),
                    ];
                    for (obj, local, world, g_lo, g_hi) in sides {
                        let (lo_idx, hi_idx) = extreme_corners(world);
                        for axis in 0..3 {
                            for (idx, g) in [(lo_idx[axis], g_lo[axis]), (hi_idx[axis], g_hi[axis])] {
                                if g == 0.0 {
                                    continue;
                                }
                                let mut dp = Vec3::zeros();
                                dp[axis] = wc * g;
                                g_rot[obj] += dp * local[idx].transpose();
                                g_t[obj] += dp;
                            }
                        }
                    }
                }
            }
        }
    }

    let loss = LossComponents::weighted(reprojection, surface, collision, cfg);
    if !want_grad {
        return (loss, None);
    }
    let quaternions = poses
        .iter()
        .zip(&g_rot)
        .map(|(pose, gr)| {
            let g_unit: [f64; 4] = std::array::from_fn(|m| gr.component_mul(&pose.dr[m]).sum());
            let radial: f64 = (0..4).map(|m| g_unit[m] * pose.unit[m]).sum();
            std::array::from_fn(|m| (g_unit[m] - radial * pose.unit[m]) / pose.norm)
        })
        .collect();
    let plane = cfg
        .optimize_plane
        .then(|| [ws * g_normal.x, ws * g_normal.y, ws * g_normal.z, ws * g_offset]);
    (
        loss,
        Some(SceneGradient {
            quaternions,
            translations: g_t,
            plane,
        }),
    )
}

// ---------------------------------------------------------------------------
// Optimiser.

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], cfg: &SiPnpConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = cfg.adam_beta1 * self.m[i] + (1.0 - cfg.adam_beta1) * g[i];
            self.v[i] = cfg.adam_beta2 * self.v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

fn flatten_gradient(g: &SceneGradient) -> Vec<f64> {
    let mut out = Vec::with_capacity(7 * g.quaternions.len() + 4);
    for (q, t) in g.quaternions.iter().zip(&g.translations) {
        out.extend_from_slice(q);
        out.extend_from_slice(t.as_slice());
    }
    out.extend_from_slice(&g.plane.unwrap_or([0.0; 4]));
    out
}

/// Initial floor: least-squares plane through every object's transformed bottom vertices.
pub fn initial_floor(objects: &[SceneObject], transforms: &[RigidTransform]) -> Result<Plane> {
    let pts: Vec<Vec3> = objects
        .iter()
        .zip(transforms)
        .flat_map(|(o, tr)| o.bottom_vertices.iter().map(move |v| tr.apply(v)))
        .collect();
    fit_plane(&pts)
}

const TRACE_EVERY: usize = 10;

/// Runs `cfg.steps` Adam updates on every pose (and the floor unless frozen).
///
/// `correspondences[i]` holds the inlier matches of `objects[i]`. The loss
/// trace is sampled every ten steps and at the final step. Because a fixed
/// step size never settles exactly, the lowest-loss state visited is the one
/// returned (see [`SceneSolution::best_step`]).
pub fn optimize(
    k: &CameraIntrinsics,
    objects: &[SceneObject],
    init_transforms: &[RigidTransform],
    correspondences: &[Vec<Correspondence>],
    cfg: &SiPnpConfig,
) -> Result<SceneSolution> {
    cfg.validate()?;
    check_lengths(objects, init_transforms.len(), correspondences)?;
    if objects.is_empty() {
        return Err(Error::EmptyInput("no objects to optimise"));
    }
    let floor = initial_floor(objects, init_transforms)?;
    let mut params = SceneParams::new(init_transforms, &floor);
    params.renormalize();
    let mut adam = Adam::new(7 * objects.len() + 4);
    let mut trace = Vec::new();
    let mut diverged = false;

    // Adam with a fixed step keeps moving around a minimum, so the state
    // with the lowest total loss seen along the trajectory is returned.
    let mut best: Option<(LossComponents, SceneParams, usize)> = None;
    for step in 0..=cfg.steps {
        let want_grad = step < cfg.steps;
        let (loss, grad) = evaluate(k, objects, &params, correspondences, cfg, want_grad);
        let grad = grad.map(|g| flatten_gradient(&g)).unwrap_or_default();
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            diverged = true;
            break;
        }
        if step % TRACE_EVERY == 0 || step == cfg.steps {
            trace.push(LossRecord { step, loss });
        }
        if best.as_ref().is_none_or(|(b, _, _)| loss.total < b.total) {
            best = Some((loss, params.clone(), step));
        }
        if !want_grad {
            break;
        }
        let mut flat = params.flatten();
        adam.step(&mut flat, &grad, cfg);
        params.assign(&flat);
        params.renormalize();
    }
    let Some((best_loss, best_params, best_step)) = best else {
        return Err(Error::NonFiniteLoss);
    };
    // the returned state is always on the trace
    if let Err(at) = trace.binary_search_by_key(&best_step, |r| r.step) {
        trace.insert(at, LossRecord { step: best_step, loss: best_loss });
    }
    let params = best_params;
    let transforms = params
        .transforms()?
        .into_iter()
        .map(|t| t.canonical())
        .zip(objects)
        .map(|(t, o)| (o.id.clone(), t))
        .collect();
    let floor = if cfg.optimize_plane { params.floor()? } else { floor };
    debug_assert!(params
        .quaternions
        .iter()
        .all(|q| (q.iter().map(|c| c * c).sum::<f64>().sqrt() - 1.0).abs() <= tol::DEFAULT.quat_norm));
    Ok(SceneSolution {
        transforms,
        floor,
        loss_trace: trace,
        inliers: BTreeMap::new(),
        matching_scores: BTreeMap::new(),
        neglected: Vec::new(),
        diverged,
        best_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PixelPoint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_cube(id: &str) -> SceneObject {
        SceneObject::from_box(id, vec![Vec3::new(0.0, 0.0, 0.5)], Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 1.0)).unwrap()
    }

    fn shifted(x: f64, y: f64, z: f64) -> RigidTransform {
        RigidTransform::from_translation(Vec3::new(x, y, z))
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = box_corners(&Vec3::zeros(), &Vec3::repeat(1.0));
        assert_eq!(bbox_iou_3d(&a, &a), 1.0);
        let far = a.map(|c| c + Vec3::new(10.0, 0.0, 0.0));
        assert_eq!(bbox_iou_3d(&a, &far), 0.0);
        let half = a.map(|c| c + Vec3::new(0.5, 0.0, 0.0));
        assert!((bbox_iou_3d(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_is_bounded_and_symmetric(
            a in proptest::array::uniform3(-2.0f64..2.0), ea in proptest::array::uniform3(0.1f64..2.0),
            b in proptest::array::uniform3(-2.0f64..2.0), eb in proptest::array::uniform3(0.1f64..2.0),
        ) {
            let lo_a = Vec3::from(a);
            let lo_b = Vec3::from(b);
            let ba = box_corners(&lo_a, &(lo_a + Vec3::from(ea)));
            let bb = box_corners(&lo_b, &(lo_b + Vec3::from(eb)));
            let x = bbox_iou_3d(&ba, &bb);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, bbox_iou_3d(&bb, &ba));
            prop_assert_eq!(bbox_iou_3d(&ba, &ba), 1.0);
        }
    }

    #[test]
    fn box_validation() {
        let good = unit_cube("a");
        assert!(good.validate().is_ok());
        let mut corners = good.bbox_corners;
        corners[6] += Vec3::new(0.3, 0.0, 0.0);
        assert!(SceneObject::new("b", vec![Vec3::zeros()], corners, [0, 1, 2, 3]).is_err());
        assert!(SceneObject::new("c", vec![Vec3::zeros()], good.bbox_corners, [0, 1, 2, 2]).is_err());
        assert!(SceneObject::new("d", vec![], good.bbox_corners, [0, 1, 2, 3]).is_err());
        // rotated box is still a box
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7).unwrap();
        let rotated = good.bbox_corners.map(|c| q.rotate(&c));
        assert!(SceneObject::new("e", vec![Vec3::zeros()], rotated, [0, 1, 2, 3]).is_ok());
    }

    #[test]
    fn surface_examples() {
        let objs = [unit_cube("a"), unit_cube("b")];
        let floor = Plane::ground();
        let on_floor = [shifted(0.0, 0.0, 0.0), shifted(3.0, 0.0, 0.0)];
        assert_eq!(surface_loss(&objs, &on_floor, &floor), 0.0);
        let h = 0.37;
        let lifted = [shifted(0.0, 0.0, h), shifted(3.0, 0.0, 0.0)];
        assert!((surface_loss(&objs, &lifted, &floor) - 4.0 * h * h).abs() < 1e-12);
    }

    #[test]
    fn surface_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let objs: Vec<SceneObject> = (0..4).map(|i| unit_cube(&format!("o{i}"))).collect();
        let trs: Vec<RigidTransform> = (0..4).map(|_| random_pose(&mut rng)).collect();
        let floor = Plane::new(0.1, -0.9, 0.3, 2.0).unwrap();
        let mut expected = 0.0;
        for (o, tr) in objs.iter().zip(&trs) {
            for v in &o.bottom_vertices {
                let r = tr.rotation_matrix();
                let p = r * v + tr.translation;
                let d = floor.coeffs[0] * p.x + floor.coeffs[1] * p.y + floor.coeffs[2] * p.z + floor.coeffs[3];
                expected += d * d;
            }
        }
        assert!((surface_loss(&objs, &trs, &floor) - expected).abs() < 1e-9 * expected.max(1.0));
    }

    #[test]
    fn collision_examples() {
        let a = unit_cube("a");
        assert_eq!(collision_loss(std::slice::from_ref(&a), &[RigidTransform::IDENTITY]), 0.0);
        let two = [a.clone(), unit_cube("b")];
        assert_eq!(collision_loss(&two, &[RigidTransform::IDENTITY; 2]), 1.0);
        let three = [a.clone(), unit_cube("b"), unit_cube("c")];
        let apart = [shifted(0.0, 0.0, 0.0), shifted(5.0, 0.0, 0.0), shifted(0.0, 5.0, 0.0)];
        assert_eq!(collision_loss(&three, &apart), 0.0);
    }

    #[test]
    fn reprojection_examples() {
        let k = camera();
        let tr = shifted(0.0, 0.0, 5.0);
        let p = Vec3::new(0.1, 0.2, 0.3);
        let exact = k.project_camera_point(&tr.apply(&p)).unwrap();
        let c = Correspondence::new(p, exact, 1.0);
        assert!(reprojection_loss(&k, &[tr], &[vec![c]]) < 1e-12);
        let off = Correspondence::new(p, PixelPoint::new(exact.u + 3.0, exact.v - 4.0), 1.0);
        assert!((reprojection_loss(&k, &[tr], &[vec![off]]) - 25.0).abs() < 1e-9);
        let perturbed = shifted(0.01, 0.0, 5.0);
        assert!(reprojection_loss(&k, &[perturbed], &[vec![c]]) > 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let k = camera();
        let objs = [unit_cube("a"), unit_cube("b")];
        let cfg = SiPnpConfig::default();
        let floor = Plane::new(0.0, -1.0, 0.0, 1.0).unwrap();
        let h = 0.01;
        let poses = [shifted(-1.0, 1.0 - h, 6.0), shifted(1.5, 1.0, 6.0)];
        // camera frame has y down: cubes are upright when object z maps to -y
        let upright = UnitQuaternion::from_axis_angle(&Vec3::x(), std::f64::consts::FRAC_PI_2).unwrap();
        let poses = poses.map(|p| RigidTransform::new(upright, p.translation));
        let corrs = vec![vec![], vec![]];
        let loss = total_loss(&k, &objs, &poses, &floor, &corrs, &cfg).unwrap();
        assert!((loss.surface - 4.0 * h * h).abs() < 1e-12);
        assert!((loss.total - 4e6 * h * h).abs() < 1e-6);
        assert_eq!(loss.collision, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (objs, params, corrs) = random_config(&mut rng);
            let trs = params.transforms().unwrap();
            let floor = params.floor().unwrap();
            let l = total_loss(&k, &objs, &trs, &floor, &corrs, &cfg).unwrap();
            let r = reprojection_loss(&k, &trs, &corrs);
            let s = surface_loss(&objs, &trs, &floor);
            let c = collision_loss(&objs, &trs);
            let expected = r + cfg.omega_surface * s + cfg.omega_collision * c;
            assert!((l.total - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            assert!(l.total >= l.reprojection);
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        let c: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        RigidTransform::new(
            UnitQuaternion::from_array(c).unwrap(),
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(5.0..8.0)),
        )
    }

    /// Three objects clustered so that boxes often overlap, with noisy matches
    /// generated from a different pose so every term is active.
    fn random_config(rng: &mut ChaCha8Rng) -> (Vec<SceneObject>, SceneParams, Vec<Vec<Correspondence>>) {
        let k = camera();
        let mut objs = Vec::new();
        let mut trs = Vec::new();
        let mut corrs = Vec::new();
        for i in 0..3 {
            let half = Vec3::new(rng.random_range(0.3..0.8), rng.random_range(0.3..0.8), 0.0);
            let h = rng.random_range(0.4..1.2);
            let kps: Vec<Vec3> = (0..12)
                .map(|_| Vec3::new(rng.random_range(-half.x..half.x), rng.random_range(-half.y..half.y), rng.random_range(0.0..h)))
                .collect();
            let obj = SceneObject::from_box(format!("o{i}"), kps, -half, Vec3::new(half.x, half.y, h)).unwrap();
            let tr = random_pose(rng);
            let truth = RigidTransform::new(tr.rotation, tr.translation + Vec3::new(0.05, -0.03, 0.1));
            let c: Vec<Correspondence> = obj
                .keypoints
                .iter()
                .map(|p| {
                    let px = k.project_camera_point(&truth.apply(p)).unwrap();
                    Correspondence::new(*p, PixelPoint::new(px.u + rng.random_range(-2.0..2.0), px.v), 1.0)
                })
                .collect();
            objs.push(obj);
            trs.push(tr);
            corrs.push(c);
        }
        let plane = Plane::new(rng.random_range(-0.3..0.3), -1.0, rng.random_range(-0.3..0.3), rng.random_range(0.0..2.0)).unwrap();
        let mut params = SceneParams::new(&trs, &plane);
        // raw parameters off the unit sphere must differentiate correctly too
        for q in &mut params.quaternions {
            let s = rng.random_range(0.7..1.3);
            q.iter_mut().for_each(|c| *c *= s);
        }
        let s = rng.random_range(0.7..1.3);
        params.plane.iter_mut().for_each(|c| *c *= s);
        (objs, params, corrs)
    }

    fn finite_difference(objs: &[SceneObject], params: &SceneParams, corrs: &[Vec<Correspondence>], cfg: &SiPnpConfig) -> Vec<f64> {
        let h = 1e-5;
        let base = params.flatten();
        (0..base.len())
            .map(|i| {
                let mut p = params.clone();
                let mut x = base.clone();
                x[i] = base[i] + h;
                p.assign(&x);
                let up = loss_at(&camera(), objs, &p, corrs, cfg).unwrap().total;
                x[i] = base[i] - h;
                p.assign(&x);
                let down = loss_at(&camera(), objs, &p, corrs, cfg).unwrap().total;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SiPnpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut overlapping = 0;
        for _ in 0..20 {
            let (objs, params, corrs) = random_config(&mut rng);
            if collision_loss(&objs, &params.transforms().unwrap()) > 0.0 {
                overlapping += 1;
            }
            let g = flatten_gradient(&gradient(&camera(), &objs, &params, &corrs, &cfg).unwrap());
            let fd = finite_difference(&objs, &params, &corrs, &cfg);
            for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
                let err = (a - b).abs();
                assert!(err <= 1e-4 * a.abs().max(b.abs()) || err <= 1e-8, "param {i}: analytic {a} fd {b}");
            }
        }
        assert!(overlapping > 0, "no configuration exercised the collision term");
    }

    #[test]
    fn frozen_plane_has_no_partials() {
        let cfg = SiPnpConfig {
            optimize_plane: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (objs, params, corrs) = random_config(&mut rng);
        let g = gradient(&camera(), &objs, &params, &corrs, &cfg).unwrap();
        assert!(g.plane.is_none());
        assert_eq!(g.quaternions.len(), 3);
    }

    fn perfect_scene() -> (Vec<SceneObject>, Vec<RigidTransform>, Vec<Vec<Correspondence>>) {
        let k = camera();
        let upright = UnitQuaternion::from_axis_angle(&Vec3::x(), std::f64::consts::FRAC_PI_2).unwrap();
        let objs = vec![unit_cube("a"), unit_cube("b")];
        let mut objs = objs;
        for o in &mut objs {
            o.keypoints = box_corners(&Vec3::new(-0.4, -0.4, 0.1), &Vec3::new(0.4, 0.4, 0.9)).to_vec();
        }
        let poses = vec![
            RigidTransform::new(upright, Vec3::new(-1.0, 1.0, 6.0)),
            RigidTransform::new(upright.mul(&UnitQuaternion::from_yaw(0.4)), Vec3::new(1.2, 1.0, 7.0)),
        ];
        let corrs = objs
            .iter()
            .zip(&poses)
            .map(|(o, tr)| o.keypoints.iter().map(|p| Correspondence::new(*p, k.project_camera_point(&tr.apply(p)).unwrap(), 1.0)).collect())
            .collect();
        (objs, poses, corrs)
    }

    #[test]
    fn perfect_scene_is_stationary() {
        let (objs, poses, corrs) = perfect_scene();
        let floor = initial_floor(&objs, &poses).unwrap();
        let params = SceneParams::new(&poses, &floor);
        let g = gradient(&camera(), &objs, &params, &corrs, &SiPnpConfig::default()).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn optimize_keeps_perfect_init() {
        let (objs, poses, corrs) = perfect_scene();
        let sol = optimize(&camera(), &objs, &poses, &corrs, &SiPnpConfig::default()).unwrap();
        for (o, p) in objs.iter().zip(&poses) {
            let got = sol.transforms[&o.id];
            assert!(got.rotation.angle_to(&p.rotation) < 1e-6);
            assert!((got.translation - p.translation).norm() < 1e-6);
        }
        assert!(!sol.diverged);
        assert!(sol.loss_trace.iter().all(|r| {
            let l = r.loss;
            (l.total - (l.reprojection + 1e6 * l.surface + 1e4 * l.collision)).abs() <= 1e-9 * l.total.abs().max(1e-300)
        }));
        assert_eq!(sol.loss_trace.first().unwrap().step, 0);
        assert_eq!(sol.loss_trace.last().unwrap().step, 2000);
        assert_eq!(sol.loss_trace.len(), 201);
    }

    #[test]
    fn pure_reprojection_descent_does_not_increase_loss() {
        let (objs, poses, corrs) = perfect_scene();
        let cfg = SiPnpConfig {
            omega_surface: 0.0,
            omega_collision: 0.0,
            ..Default::default()
        };
        let perturbed: Vec<RigidTransform> = poses
            .iter()
            .map(|p| RigidTransform::new(p.rotation.mul(&UnitQuaternion::from_yaw(0.05)), p.translation + Vec3::new(0.05, 0.0, -0.1)))
            .collect();
        let before = reprojection_loss(&camera(), &perturbed, &corrs);
        let sol = optimize(&camera(), &objs, &perturbed, &corrs, &cfg).unwrap();
        let after: Vec<RigidTransform> = objs.iter().map(|o| sol.transforms[&o.id]).collect();
        let after = reprojection_loss(&camera(), &after, &corrs);
        assert!(after <= before);
        assert!(after < 1e-2 * before, "{before} -> {after}");
        for tr in sol.transforms.values() {
            assert!((tr.rotation.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_penalised_smoothly() {
        let k = camera();
        let c = Correspondence::new(Vec3::zeros(), PixelPoint::new(320.0, 240.0), 1.0);
        let (v1, g1) = point_reprojection(&k, &Vec3::new(0.0, 0.0, -1.0), &c, true);
        let (v2, _) = point_reprojection(&k, &Vec3::new(0.0, 0.0, -2.0), &c, true);
        assert!(v1.is_finite() && v2 > v1);
        assert!(g1.z < 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SiPnpConfig::default().validate().is_ok());
        assert!(SiPnpConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(SiPnpConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
    }
}
