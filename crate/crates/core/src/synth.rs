//! Synthetic scenes with known poses: random boxes on a floor, a camera that
//! sees them, and correspondences with controlled noise and outliers.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::arrange::{default_camera, Observation, SceneSpec};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Mat3, PixelPoint, RigidTransform, UnitQuaternion, Vec3};
use crate::matching::{DescriptorEntry, DescriptorMap};
use crate::pnp::Correspondence;
use crate::sipnp::{bbox_iou_3d, SceneObject};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub keypoints_per_object: usize,
    pub noise_sigma_px: f64,
    pub outlier_fraction: f64,
    /// Side of the square floor region objects are placed in.
    pub scene_extent: f64,
    pub seed: u64,
    pub place_on_floor: bool,
    pub allow_collisions: bool,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_objects: 2,
            keypoints_per_object: 100,
            noise_sigma_px: 0.0,
            outlier_fraction: 0.0,
            scene_extent: 4.0,
            seed: 0,
            place_on_floor: true,
            allow_collisions: false,
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::InvalidInput("outlier fraction must be in [0, 1)".into()));
        }
        if self.keypoints_per_object < 8 {
            return Err(Error::InvalidInput("need at least 8 keypoints per object".into()));
        }
        if self.scene_extent.is_nan() || self.scene_extent <= 0.0 || self.noise_sigma_px < 0.0 || self.image_width <= 0.0 || self.image_height <= 0.0 {
            return Err(Error::InvalidInput("scene extent, image size and noise must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub objects: Vec<SceneObject>,
    /// Object-to-camera transforms, the quantity the solver estimates.
    pub true_transforms: BTreeMap<String, RigidTransform>,
    /// Object-to-world transforms (world is z-up with the floor at z = 0).
    pub world_transforms: BTreeMap<String, RigidTransform>,
    pub camera_from_world: RigidTransform,
    pub camera: CameraIntrinsics,
    pub image_size: (f64, f64),
    pub scene_extent: f64,
    pub correspondences: BTreeMap<String, Vec<Correspondence>>,
    /// `true` marks a planted outlier.
    pub outlier_labels: BTreeMap<String, Vec<bool>>,
}

impl GroundTruthScene {
    pub fn to_scene_spec(&self) -> SceneSpec {
        SceneSpec {
            description: "synthetic scene".into(),
            camera: self.camera,
            objects: self.objects.clone(),
            observations: self
                .correspondences
                .iter()
                .map(|(id, c)| (id.clone(), Observation::Correspondences(c.clone())))
                .collect(),
            scene_descriptors: None,
        }
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const CAMERA_ELEVATION_DEG: f64 = 35.0;
const IMAGE_MARGIN: f64 = 0.05;

pub fn object_id(i: usize) -> String {
    format!("object{i:02}")
}

/// Camera at `eye` looking at `target`, world z-up; camera x right, y down, z forward.
pub fn look_at(eye: &Vec3, target: &Vec3) -> RigidTransform {
    let forward = (target - eye).normalize();
    let mut right = forward.cross(&Vec3::z());
    if right.norm() < 1e-9 {
        right = Vec3::x();
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    RigidTransform::from_matrix(&r, -(r * eye))
}

fn random_keypoints(rng: &mut ChaCha8Rng, half: &Vec3, height: f64, n: usize) -> Vec<Vec3> {
    loop {
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-half.x..half.x),
                    rng.random_range(-half.y..half.y),
                    rng.random_range(0.0..height),
                )
            })
            .collect();
        // enforce a minimum spread along every axis so samples are not near-planar
        let c = pts.iter().sum::<Vec3>() / n as f64;
        let cov = pts.iter().fold(Mat3::zeros(), |a, p| a + (p - c) * (p - c).transpose()) / n as f64;
        let min_side = half.x.min(half.y).min(0.5 * height);
        if cov.symmetric_eigenvalues().min() > 0.05 * min_side * min_side {
            return pts;
        }
    }
}

fn world_box(obj: &SceneObject, tr: &RigidTransform) -> [Vec3; 8] {
    obj.bbox_corners.map(|c| tr.apply(&c))
}

/// Places a camera at the given azimuth and elevation (radians) that sees
/// every point inside the image, backing off from `start_distance` as needed.
pub fn fit_camera(
    points: &[Vec3],
    k: &CameraIntrinsics,
    size: (f64, f64),
    azimuth: f64,
    elevation: f64,
    start_distance: f64,
) -> Result<RigidTransform> {
    let n = points.len() as f64;
    let target = points.iter().sum::<Vec3>() / n;
    let elev = elevation;
    let dir = Vec3::new(azimuth.cos() * elev.cos(), azimuth.sin() * elev.cos(), elev.sin());
    let mut dist = start_distance;
    for _ in 0..200 {
        let pose = look_at(&(target + dir * dist), &target);
        let inside = points.iter().all(|p| {
            k.project_camera_point(&pose.apply(p)).is_ok_and(|px| {
                px.u >= IMAGE_MARGIN * size.0
                    && px.u <= (1.0 - IMAGE_MARGIN) * size.0
                    && px.v >= IMAGE_MARGIN * size.1
                    && px.v <= (1.0 - IMAGE_MARGIN) * size.1
            })
        });
        if inside {
            return Ok(pose);
        }
        dist *= 1.1;
    }
    Err(Error::PlacementFailure(200))
}

/// Projects keypoints through `pose`, adds pixel noise and plants outliers.
pub fn observe(
    rng: &mut ChaCha8Rng,
    k: &CameraIntrinsics,
    size: (f64, f64),
    pose: &RigidTransform,
    keypoints: &[Vec3],
    noise_sigma_px: f64,
    outlier_fraction: f64,
) -> Result<(Vec<Correspondence>, Vec<bool>)> {
    let n = keypoints.len();
    let n_out = (outlier_fraction * n as f64).round() as usize;
    let mut labels = vec![false; n];
    for i in sample(rng, n, n_out) {
        labels[i] = true;
    }
    let noise = Normal::new(0.0, noise_sigma_px).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let band = 0.02 * size.0.hypot(size.1) + 3.0 * noise_sigma_px;
    let mut out = Vec::with_capacity(n);
    for (p, &outlier) in keypoints.iter().zip(&labels) {
        let exact = k.project_camera_point(&pose.apply(p))?;
        let image_point = if outlier {
            loop {
                let q = PixelPoint::new(rng.random_range(0.0..size.0), rng.random_range(0.0..size.1));
                if q.distance(&exact) > band {
                    break q;
                }
            }
        } else if noise_sigma_px > 0.0 {
            PixelPoint::new(exact.u + noise.sample(rng), exact.v + noise.sample(rng))
        } else {
            exact
        };
        out.push(Correspondence::new(*p, image_point, 1.0));
    }
    Ok((out, labels))
}

/// Random boxes with interior keypoints, placed on (or above) the floor
/// without overlaps unless allowed, viewed by a camera that sees everything.
pub fn generate_scene(cfg: &SynthConfig) -> Result<GroundTruthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ext = cfg.scene_extent;
    let mut objects = Vec::new();
    let mut world = BTreeMap::new();
    for i in 0..cfg.n_objects {
        let id = object_id(i);
        let size = Vec3::new(
            rng.random_range(0.12..0.25) * ext,
            rng.random_range(0.12..0.25) * ext,
            rng.random_range(0.12..0.25) * ext,
        );
        let half = Vec3::new(0.5 * size.x, 0.5 * size.y, 0.0);
        let keypoints = random_keypoints(&mut rng, &half, size.z, cfg.keypoints_per_object);
        let obj = SceneObject::from_box(id.clone(), keypoints, Vec3::new(-half.x, -half.y, 0.0), Vec3::new(half.x, half.y, size.z))?;
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let z = if cfg.place_on_floor { 0.0 } else { rng.random_range(0.0..0.2 * ext) };
            let t = Vec3::new(rng.random_range(-0.5 * ext..0.5 * ext), rng.random_range(-0.5 * ext..0.5 * ext), z);
            let tr = RigidTransform::new(UnitQuaternion::from_yaw(rng.random_range(-PI..PI)), t);
            let candidate = world_box(&obj, &tr);
            let clear = cfg.allow_collisions
                || objects
                    .iter()
                    .all(|o: &SceneObject| bbox_iou_3d(&candidate, &world_box(o, &world[&o.id])) == 0.0);
            if clear {
                placed = Some(tr);
                break;
            }
        }
        let tr = placed.ok_or(Error::PlacementFailure(MAX_PLACEMENT_ATTEMPTS))?;
        world.insert(id, tr);
        objects.push(obj);
    }

    let size = (cfg.image_width, cfg.image_height);
    let k = default_camera(size.0, size.1)?;
    let all_points: Vec<Vec3> = objects
        .iter()
        .flat_map(|o| {
            let tr = world[&o.id];
            o.keypoints.iter().chain(o.bbox_corners.iter()).map(move |p| tr.apply(p))
        })
        .collect();
    let shown: Vec<&SceneObject> = objects.iter().collect();
    let camera_from_world = clear_view(&mut rng, &shown, &world, &all_points, &k, size, ext, cfg.allow_collisions)?;

    let mut true_transforms = BTreeMap::new();
    let mut correspondences = BTreeMap::new();
    let mut outlier_labels = BTreeMap::new();
    for o in &objects {
        let pose = camera_from_world.compose(&world[&o.id]);
        let (c, labels) = observe(&mut rng, &k, size, &pose, &o.keypoints, cfg.noise_sigma_px, cfg.outlier_fraction)?;
        true_transforms.insert(o.id.clone(), pose);
        correspondences.insert(o.id.clone(), c);
        outlier_labels.insert(o.id.clone(), labels);
    }
    Ok(GroundTruthScene {
        objects,
        true_transforms,
        world_transforms: world,
        camera_from_world,
        camera: k,
        image_size: size,
        scene_extent: ext,
        correspondences,
        outlier_labels,
    })
}

/// Per-step layout images for iterative merging: step `k` shows the first
/// `k + 2` objects of `order` from a fresh camera azimuth.
pub fn iteration_specs(scene: &GroundTruthScene, order: &[String], noise_sigma_px: f64, seed: u64) -> Result<Vec<SceneSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects: BTreeMap<&str, &SceneObject> = scene.objects.iter().map(|o| (o.id.as_str(), o)).collect();
    let mut specs = Vec::new();
    for visible in 2..=order.len() {
        let shown: Vec<&SceneObject> = order[..visible]
            .iter()
            .map(|id| objects.get(id.as_str()).copied().ok_or_else(|| Error::MissingTransform(id.clone())))
            .collect::<Result<_>>()?;
        let pts: Vec<Vec3> = shown
            .iter()
            .flat_map(|o| {
                let tr = scene.world_transforms[&o.id];
                o.keypoints.iter().chain(o.bbox_corners.iter()).map(move |p| tr.apply(p))
            })
            .collect();
        let cam = clear_view(&mut rng, &shown, &scene.world_transforms, &pts, &scene.camera, scene.image_size, scene.scene_extent, false)?;
        let mut observations = BTreeMap::new();
        for o in &shown {
            let pose = cam.compose(&scene.world_transforms[&o.id]);
            let (c, _) = observe(&mut rng, &scene.camera, scene.image_size, &pose, &o.keypoints, noise_sigma_px, 0.0)?;
            observations.insert(o.id.clone(), Observation::Correspondences(c));
        }
        specs.push(SceneSpec {
            description: format!("iteration with {visible} objects"),
            camera: scene.camera,
            objects: shown.into_iter().cloned().collect(),
            observations,
            scene_descriptors: None,
        });
    }
    Ok(specs)
}

/// Draws camera azimuths until no two box hulls overlap in the camera frame.
/// Box hulls are axis-aligned there during refinement, so separation must
/// hold in that frame as well as in the world.
#[allow(clippy::too_many_arguments)]
fn clear_view(
    rng: &mut ChaCha8Rng,
    objects: &[&SceneObject],
    world: &BTreeMap<String, RigidTransform>,
    points: &[Vec3],
    k: &CameraIntrinsics,
    size: (f64, f64),
    extent: f64,
    allow_collisions: bool,
) -> Result<RigidTransform> {
    let elevation = CAMERA_ELEVATION_DEG.to_radians();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let azimuth = rng.random_range(-PI..PI);
        let cam = fit_camera(points, k, size, azimuth, elevation, extent)?;
        let boxes: Vec<[Vec3; 8]> = objects.iter().map(|o| world_box(o, &cam.compose(&world[&o.id]))).collect();
        let clear = allow_collisions || (0..boxes.len()).all(|i| (i + 1..boxes.len()).all(|j| bbox_iou_3d(&boxes[i], &boxes[j]) == 0.0));
        if clear {
            return Ok(cam);
        }
    }
    Err(Error::PlacementFailure(MAX_PLACEMENT_ATTEMPTS))
}

/// Two equal boxes viewed by one camera, with correspondences generated
/// noiselessly from the given world poses.
fn two_box_scene(
    seed: u64,
    size: f64,
    poses: [RigidTransform; 2],
    azimuth: f64,
    elevation: f64,
    distance: f64,
    keypoints: usize,
) -> Result<GroundTruthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = Vec3::new(0.5 * size, 0.5 * size, 0.0);
    let objects = (0..2)
        .map(|i| {
            let kps = random_keypoints(&mut rng, &half, size, keypoints);
            SceneObject::from_box(object_id(i), kps, Vec3::new(-half.x, -half.y, 0.0), Vec3::new(half.x, half.y, size))
        })
        .collect::<Result<Vec<_>>>()?;
    let world: BTreeMap<String, RigidTransform> = objects.iter().zip(poses).map(|(o, p)| (o.id.clone(), p)).collect();
    let size_px = (640.0, 480.0);
    let k = default_camera(size_px.0, size_px.1)?;
    let pts: Vec<Vec3> = objects
        .iter()
        .flat_map(|o| {
            let tr = world[&o.id];
            o.bbox_corners.iter().map(move |p| tr.apply(p))
        })
        .collect();
    let cam = fit_camera(&pts, &k, size_px, azimuth, elevation, distance)?;
    let mut true_transforms = BTreeMap::new();
    let mut correspondences = BTreeMap::new();
    let mut outlier_labels = BTreeMap::new();
    for o in &objects {
        let pose = cam.compose(&world[&o.id]);
        let (c, labels) = observe(&mut rng, &k, size_px, &pose, &o.keypoints, 0.0, 0.0)?;
        true_transforms.insert(o.id.clone(), pose);
        correspondences.insert(o.id.clone(), c);
        outlier_labels.insert(o.id.clone(), labels);
    }
    Ok(GroundTruthScene {
        objects,
        true_transforms,
        world_transforms: world,
        camera_from_world: cam,
        camera: k,
        image_size: size_px,
        scene_extent: 3.0 * size,
        correspondences,
        outlier_labels,
    })
}

/// Two boxes side by side where the image shows the second one floating
/// `offset` above the floor: it is slid along its viewing ray, which keeps
/// its image position and changes only its apparent size.
pub fn floor_conflict_scene(offset: f64, seed: u64) -> Result<GroundTruthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(0.8..1.2);
    let elevation = CAMERA_ELEVATION_DEG.to_radians();
    let a = RigidTransform::new(UnitQuaternion::from_yaw(rng.random_range(-0.3..0.3)), Vec3::zeros());
    let b_pos = Vec3::new(0.0, 1.3 * size, 0.0);
    let b = RigidTransform::new(UnitQuaternion::from_yaw(rng.random_range(-0.3..0.3)), b_pos);
    let flat = two_box_scene(seed, size, [a, b], PI, elevation, 4.0 * size, 100)?;
    // slide b towards the camera until its base is `offset` higher
    let eye = flat.camera_from_world.inverse().translation;
    let centre = b_pos + Vec3::new(0.0, 0.0, 0.5 * size);
    let ray = (centre - eye).normalize();
    let shifted = RigidTransform::new(b.rotation, b_pos - ray * (offset / -ray.z));
    depict(&flat, [a, shifted])
}

/// Two equal boxes, one behind the other along the optical axis, overlapping
/// with the given hull IOU. The camera looks horizontally at mid-height so
/// the depth ambiguity runs parallel to the floor; it stands far enough back
/// that the image barely constrains depth.
pub fn overlap_conflict_scene(iou: f64, seed: u64) -> Result<GroundTruthScene> {
    if !(0.0..1.0).contains(&iou) || iou == 0.0 {
        return Err(Error::InvalidInput("overlap IOU must be in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = rng.random_range(0.8..1.2);
    // equal axis-aligned boxes offset by d·size along one axis: IOU = (1 - d) / (1 + d)
    let d = (1.0 - iou) / (1.0 + iou);
    let a = RigidTransform::IDENTITY;
    let b = RigidTransform::from_translation(Vec3::new(d * size, 0.0, 0.0));
    two_box_scene(seed, size, [a, b], PI, 0.0, 10.0 * size, 100)
}

/// Re-observes `scene` with new world poses from the same camera.
fn depict(scene: &GroundTruthScene, poses: [RigidTransform; 2]) -> Result<GroundTruthScene> {
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (o, p) in scene.objects.iter().zip(poses) {
        let pose = scene.camera_from_world.compose(&p);
        let (c, _) = observe(&mut rng, &scene.camera, scene.image_size, &pose, &o.keypoints, 0.0, 0.0)?;
        out.world_transforms.insert(o.id.clone(), p);
        out.true_transforms.insert(o.id.clone(), pose);
        out.correspondences.insert(o.id.clone(), c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorConfig {
    pub dim: usize,
    /// Cosine similarity between a planted scene descriptor and its render twin.
    pub planted_similarity: f64,
    /// Background descriptors added to the scene map.
    pub distractors: usize,
    /// Background entries added to each render map (masked out).
    pub render_background: usize,
    /// Objects absent from the layout image.
    pub absent: Vec<String>,
    pub seed: u64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            planted_similarity: 0.9,
            distractors: 200,
            render_background: 20,
            absent: Vec::new(),
            seed: 0,
        }
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Descriptor maps whose nearest-neighbour matches reproduce the scene's
/// correspondences. Present objects get scene twins at roughly
/// `planted_similarity`; absent objects get none.
pub fn planted_descriptors(scene: &GroundTruthScene, cfg: &DescriptorConfig) -> Result<(BTreeMap<String, DescriptorMap>, DescriptorMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = cfg.planted_similarity;
    let b = (1.0 - a * a).max(0.0).sqrt();
    let mut renders = BTreeMap::new();
    let mut scene_entries = Vec::new();
    for o in &scene.objects {
        let corrs = &scene.correspondences[&o.id];
        let mut entries = Vec::new();
        for (i, c) in corrs.iter().enumerate() {
            let d = unit_gaussian(&mut rng, cfg.dim);
            if !cfg.absent.contains(&o.id) {
                let noise = unit_gaussian(&mut rng, cfg.dim);
                // remove the component along d so the cosine is exactly a (up to f32 rounding)
                let along: f64 = noise.iter().zip(&d).map(|(x, y)| x * y).sum();
                let ortho: Vec<f64> = noise.iter().zip(&d).map(|(x, y)| x - along * y).collect();
                let on = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
                scene_entries.push(DescriptorEntry {
                    pixel: c.image_point,
                    point: None,
                    descriptor: d.iter().zip(&ortho).map(|(x, y)| (a * x + b * y / on) as f32).collect(),
                    foreground: None,
                });
            }
            entries.push(DescriptorEntry {
                pixel: PixelPoint::new(i as f64, 0.0),
                point: Some(c.object_point),
                descriptor: d.into_iter().map(|x| x as f32).collect(),
                foreground: Some(true),
            });
        }
        for _ in 0..cfg.render_background {
            entries.push(DescriptorEntry {
                pixel: PixelPoint::new(-1.0, -1.0),
                point: Some(Vec3::zeros()),
                descriptor: unit_gaussian(&mut rng, cfg.dim).into_iter().map(|x| x as f32).collect(),
                foreground: Some(false),
            });
        }
        renders.insert(o.id.clone(), DescriptorMap::new(entries)?);
    }
    for _ in 0..cfg.distractors {
        scene_entries.push(DescriptorEntry {
            pixel: PixelPoint::new(rng.random_range(0.0..scene.image_size.0), rng.random_range(0.0..scene.image_size.1)),
            point: None,
            descriptor: unit_gaussian(&mut rng, cfg.dim).into_iter().map(|x| x as f32).collect(),
            foreground: None,
        });
    }
    Ok((renders, DescriptorMap::new(scene_entries)?))
}

/// Rotation angle (degrees) of `true⁻¹ · est` and the translation gap.
pub fn pose_error(truth: &RigidTransform, est: &RigidTransform) -> (f64, f64) {
    (
        truth.rotation.angle_to(&est.rotation).to_degrees(),
        (truth.translation - est.translation).norm(),
    )
}
