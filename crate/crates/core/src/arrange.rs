//! End-to-end arrangement: per-object matching and RANSAC, neglect filtering,
//! joint refinement, iterative pair merging, and the baseline layouts.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Plane, RigidTransform, UnitQuaternion, Vec3};
use crate::matching::{match_descriptors, DescriptorMap, MatchReport, DEFAULT_NEGLECT_THRESHOLD};
use crate::pnp::{ransac_pnp, Correspondence, RansacConfig};
use crate::sipnp::{aabb, box_corners, optimize, SceneObject, SceneSolution, SiPnpConfig};

/// What is known about one object in one layout image.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Correspondences(Vec<Correspondence>),
    /// Descriptor maps of the object's renders, matched against the scene map.
    Descriptors(Vec<DescriptorMap>),
}

/// One layout image with the objects it should contain.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub description: String,
    pub camera: CameraIntrinsics,
    pub objects: Vec<SceneObject>,
    pub observations: BTreeMap<String, Observation>,
    pub scene_descriptors: Option<DescriptorMap>,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            o.validate()?;
            if !ids.insert(o.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate object id {}", o.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrangeConfig {
    pub sipnp: SiPnpConfig,
    pub ransac: RansacConfig,
    pub neglect_threshold: f64,
}

impl ArrangeConfig {
    pub fn for_camera(k: &CameraIntrinsics) -> Self {
        Self {
            sipnp: SiPnpConfig::default(),
            ransac: RansacConfig::for_camera(k),
            neglect_threshold: DEFAULT_NEGLECT_THRESHOLD,
        }
    }
}

/// Nominal camera for generated images: square pixels, 60° vertical field of
/// view, principal point at the image centre.
pub fn default_camera(width: f64, height: f64) -> Result<CameraIntrinsics> {
    CameraIntrinsics::from_vertical_fov(width, height, 60f64.to_radians())
}

/// Outcome of matching and RANSAC for one object.
#[derive(Debug, Clone)]
struct ObjectFit {
    report: MatchReport,
    pose: Option<RigidTransform>,
    inliers: Vec<usize>,
}

fn resolve_observation(spec_scene: Option<&DescriptorMap>, obs: Option<&Observation>) -> Result<Vec<Correspondence>> {
    match obs {
        None => Ok(Vec::new()),
        Some(Observation::Correspondences(c)) => Ok(c.clone()),
        Some(Observation::Descriptors(maps)) => {
            let scene = spec_scene.ok_or(Error::EmptyInput("descriptor observations need a scene descriptor map"))?;
            match_descriptors(maps, scene)
        }
    }
}

fn fit_object(k: &CameraIntrinsics, id: &str, corrs: Vec<Correspondence>, cfg: &ArrangeConfig, seed: u64) -> ObjectFit {
    let ransac_cfg = RansacConfig { seed, ..cfg.ransac };
    match ransac_pnp(k, &corrs, &ransac_cfg) {
        Ok(res) => ObjectFit {
            report: MatchReport::new(id, corrs, Some(&res), cfg.neglect_threshold),
            pose: Some(res.pose),
            inliers: res.inlier_indices,
        },
        Err(_) => ObjectFit {
            report: MatchReport::new(id, corrs, None, cfg.neglect_threshold),
            pose: None,
            inliers: Vec::new(),
        },
    }
}

/// RANSAC every object, drop neglected ones, and refine the rest jointly.
fn solve_objects(
    k: &CameraIntrinsics,
    objects: &[SceneObject],
    corrs: Vec<Vec<Correspondence>>,
    cfg: &ArrangeConfig,
) -> Result<SceneSolution> {
    let fits: Vec<ObjectFit> = objects
        .iter()
        .zip(corrs)
        .enumerate()
        .map(|(i, (o, c))| fit_object(k, &o.id, c, cfg, cfg.ransac.seed.wrapping_add(i as u64)))
        .collect();
    let mut kept_objects = Vec::new();
    let mut kept_poses = Vec::new();
    let mut kept_corrs = Vec::new();
    let mut neglected = Vec::new();
    let mut scores = BTreeMap::new();
    let mut inliers = BTreeMap::new();
    for (o, fit) in objects.iter().zip(&fits) {
        scores.insert(o.id.clone(), fit.report.matching_score);
        match fit.pose {
            Some(pose) if !fit.report.neglected => {
                kept_objects.push(o.clone());
                kept_poses.push(pose);
                kept_corrs.push(fit.inliers.iter().map(|&i| fit.report.correspondences[i]).collect());
                inliers.insert(o.id.clone(), fit.inliers.clone());
            }
            _ => neglected.push(o.id.clone()),
        }
    }
    if kept_objects.is_empty() {
        return Err(Error::AllObjectsNeglected(neglected));
    }
    let mut solution = optimize(k, &kept_objects, &kept_poses, &kept_corrs, &cfg.sipnp)?;
    solution.inliers = inliers;
    solution.matching_scores = scores;
    solution.neglected = neglected;
    Ok(solution)
}

/// Full single-image solve: match → RANSAC → neglect filter → joint refinement.
pub fn arrange_scene(spec: &SceneSpec, cfg: &ArrangeConfig) -> Result<SceneSolution> {
    spec.validate()?;
    if spec.objects.is_empty() {
        return Err(Error::AllObjectsNeglected(Vec::new()));
    }
    let corrs = spec
        .objects
        .iter()
        .map(|o| resolve_observation(spec.scene_descriptors.as_ref(), spec.observations.get(&o.id)))
        .collect::<Result<Vec<_>>>()?;
    solve_objects(&spec.camera, &spec.objects, corrs, cfg)
}

/// Several objects rigidly merged into one, expressed in the frame of the
/// first member.
#[derive(Debug, Clone, PartialEq)]
pub struct CompoundObject {
    pub id: String,
    /// Member objects with their transforms relative to the compound frame.
    pub members: Vec<(SceneObject, RigidTransform)>,
}

impl CompoundObject {
    pub fn single(obj: SceneObject) -> Self {
        Self {
            id: obj.id.clone(),
            members: vec![(obj, RigidTransform::IDENTITY)],
        }
    }

    pub fn member_ids(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|(o, _)| o.id.as_str())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.member_ids().any(|m| m == id)
    }

    pub fn merged_keypoints(&self) -> Vec<Vec3> {
        self.members
            .iter()
            .flat_map(|(o, rel)| o.keypoints.iter().map(move |p| rel.apply(p)))
            .collect()
    }

    /// Every member's collision boxes, in the compound frame.
    pub fn member_boxes(&self) -> Vec<[Vec3; 8]> {
        self.members
            .iter()
            .flat_map(|(o, rel)| o.collision_boxes.iter().map(move |b| b.map(|c| rel.apply(&c))))
            .collect()
    }

    /// Axis-aligned hull of all member boxes in the compound frame.
    pub fn union_bbox(&self) -> [Vec3; 8] {
        let corners: Vec<Vec3> = self.member_boxes().into_iter().flatten().collect();
        let (lo, hi) = aabb(&corners);
        box_corners(&lo, &hi)
    }

    /// The compound as a single rigid object: merged keypoints, the union box
    /// (whose bottom face meets the floor) and member-level collision boxes.
    pub fn as_scene_object(&self) -> Result<SceneObject> {
        let mut obj = SceneObject::new(self.id.clone(), self.merged_keypoints(), self.union_bbox(), [0, 1, 2, 3])?;
        obj.collision_boxes = self.member_boxes();
        Ok(obj)
    }

    /// Maps member-frame correspondences into the compound frame.
    pub fn map_correspondences(&self, per_member: &BTreeMap<String, Vec<Correspondence>>) -> Vec<Correspondence> {
        let mut out = Vec::new();
        for (o, rel) in &self.members {
            if let Some(cs) = per_member.get(&o.id) {
                out.extend(cs.iter().map(|c| Correspondence {
                    object_point: rel.apply(&c.object_point),
                    ..*c
                }));
            }
        }
        out
    }

    /// World transforms of every member given the compound's own transform.
    pub fn decompose(&self, compound_pose: &RigidTransform) -> BTreeMap<String, RigidTransform> {
        self.members
            .iter()
            .map(|(o, rel)| (o.id.clone(), compound_pose.compose(rel).canonical()))
            .collect()
    }
}

/// Merges (possibly compound) objects using their solved transforms. The
/// compound frame is the first object's solved frame.
pub fn merge_compounds(solution: &SceneSolution, parts: &[CompoundObject]) -> Result<CompoundObject> {
    let first = parts.first().ok_or(Error::EmptyInput("nothing to merge"))?;
    let pose_of = |c: &CompoundObject| {
        solution
            .transforms
            .get(&c.id)
            .copied()
            .ok_or_else(|| Error::MissingTransform(c.id.clone()))
    };
    let frame_inv = pose_of(first)?.inverse();
    let mut members = Vec::new();
    for part in parts {
        let to_frame = frame_inv.compose(&pose_of(part)?);
        for (o, rel) in &part.members {
            members.push((o.clone(), to_frame.compose(rel)));
        }
    }
    members[0].1 = RigidTransform::IDENTITY;
    let id = members.iter().map(|(o, _)| o.id.as_str()).collect::<Vec<_>>().join("+");
    Ok(CompoundObject { id, members })
}

pub fn merge_objects(solution: &SceneSolution, objects: &[SceneObject]) -> Result<CompoundObject> {
    let parts: Vec<CompoundObject> = objects.iter().cloned().map(CompoundObject::single).collect();
    merge_compounds(solution, &parts)
}

/// Iterative pair merging. Each step is one layout image holding the
/// compound built so far plus one new object (the first step holds two new
/// objects). Steps where any object is neglected are skipped so the caller
/// can supply a retry. The result is expressed in the camera frame of the
/// last successful step.
pub fn arrange_iterative(objects: &[SceneObject], steps: &[SceneSpec], cfg: &ArrangeConfig) -> Result<SceneSolution> {
    let by_id: BTreeMap<&str, &SceneObject> = objects.iter().map(|o| (o.id.as_str(), o)).collect();
    if by_id.len() != objects.len() {
        return Err(Error::InvalidInput("duplicate object ids".into()));
    }
    if objects.is_empty() {
        return Err(Error::AllObjectsNeglected(Vec::new()));
    }
    if steps.is_empty() && objects.len() == 1 {
        let o = &objects[0];
        let transforms = BTreeMap::from([(o.id.clone(), RigidTransform::IDENTITY)]);
        let floor = crate::geom::fit_plane(&o.bottom_vertices)?;
        return Ok(SceneSolution {
            transforms,
            floor,
            loss_trace: Vec::new(),
            inliers: BTreeMap::new(),
            matching_scores: BTreeMap::new(),
            neglected: Vec::new(),
            diverged: false,
            best_step: 0,
        });
    }

    let mut compound: Option<CompoundObject> = None;
    let mut last: Option<(RigidTransform, SceneSolution)> = None;
    let mut scores = BTreeMap::new();
    let mut inliers = BTreeMap::new();
    let mut diverged = false;
    for (step_idx, step) in steps.iter().enumerate() {
        step.camera.validate()?;
        let present: Vec<&str> = step
            .observations
            .keys()
            .map(String::as_str)
            .filter(|id| by_id.contains_key(id))
            .collect();
        let fresh: Vec<&str> = present
            .iter()
            .copied()
            .filter(|id| compound.as_ref().is_none_or(|c| !c.contains(id)))
            .collect();
        let parts: Vec<CompoundObject> = match &compound {
            None => {
                if fresh.len() != 2 {
                    return Err(Error::InvalidInput(format!(
                        "step {step_idx}: first step needs exactly two objects, got {}",
                        fresh.len()
                    )));
                }
                // keep the caller's object order within the step
                let mut ordered: Vec<&SceneObject> = step.objects.iter().filter(|o| fresh.contains(&o.id.as_str())).collect();
                if ordered.len() != 2 {
                    ordered = fresh.iter().map(|id| by_id[id]).collect();
                }
                ordered.into_iter().cloned().map(CompoundObject::single).collect()
            }
            Some(c) => {
                if fresh.len() != 1 {
                    return Err(Error::InvalidInput(format!(
                        "step {step_idx}: expected exactly one new object, got {}",
                        fresh.len()
                    )));
                }
                vec![c.clone(), CompoundObject::single(by_id[fresh[0]].clone())]
            }
        };

        let mut per_member = BTreeMap::new();
        for id in &present {
            let c = resolve_observation(step.scene_descriptors.as_ref(), step.observations.get(*id))?;
            per_member.insert(id.to_string(), c);
        }
        let step_objects = parts.iter().map(CompoundObject::as_scene_object).collect::<Result<Vec<_>>>()?;
        let step_corrs: Vec<Vec<Correspondence>> = parts.iter().map(|p| p.map_correspondences(&per_member)).collect();
        let step_cfg = ArrangeConfig {
            ransac: RansacConfig {
                seed: cfg.ransac.seed.wrapping_add(1000 * step_idx as u64),
                ..cfg.ransac
            },
            ..*cfg
        };
        let solution = match solve_objects(&step.camera, &step_objects, step_corrs, &step_cfg) {
            Ok(s) if s.neglected.is_empty() => s,
            // the image missed an object: wait for a retry step
            Ok(_) | Err(Error::AllObjectsNeglected(_)) => continue,
            Err(e) => return Err(e),
        };
        for p in &parts {
            if p.members.len() == 1 {
                scores.insert(p.id.clone(), solution.matching_scores[&p.id]);
                inliers.insert(p.id.clone(), solution.inliers[&p.id].clone());
            }
        }
        diverged |= solution.diverged;
        let merged = merge_compounds(&solution, &parts)?;
        let frame_pose = solution.transforms[&parts[0].id];
        compound = Some(merged);
        last = Some((frame_pose, solution));
    }

    let (Some(compound), Some((frame_pose, solution))) = (compound, last) else {
        return Err(Error::AllObjectsNeglected(objects.iter().map(|o| o.id.clone()).collect()));
    };
    let transforms = compound.decompose(&frame_pose);
    let neglected = objects.iter().filter(|o| !compound.contains(&o.id)).map(|o| o.id.clone()).collect();
    Ok(SceneSolution {
        transforms,
        floor: solution.floor,
        loss_trace: solution.loss_trace,
        inliers,
        matching_scores: scores,
        neglected,
        diverged,
        best_step: solution.best_step,
    })
}

/// Uniform random layout: `x, y ~ U[-2, 2]`, `z = 0`, yaw `~ U[-180°, 180°]`.
pub fn baseline_uniform(objects: &[SceneObject], seed: u64) -> BTreeMap<String, RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    objects
        .iter()
        .map(|o| {
            let x = rng.random_range(-2.0..=2.0);
            let y = rng.random_range(-2.0..=2.0);
            let yaw = rng.random_range(-PI..=PI);
            (o.id.clone(), RigidTransform::new(UnitQuaternion::from_yaw(yaw), Vec3::new(x, y, 0.0)))
        })
        .collect()
}

/// Object-frame axis that circular layouts point at the centre.
pub const FORWARD_AXIS: Vec3 = Vec3::new(1.0, 0.0, 0.0);

/// Objects evenly spaced on a circle in the ground plane, each facing the centre.
pub fn baseline_circular(objects: &[SceneObject], radius: f64) -> Result<BTreeMap<String, RigidTransform>> {
    if !radius.is_finite() || radius <= 0.0 {
        return Err(Error::InvalidInput(format!("radius must be positive, got {radius}")));
    }
    let n = objects.len() as f64;
    Ok(objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let angle = 2.0 * PI * k as f64 / n;
            let pos = Vec3::new(radius * angle.cos(), radius * angle.sin(), 0.0);
            (o.id.clone(), RigidTransform::new(UnitQuaternion::from_yaw(angle + PI), pos))
        })
        .collect())
}

/// Ground-plane floor used by the baseline layouts.
pub fn baseline_floor() -> Plane {
    Plane::ground()
}
