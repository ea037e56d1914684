//! Versioned JSON documents: scene, solution, ground truth and the step
//! manifest for iterative solves. Unknown fields are ignored on read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layoutpnp::arrange::{Observation, SceneSpec};
use layoutpnp::geom::{CameraIntrinsics, PixelPoint, Plane, RigidTransform, UnitQuaternion, Vec3};
use layoutpnp::pnp::Correspondence;
use layoutpnp::sipnp::{LossComponents, LossRecord, SceneObject, SceneSolution};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dmap;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: &str = "1";
/// Largest accepted deviation of a stored quaternion from unit norm.
pub const QUAT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraJson {
    pub fn intrinsics(&self) -> layoutpnp::Result<CameraIntrinsics> {
        CameraIntrinsics::with_skew(self.fx, self.fy, self.cx, self.cy, self.skew)
    }

    pub fn from_intrinsics(k: &CameraIntrinsics, size: (f64, f64)) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            skew: k.skew,
            width: size.0,
            height: size.1,
        }
    }
}

fn default_similarity() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceJson {
    pub object_point: [f64; 3],
    pub image_point: [f64; 2],
    #[serde(default = "default_similarity")]
    pub similarity: f64,
}

impl From<&Correspondence> for CorrespondenceJson {
    fn from(c: &Correspondence) -> Self {
        Self {
            object_point: c.object_point.into(),
            image_point: [c.image_point.u, c.image_point.v],
            similarity: c.similarity,
        }
    }
}

impl From<&CorrespondenceJson> for Correspondence {
    fn from(c: &CorrespondenceJson) -> Self {
        Correspondence::new(
            Vec3::from(c.object_point),
            PixelPoint::new(c.image_point[0], c.image_point[1]),
            c.similarity,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectJson {
    pub id: String,
    pub keypoints: Vec<[f64; 3]>,
    pub bbox_corners: [[f64; 3]; 8],
    pub bottom_vertex_indices: [usize; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<Vec<CorrespondenceJson>>,
    /// Descriptor-map files of the object's renders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_descriptors: Option<Vec<String>>,
}

impl ObjectJson {
    /// The object's geometry; the bottom indices are recovered by matching
    /// bottom vertices against the corners.
    pub fn from_object(o: &SceneObject) -> Self {
        let bottom = o
            .bottom_vertices
            .map(|v| o.bbox_corners.iter().position(|c| *c == v).unwrap_or(0));
        Self {
            id: o.id.clone(),
            keypoints: o.keypoints.iter().map(|&p| p.into()).collect(),
            bbox_corners: o.bbox_corners.map(Into::into),
            bottom_vertex_indices: bottom,
            mesh: o.mesh.clone(),
            correspondences: None,
            render_descriptors: None,
        }
    }

    pub fn to_object(&self) -> layoutpnp::Result<SceneObject> {
        let mut o = SceneObject::new(
            self.id.clone(),
            self.keypoints.iter().map(|&p| Vec3::from(p)).collect(),
            self.bbox_corners.map(Vec3::from),
            self.bottom_vertex_indices,
        )?;
        o.mesh = self.mesh.clone();
        Ok(o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    /// Unit quaternion, `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformJson {
    fn from(t: &RigidTransform) -> Self {
        Self {
            rotation: t.rotation.to_array(),
            translation: t.translation.into(),
        }
    }
}

impl TransformJson {
    pub fn to_transform(&self) -> std::result::Result<RigidTransform, String> {
        let q = self.rotation;
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOLERANCE {
            return Err(format!("quaternion {q:?} is not unit (norm {norm})"));
        }
        if self.translation.iter().any(|c| !c.is_finite()) {
            return Err("translation must be finite".into());
        }
        let rotation = UnitQuaternion::from_array(q).map_err(|e| e.to_string())?;
        Ok(RigidTransform::new(rotation, Vec3::from(self.translation)))
    }
}

fn transforms_from_json(path: &Path, m: &BTreeMap<String, TransformJson>) -> Result<BTreeMap<String, RigidTransform>> {
    m.iter()
        .map(|(id, t)| {
            t.to_transform()
                .map(|tr| (id.clone(), tr))
                .map_err(|e| CliError::schema(path, format!("transform of {id}: {e}")))
        })
        .collect()
}

fn transforms_to_json(m: &BTreeMap<String, RigidTransform>) -> BTreeMap<String, TransformJson> {
    m.iter().map(|(id, t)| (id.clone(), t.into())).collect()
}

fn check_version(path: &Path, version: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(CliError::schema(path, format!("unsupported version {version:?}, expected {FORMAT_VERSION:?}")));
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("file types serialize infallibly");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value))
}

/// Resolves `reference` relative to the directory holding `file`.
pub fn resolve(file: &Path, reference: &str) -> PathBuf {
    let r = Path::new(reference);
    if r.is_absolute() {
        r.to_path_buf()
    } else {
        file.parent().unwrap_or(Path::new("")).join(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: String,
    #[serde(default)]
    pub description: String,
    pub camera: CameraJson,
    pub objects: Vec<ObjectJson>,
    /// Descriptor-map file of the layout image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_descriptors: Option<String>,
    /// Object-to-camera transforms, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<BTreeMap<String, TransformJson>>,
}

/// A scene file checked and converted to library types.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub path: PathBuf,
    pub file: SceneFile,
    pub spec: SceneSpec,
    pub image_size: (f64, f64),
    pub ground_truth: Option<BTreeMap<String, RigidTransform>>,
}

impl LoadedScene {
    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.spec.objects.iter().find(|o| o.id == id)
    }
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let file: SceneFile = read_json(path)?;
    check_version(path, &file.version)?;
    let camera = file.camera.intrinsics().map_err(|e| CliError::schema(path, format!("camera: {e}")))?;
    if !(file.camera.width > 0.0 && file.camera.height > 0.0) {
        return Err(CliError::schema(path, "camera width and height must be positive"));
    }
    let mut objects = Vec::new();
    let mut observations = BTreeMap::new();
    for o in &file.objects {
        if objects.iter().any(|x: &SceneObject| x.id == o.id) {
            return Err(CliError::schema(path, format!("duplicate object id {}", o.id)));
        }
        objects.push(o.to_object().map_err(|e| CliError::schema(path, e.to_string()))?);
        let obs = match (&o.correspondences, &o.render_descriptors) {
            (Some(_), Some(_)) => {
                return Err(CliError::schema(path, format!("object {}: give correspondences or render descriptors, not both", o.id)))
            }
            (Some(c), None) => Some(Observation::Correspondences(c.iter().map(Correspondence::from).collect())),
            (None, Some(files)) => Some(Observation::Descriptors(
                files.iter().map(|f| dmap::read(&resolve(path, f))).collect::<Result<Vec<_>>>()?,
            )),
            (None, None) => None,
        };
        if let Some(obs) = obs {
            observations.insert(o.id.clone(), obs);
        }
    }
    let scene_descriptors = file.scene_descriptors.as_ref().map(|f| dmap::read(&resolve(path, f))).transpose()?;
    if scene_descriptors.is_none() && observations.values().any(|o| matches!(o, Observation::Descriptors(_))) {
        return Err(CliError::schema(path, "render descriptors given without scene_descriptors"));
    }
    let ground_truth = file.ground_truth.as_ref().map(|m| transforms_from_json(path, m)).transpose()?;
    let spec = SceneSpec {
        description: file.description.clone(),
        camera,
        objects,
        observations,
        scene_descriptors,
    };
    Ok(LoadedScene {
        path: path.to_path_buf(),
        image_size: (file.camera.width, file.camera.height),
        file,
        spec,
        ground_truth,
    })
}

/// Loss values; non-finite entries are stored as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossJson {
    pub step: usize,
    pub reprojection: Option<f64>,
    pub surface: Option<f64>,
    pub collision: Option<f64>,
    pub total: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl From<&LossRecord> for LossJson {
    fn from(r: &LossRecord) -> Self {
        Self {
            step: r.step,
            reprojection: finite(r.loss.reprojection),
            surface: finite(r.loss.surface),
            collision: finite(r.loss.collision),
            total: finite(r.loss.total),
        }
    }
}

impl From<&LossJson> for LossRecord {
    fn from(r: &LossJson) -> Self {
        let v = |x: Option<f64>| x.unwrap_or(f64::INFINITY);
        LossRecord {
            step: r.step,
            loss: LossComponents {
                reprojection: v(r.reprojection),
                surface: v(r.surface),
                collision: v(r.collision),
                total: v(r.total),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub version: String,
    pub transforms: BTreeMap<String, TransformJson>,
    /// Floor plane `[a, b, c, d]` with unit normal, `a·x + b·y + c·z + d = 0`.
    pub floor: [f64; 4],
    #[serde(default)]
    pub loss_trace: Vec<LossJson>,
    #[serde(default)]
    pub matching_scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub neglected: Vec<String>,
    #[serde(default)]
    pub inliers: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub diverged: bool,
    #[serde(default)]
    pub best_step: usize,
}

impl From<&SceneSolution> for SolutionFile {
    fn from(s: &SceneSolution) -> Self {
        Self {
            version: FORMAT_VERSION.into(),
            transforms: transforms_to_json(&s.transforms),
            floor: s.floor.coeffs,
            loss_trace: s.loss_trace.iter().map(LossJson::from).collect(),
            matching_scores: s.matching_scores.clone(),
            neglected: s.neglected.clone(),
            inliers: s.inliers.clone(),
            diverged: s.diverged,
            best_step: s.best_step,
        }
    }
}

impl SolutionFile {
    pub fn to_solution(&self, path: &Path) -> Result<SceneSolution> {
        check_version(path, &self.version)?;
        let floor = Plane::from_array(self.floor).map_err(|e| CliError::schema(path, format!("floor: {e}")))?;
        Ok(SceneSolution {
            transforms: transforms_from_json(path, &self.transforms)?,
            floor,
            loss_trace: self.loss_trace.iter().map(LossRecord::from).collect(),
            inliers: self.inliers.clone(),
            matching_scores: self.matching_scores.clone(),
            neglected: self.neglected.clone(),
            diverged: self.diverged,
            best_step: self.best_step,
        })
    }
}

pub fn load_solution(path: &Path) -> Result<SceneSolution> {
    let file: SolutionFile = read_json(path)?;
    file.to_solution(path)
}

/// Ground-truth sidecar written next to synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub version: String,
    pub scene_extent: f64,
    pub camera_from_world: TransformJson,
    /// Object-to-camera transforms.
    pub transforms: BTreeMap<String, TransformJson>,
    /// Object-to-world transforms (world z-up, floor at z = 0).
    pub world_transforms: BTreeMap<String, TransformJson>,
    /// Per object, `true` marks a planted outlier correspondence.
    pub outlier_labels: BTreeMap<String, Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct Truth {
    pub scene_extent: Option<f64>,
    pub transforms: BTreeMap<String, RigidTransform>,
}

pub fn load_truth(path: &Path) -> Result<Truth> {
    let file: TruthFile = read_json(path)?;
    check_version(path, &file.version)?;
    Ok(Truth {
        scene_extent: Some(file.scene_extent),
        transforms: transforms_from_json(path, &file.transforms)?,
    })
}

impl TruthFile {
    pub fn from_scene(scene: &layoutpnp::synth::GroundTruthScene) -> Self {
        Self {
            version: FORMAT_VERSION.into(),
            scene_extent: scene.scene_extent,
            camera_from_world: (&scene.camera_from_world).into(),
            transforms: transforms_to_json(&scene.true_transforms),
            world_transforms: transforms_to_json(&scene.world_transforms),
            outlier_labels: scene.outlier_labels.clone(),
        }
    }
}

/// Ordered scene files for an iterative solve, paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub version: String,
    pub steps: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<LoadedScene>> {
    let m: StepManifest = read_json(path)?;
    check_version(path, &m.version)?;
    m.steps.iter().map(|s| load_scene(&resolve(path, s))).collect()
}

/// Scene file for a library scene spec with inline correspondences.
pub fn scene_file_from_spec(spec: &SceneSpec, image_size: (f64, f64)) -> SceneFile {
    let objects = spec
        .objects
        .iter()
        .map(|o| {
            let mut j = ObjectJson::from_object(o);
            if let Some(Observation::Correspondences(c)) = spec.observations.get(&o.id) {
                j.correspondences = Some(c.iter().map(CorrespondenceJson::from).collect());
            }
            j
        })
        .collect();
    SceneFile {
        version: FORMAT_VERSION.into(),
        description: spec.description.clone(),
        camera: CameraJson::from_intrinsics(&spec.camera, image_size),
        objects,
        scene_descriptors: None,
        ground_truth: None,
    }
}
