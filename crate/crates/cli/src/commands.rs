//! The subcommands as library functions; `main` only parses flags and writes files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use layoutpnp::arrange::{
    arrange_iterative, arrange_scene, baseline_circular, baseline_floor, baseline_uniform, ArrangeConfig,
};
use layoutpnp::geom::RigidTransform;
use layoutpnp::pnp::RansacConfig;
use layoutpnp::sipnp::{collision_loss, surface_loss, SceneSolution, SiPnpConfig};
use layoutpnp::synth::{generate_scene, iteration_specs, planted_descriptors, pose_error, DescriptorConfig, GroundTruthScene, SynthConfig};
use serde::Serialize;

use crate::dmap;
use crate::error::{CliError, Result};
use crate::export;
use crate::files::{
    load_manifest, load_scene, load_solution, load_truth, scene_file_from_spec, write_json, LoadedScene, LossJson, SceneFile, SolutionFile,
    StepManifest, Truth, TruthFile, FORMAT_VERSION,
};

/// Overrides for the solver defaults.
#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub omega_surface: Option<f64>,
    pub omega_collision: Option<f64>,
    pub inlier_threshold: Option<f64>,
    pub neglect_threshold: Option<f64>,
    pub iterative: Option<PathBuf>,
    pub freeze_plane: bool,
}

impl SolveOptions {
    pub fn config(&self, scene: &LoadedScene) -> Result<ArrangeConfig> {
        let (w, h) = scene.image_size;
        let mut ransac = RansacConfig::for_image(w, h);
        if let Some(seed) = self.seed {
            ransac.seed = seed;
        }
        if let Some(t) = self.inlier_threshold {
            if t.is_nan() || t <= 0.0 {
                return Err(CliError::Input(format!("inlier threshold must be positive, got {t}")));
            }
            ransac.inlier_threshold_px = t;
        }
        let defaults = SiPnpConfig::default();
        let sipnp = SiPnpConfig {
            omega_surface: self.omega_surface.unwrap_or(defaults.omega_surface),
            omega_collision: self.omega_collision.unwrap_or(defaults.omega_collision),
            learning_rate: self.lr.unwrap_or(defaults.learning_rate),
            steps: self.steps.unwrap_or(defaults.steps),
            optimize_plane: !self.freeze_plane,
            ..defaults
        };
        sipnp.validate()?;
        let mut cfg = ArrangeConfig::for_camera(&scene.spec.camera);
        cfg.sipnp = sipnp;
        cfg.ransac = ransac;
        if let Some(t) = self.neglect_threshold {
            cfg.neglect_threshold = t;
        }
        Ok(cfg)
    }
}

/// Runs the single-image or iterative pipeline on a scene file.
pub fn solve(scene_path: &Path, opts: &SolveOptions) -> Result<SceneSolution> {
    let scene = load_scene(scene_path)?;
    let cfg = opts.config(&scene)?;
    let solution = match &opts.iterative {
        None => arrange_scene(&scene.spec, &cfg)?,
        Some(manifest) => {
            let steps = load_manifest(manifest)?;
            for step in &steps {
                for id in step.spec.observations.keys() {
                    if scene.object(id).is_none() {
                        return Err(CliError::IdMismatch {
                            message: format!("step {} observes {id}, which the scene does not define", step.path.display()),
                            ids: vec![id.clone()],
                        });
                    }
                }
            }
            let specs: Vec<_> = steps.into_iter().map(|s| s.spec).collect();
            arrange_iterative(&scene.spec.objects, &specs, &cfg)?
        }
    };
    Ok(solution)
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub config: SynthConfig,
    /// Emit descriptor-map sidecars instead of inline correspondences.
    pub descriptors: bool,
    /// Objects left out of the layout image (descriptor mode only).
    pub absent: Vec<String>,
    /// Also write per-step scenes and a manifest for an iterative solve.
    pub iterative: bool,
}

/// Paths written by [`synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutputs {
    pub scene: PathBuf,
    pub truth: PathBuf,
    pub extra: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Generates a synthetic scene and writes it with its ground-truth sidecar.
pub fn synth(out: &Path, truth_path: Option<&Path>, opts: &SynthOptions) -> Result<SynthOutputs> {
    if !opts.absent.is_empty() && !opts.descriptors {
        return Err(CliError::Input("--absent needs --descriptors".into()));
    }
    if opts.iterative && opts.descriptors {
        return Err(CliError::Input("--iterative writes correspondence scenes; drop --descriptors".into()));
    }
    let scene = generate_scene(&opts.config)?;
    for id in &opts.absent {
        if !scene.true_transforms.contains_key(id) {
            return Err(CliError::IdMismatch {
                message: format!("--absent {id} names no generated object"),
                ids: vec![id.clone()],
            });
        }
    }
    let mut file = scene_file_from_spec(&scene.to_scene_spec(), scene.image_size);
    file.description = format!("synthetic scene, seed {}", opts.config.seed);
    let mut extra = Vec::new();
    if opts.descriptors {
        let dcfg = DescriptorConfig {
            absent: opts.absent.clone(),
            seed: opts.config.seed,
            ..DescriptorConfig::default()
        };
        let (renders, scene_map) = planted_descriptors(&scene, &dcfg)?;
        for obj in &mut file.objects {
            let path = sibling(out, &format!("{}.dmap", obj.id));
            dmap::write(&path, &renders[&obj.id])?;
            obj.correspondences = None;
            obj.render_descriptors = Some(vec![file_name(&path)]);
            extra.push(path);
        }
        let path = sibling(out, "scene.dmap");
        dmap::write(&path, &scene_map)?;
        file.scene_descriptors = Some(file_name(&path));
        extra.push(path);
    }
    write_json(out, &file)?;
    let truth = truth_path.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "truth.json"));
    write_json(&truth, &TruthFile::from_scene(&scene))?;

    let manifest = if opts.iterative {
        Some(write_steps(out, &scene, &opts.config, &mut extra)?)
    } else {
        None
    };
    Ok(SynthOutputs {
        scene: out.to_path_buf(),
        truth,
        extra,
        manifest,
    })
}

fn write_steps(out: &Path, scene: &GroundTruthScene, cfg: &SynthConfig, extra: &mut Vec<PathBuf>) -> Result<PathBuf> {
    let order: Vec<String> = scene.objects.iter().map(|o| o.id.clone()).collect();
    if order.len() < 2 {
        return Err(CliError::Input("--iterative needs at least two objects".into()));
    }
    let specs = iteration_specs(scene, &order, cfg.noise_sigma_px, cfg.seed)?;
    let mut names = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let path = sibling(out, &format!("step{i}.json"));
        let mut file = scene_file_from_spec(spec, scene.image_size);
        file.description = format!("iteration step {i}");
        write_json(&path, &file)?;
        names.push(file_name(&path));
        extra.push(path);
    }
    let manifest = sibling(out, "steps.json");
    write_json(
        &manifest,
        &StepManifest {
            version: FORMAT_VERSION.into(),
            steps: names,
        },
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub truth: Option<PathBuf>,
    pub max_rotation_deg: f64,
    /// Absolute bound; defaults to 2% of the scene extent when known.
    pub max_translation: Option<f64>,
    /// Map the solution onto the truth through the first shared object first.
    pub align: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            truth: None,
            max_rotation_deg: 2.0,
            max_translation: None,
            align: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectError {
    pub rotation_deg: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub version: String,
    pub objects: BTreeMap<String, ObjectError>,
    pub neglected: Vec<String>,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub final_loss: Option<LossJson>,
    pub surface: f64,
    pub collision: f64,
    pub threshold_rotation_deg: f64,
    pub threshold_translation: f64,
    pub pass: bool,
}

impl EvalReport {
    pub fn human(&self) -> String {
        let mut s = String::new();
        for (id, e) in &self.objects {
            s.push_str(&format!("{id}: rotation {:.6} deg, translation {:.6e}\n", e.rotation_deg, e.translation));
        }
        for id in &self.neglected {
            s.push_str(&format!("{id}: neglected\n"));
        }
        s.push_str(&format!(
            "max rotation {:.6} deg (limit {}), max translation {:.6e} (limit {})\n",
            self.max_rotation_deg, self.threshold_rotation_deg, self.max_translation, self.threshold_translation
        ));
        s.push_str(&format!("surface {:.6e}, collision {:.6e}\n", self.surface, self.collision));
        s.push_str(if self.pass { "PASS\n" } else { "FAIL\n" });
        s
    }
}

/// Per-object pose errors against ground truth plus physical plausibility terms.
pub fn eval(scene_path: &Path, solution_path: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let scene = load_scene(scene_path)?;
    let sol = load_solution(solution_path)?;
    let truth = match (&opts.truth, &scene.ground_truth) {
        (Some(p), _) => load_truth(p)?,
        (None, Some(gt)) => Truth {
            scene_extent: None,
            transforms: gt.clone(),
        },
        (None, None) => return Err(CliError::Input("no ground truth: pass --truth or embed ground_truth in the scene".into())),
    };
    evaluate(&scene, &sol, &truth, opts)
}

pub fn evaluate(scene: &LoadedScene, sol: &SceneSolution, truth: &Truth, opts: &EvalOptions) -> Result<EvalReport> {
    let mut missing = Vec::new();
    for o in &scene.spec.objects {
        if !truth.transforms.contains_key(&o.id) || (!sol.transforms.contains_key(&o.id) && !sol.neglected.contains(&o.id)) {
            missing.push(o.id.clone());
        }
    }
    for id in sol.transforms.keys().chain(&sol.neglected) {
        if scene.object(id).is_none() {
            missing.push(id.clone());
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(CliError::IdMismatch {
            message: format!("objects not shared by scene, solution and truth: {}", missing.join(", ")),
            ids: missing,
        });
    }
    let align = if opts.align {
        let first = scene.spec.objects.iter().find(|o| sol.transforms.contains_key(&o.id));
        first.map(|o| truth.transforms[&o.id].compose(&sol.transforms[&o.id].inverse()))
    } else {
        None
    };
    let mut objects = BTreeMap::new();
    let mut placed = Vec::new();
    let mut poses = Vec::new();
    for o in &scene.spec.objects {
        let Some(est) = sol.transforms.get(&o.id) else { continue };
        let est = align.map(|g| g.compose(est)).unwrap_or(*est);
        let (rotation_deg, translation) = pose_error(&truth.transforms[&o.id], &est);
        objects.insert(o.id.clone(), ObjectError { rotation_deg, translation });
        placed.push(o.clone());
        poses.push(sol.transforms[&o.id]);
    }
    let max_rotation_deg = objects.values().map(|e| e.rotation_deg).fold(0.0, f64::max);
    let max_translation = objects.values().map(|e| e.translation).fold(0.0, f64::max);
    let threshold_translation = opts.max_translation.unwrap_or(0.02 * truth.scene_extent.unwrap_or(1.0));
    let pass = sol.neglected.is_empty() && max_rotation_deg <= opts.max_rotation_deg && max_translation <= threshold_translation;
    Ok(EvalReport {
        version: FORMAT_VERSION.into(),
        neglected: sol.neglected.clone(),
        max_rotation_deg,
        max_translation,
        final_loss: sol.loss_trace.last().map(LossJson::from),
        surface: surface_loss(&placed, &poses, &sol.floor),
        collision: collision_loss(&placed, &poses),
        threshold_rotation_deg: opts.max_rotation_deg,
        threshold_translation,
        pass,
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Uniform,
    Circular,
}

/// Baseline layout in the floor frame (z up, floor at z = 0).
pub fn baseline(scene_path: &Path, mode: BaselineMode, seed: u64, radius: f64) -> Result<SceneSolution> {
    let scene = load_scene(scene_path)?;
    let objects = &scene.spec.objects;
    let transforms: BTreeMap<String, RigidTransform> = match mode {
        BaselineMode::Uniform => baseline_uniform(objects, seed),
        BaselineMode::Circular => baseline_circular(objects, radius)?,
    };
    Ok(SceneSolution {
        transforms,
        floor: baseline_floor(),
        loss_trace: Vec::new(),
        inliers: BTreeMap::new(),
        matching_scores: BTreeMap::new(),
        neglected: Vec::new(),
        diverged: false,
        best_step: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Obj,
    Svg,
}

pub fn export(scene_path: &Path, solution_path: &Path, format: ExportFormat) -> Result<String> {
    let scene = load_scene(scene_path)?;
    let sol = load_solution(solution_path)?;
    match format {
        ExportFormat::Obj => export::to_obj(&scene, &sol),
        ExportFormat::Svg => export::to_svg(&scene, &sol),
    }
}

pub fn solution_file(sol: &SceneSolution) -> SolutionFile {
    SolutionFile::from(sol)
}

/// Scene file for an in-memory generated scene (handy for tests and tooling).
pub fn synthetic_scene_file(scene: &GroundTruthScene) -> SceneFile {
    scene_file_from_spec(&scene.to_scene_spec(), scene.image_size)
}
