use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layoutpnp::arrange::{arrange_scene, ArrangeConfig};
use layoutpnp::geom::{RigidTransform, UnitQuaternion, Vec3};
use layoutpnp::synth::{generate_scene, SynthConfig};
use layoutpnp_cli::files::{read_json, write_json, SceneFile, SolutionFile, TransformJson, TruthFile, FORMAT_VERSION};
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutpnp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error record on stderr");
    serde_json::from_str(line).expect("error record is JSON")
}

fn truth(dir: &Path) -> TruthFile {
    read_json(&dir.join("s.truth.json")).unwrap()
}

fn solution_from(transforms: BTreeMap<String, TransformJson>) -> SolutionFile {
    SolutionFile {
        version: FORMAT_VERSION.into(),
        transforms,
        floor: [0.0, 0.0, 1.0, 0.0],
        loss_trace: Vec::new(),
        matching_scores: BTreeMap::new(),
        neglected: Vec::new(),
        inliers: BTreeMap::new(),
        diverged: false,
        best_step: 0,
    }
}

fn pose(t: &TransformJson) -> RigidTransform {
    t.to_transform().unwrap()
}

#[test]
fn solve_noiseless_synth_scene() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "2"]);
    ok(d, &["solve", "s.json", "-o", "sol.json"]);
    let sol: SolutionFile = read_json(&d.join("sol.json")).unwrap();
    let truth = truth(d);
    for (id, t) in &truth.transforms {
        let (a, b) = (pose(t), pose(&sol.transforms[id]));
        assert!(a.rotation.angle_to(&b.rotation).to_degrees() < 1e-3);
        assert!((a.translation - b.translation).norm() < 1e-3);
    }
    for q in sol.transforms.values() {
        let n: f64 = q.rotation.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    let out = ok(d, &["eval", "s.json", "sol.json", "--truth", "s.truth.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn cli_matches_library_exactly() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "5", "--noise", "1", "--outliers", "0.3"]);
    ok(d, &["solve", "s.json", "-o", "sol.json"]);
    let sol: SolutionFile = read_json(&d.join("sol.json")).unwrap();

    let cfg = SynthConfig {
        seed: 5,
        noise_sigma_px: 1.0,
        outlier_fraction: 0.3,
        ..Default::default()
    };
    let scene = generate_scene(&cfg).unwrap();
    let lib = arrange_scene(&scene.to_scene_spec(), &ArrangeConfig::for_camera(&scene.camera)).unwrap();
    assert_eq!(SolutionFile::from(&lib), sol);
}

#[test]
fn absent_object_is_neglected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "3", "--descriptors", "--absent", "object01"]);
    assert!(d.join("s.scene.dmap").exists() && d.join("s.object00.dmap").exists());
    ok(d, &["solve", "s.json", "-o", "sol.json"]);
    let sol: SolutionFile = read_json(&d.join("sol.json")).unwrap();
    assert_eq!(sol.neglected, vec!["object01".to_string()]);
    assert!(sol.transforms.contains_key("object00") && !sol.transforms.contains_key("object01"));
    assert!(sol.matching_scores["object00"] > 0.7);
    assert!(sol.matching_scores["object01"] < 0.3);
}

#[test]
fn malformed_scene_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), "{\"version\": \"1\", \"camera\": ").unwrap();
    let out = run(d, &["solve", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["kind"], "schema");

    std::fs::write(d.join("v2.json"), r#"{"version": "2", "camera": {"fx":1,"fy":1,"cx":1,"cy":1,"width":2,"height":2}, "objects": []}"#).unwrap();
    let out = run(d, &["solve", "v2.json"]);
    assert_eq!(out.status.code(), Some(1));

    let out = run(d, &["solve", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["kind"], "io");
}

#[test]
fn synth_is_deterministic_and_counts() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "a.json", "--seed", "7", "--objects", "3", "--outliers", "0.3"]);
    ok(d, &["synth", "-o", "b.json", "--seed", "7", "--objects", "3", "--outliers", "0.3"]);
    for suffix in ["json", "truth.json"] {
        let a = std::fs::read(d.join(format!("a.{suffix}"))).unwrap();
        let b = std::fs::read(d.join(format!("b.{suffix}"))).unwrap();
        assert_eq!(a, b, "{suffix}");
    }
    let scene: SceneFile = read_json(&d.join("a.json")).unwrap();
    assert_eq!(scene.objects.len(), 3);
    let truth: TruthFile = read_json(&d.join("a.truth.json")).unwrap();
    for labels in truth.outlier_labels.values() {
        assert_eq!(labels.iter().filter(|&&l| l).count() * 10, labels.len() * 3);
    }
}

#[test]
fn eval_truth_perturbation_and_mismatch() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "4"]);
    let truth = truth(d);

    write_json(&d.join("exact.json"), &solution_from(truth.transforms.clone())).unwrap();
    let out = ok(d, &["eval", "s.json", "exact.json", "--truth", "s.truth.json", "--json"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["max_rotation_deg"], 0.0);
    assert_eq!(report["max_translation"], 0.0);

    let mut perturbed = truth.transforms.clone();
    let t = pose(&perturbed["object01"]);
    let bump = UnitQuaternion::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 5f64.to_radians()).unwrap();
    let moved = RigidTransform::new(t.rotation.mul(&bump), t.translation + Vec3::new(0.0, 0.3, 0.4));
    perturbed.insert("object01".into(), (&moved).into());
    write_json(&d.join("perturbed.json"), &solution_from(perturbed)).unwrap();
    let out = run(d, &["eval", "s.json", "perturbed.json", "--truth", "s.truth.json", "--json", "-o", "report.json"]);
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value = read_json(&d.join("report.json")).unwrap();
    let e = &report["objects"]["object01"];
    assert!((e["rotation_deg"].as_f64().unwrap() - 5.0).abs() < 1e-6);
    assert!((e["translation"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(report["objects"]["object00"]["rotation_deg"], 0.0);
    assert_eq!(report["pass"], false);

    let mut partial = truth.transforms.clone();
    partial.remove("object00");
    write_json(&d.join("partial.json"), &solution_from(partial)).unwrap();
    let out = run(d, &["eval", "s.json", "partial.json", "--truth", "s.truth.json"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "id_mismatch");
    assert_eq!(rec["object_ids"][0], "object00");
}

#[test]
fn iterative_solve_from_manifest() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "8", "--objects", "3", "--iterative"]);
    ok(d, &["solve", "s.json", "--iterative", "s.steps.json", "-o", "sol.json"]);
    let out = ok(d, &["eval", "s.json", "sol.json", "--truth", "s.truth.json", "--align", "--max-rotation-deg", "0.01", "--max-translation", "0.001"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn baselines() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "1"]);
    ok(d, &["baseline", "s.json", "--mode", "circular", "--radius", "1", "-o", "c.json"]);
    let c: SolutionFile = read_json(&d.join("c.json")).unwrap();
    let a = pose(&c.transforms["object00"]);
    let b = pose(&c.transforms["object01"]);
    assert!((a.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    assert!((b.translation - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    assert!((a.rotation.rotate(&Vec3::x()) + b.rotation.rotate(&Vec3::x())).norm() < 1e-12);

    ok(d, &["baseline", "s.json", "--mode", "uniform", "--seed", "1", "-o", "u1.json"]);
    ok(d, &["baseline", "s.json", "--mode", "uniform", "--seed", "1", "-o", "u2.json"]);
    assert_eq!(std::fs::read(d.join("u1.json")).unwrap(), std::fs::read(d.join("u2.json")).unwrap());

    let out = run(d, &["baseline", "s.json", "--mode", "other"]);
    assert_eq!(out.status.code(), Some(1));
}

fn obj_vertices(text: &str, group: &str) -> Vec<[f64; 3]> {
    let mut current = "";
    let mut out = Vec::new();
    for line in text.lines() {
        if let Some(g) = line.strip_prefix("g ") {
            current = g;
        } else if let Some(v) = line.strip_prefix("v ") {
            if current == group {
                let c: Vec<f64> = v.split_whitespace().map(|x| x.parse().unwrap()).collect();
                out.push([c[0], c[1], c[2]]);
            }
        }
    }
    out
}

#[test]
fn export_obj_transforms_corners() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "1"]);
    let scene: SceneFile = read_json(&d.join("s.json")).unwrap();
    let ids: Vec<String> = scene.objects.iter().map(|o| o.id.clone()).collect();
    let ident: BTreeMap<String, TransformJson> = ids.iter().map(|id| (id.clone(), (&RigidTransform::IDENTITY).into())).collect();
    write_json(&d.join("id.json"), &solution_from(ident)).unwrap();
    let shift: BTreeMap<String, TransformJson> = ids
        .iter()
        .map(|id| (id.clone(), (&RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0))).into()))
        .collect();
    write_json(&d.join("shift.json"), &solution_from(shift)).unwrap();

    let plain = String::from_utf8(ok(d, &["export", "s.json", "id.json", "--format", "obj"]).stdout).unwrap();
    let moved = String::from_utf8(ok(d, &["export", "s.json", "shift.json", "--format", "obj"]).stdout).unwrap();
    assert!(plain.contains("g floor"));
    for o in &scene.objects {
        let v = obj_vertices(&plain, &o.id);
        assert_eq!(v, o.bbox_corners.to_vec());
        let w = obj_vertices(&moved, &o.id);
        for (a, b) in v.iter().zip(&w) {
            assert_eq!(b[0], a[0] + 1.0);
            assert_eq!((b[1], b[2]), (a[1], a[2]));
        }
    }
}

#[test]
fn export_mesh_and_svg() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "1"]);
    ok(d, &["solve", "s.json", "-o", "sol.json"]);
    let svg = String::from_utf8(ok(d, &["export", "s.json", "sol.json", "--format", "svg"]).stdout).unwrap();
    assert_eq!(svg.matches("data-view=").count(), 2);
    assert_eq!(svg.matches("class=\"object\"").count(), 4);
    assert_eq!(svg.matches("class=\"floor\"").count(), 2);

    let mut scene: SceneFile = read_json(&d.join("s.json")).unwrap();
    scene.objects[0].mesh = Some("tri.obj".into());
    write_json(&d.join("m.json"), &scene).unwrap();
    let out = run(d, &["export", "m.json", "sol.json", "--format", "obj"]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(d.join("tri.obj"), "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    let obj = String::from_utf8(ok(d, &["export", "m.json", "sol.json", "--format", "obj"]).stdout).unwrap();
    assert_eq!(obj_vertices(&obj, "object00").len(), 11);
    assert!(obj.contains("f 9 10 11"));

    let out = run(d, &["export", "s.json", "sol.json", "--format", "gltf"]);
    assert_eq!(out.status.code(), Some(1));
}

fn all_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap()))
        .collect()
}

/// Every command, run twice with the same seeds into separate directories.
fn command_outputs() -> BTreeMap<PathBuf, Vec<u8>> {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(d, &["synth", "-o", "s.json", "--seed", "9", "--objects", "3", "--noise", "1", "--outliers", "0.2", "--iterative"]);
    ok(d, &["synth", "-o", "desc.json", "--seed", "9", "--descriptors", "--absent", "object00"]);
    ok(d, &["solve", "s.json", "-o", "sol.json", "--steps", "300"]);
    ok(d, &["solve", "s.json", "--iterative", "s.steps.json", "-o", "iter.json", "--steps", "300"]);
    ok(d, &["solve", "desc.json", "-o", "desc.sol.json", "--steps", "300"]);
    let eval = run(d, &["eval", "s.json", "sol.json", "--truth", "s.truth.json", "--json", "-o", "eval.json"]);
    std::fs::write(d.join("eval.stdout"), eval.stdout).unwrap();
    ok(d, &["baseline", "s.json", "--mode", "uniform", "--seed", "3", "-o", "uniform.json"]);
    ok(d, &["baseline", "s.json", "--mode", "circular", "-o", "circular.json"]);
    ok(d, &["export", "s.json", "sol.json", "--format", "obj", "-o", "scene.obj"]);
    ok(d, &["export", "s.json", "sol.json", "--format", "svg", "-o", "scene.svg"]);
    all_files(d)
}

#[test]
fn every_command_is_deterministic() {
    let a = command_outputs();
    let b = command_outputs();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(b[name] == *bytes, "{} differs between runs", name.display());
    }
}
