//! Static previews of a solved scene: Wavefront OBJ geometry and a two-view SVG.

use std::fmt::Write as _;
use std::path::Path;

use layoutpnp::arrange::default_camera;
use layoutpnp::geom::{Plane, RigidTransform, Vec3};
use layoutpnp::sipnp::{SceneObject, SceneSolution};
use layoutpnp::synth::fit_camera;

use crate::error::{CliError, Result};
use crate::files::{resolve, LoadedScene};

/// Quad faces of a box whose corners follow the bottom-then-top ordering.
const BOX_FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1],
    [4, 5, 6, 7],
    [0, 1, 5, 4],
    [1, 2, 6, 5],
    [2, 3, 7, 6],
    [3, 0, 4, 7],
];

/// Solved objects in file order, with their transforms.
fn placed<'a>(scene: &'a LoadedScene, sol: &SceneSolution) -> Result<Vec<(&'a SceneObject, RigidTransform)>> {
    for id in sol.transforms.keys() {
        if scene.object(id).is_none() {
            return Err(CliError::IdMismatch {
                message: format!("solution places {id}, which the scene does not define"),
                ids: vec![id.clone()],
            });
        }
    }
    Ok(scene
        .spec
        .objects
        .iter()
        .filter_map(|o| sol.transforms.get(&o.id).map(|t| (o, *t)))
        .collect())
}

/// Orthonormal frame on the floor: origin, two in-plane axes and the normal
/// oriented towards the objects.
struct FloorFrame {
    origin: Vec3,
    e1: Vec3,
    e2: Vec3,
    normal: Vec3,
}

impl FloorFrame {
    fn new(floor: &Plane, points: &[Vec3]) -> Self {
        let mut normal = floor.normal().normalize();
        let centroid = if points.is_empty() {
            Vec3::zeros()
        } else {
            points.iter().sum::<Vec3>() / points.len() as f64
        };
        if floor.signed_distance(&centroid) < 0.0 {
            normal = -normal;
        }
        let origin = centroid - floor.normal() * floor.signed_distance(&centroid);
        let seed = [Vec3::x(), Vec3::y(), Vec3::z()]
            .into_iter()
            .min_by(|a, b| a.dot(&normal).abs().total_cmp(&b.dot(&normal).abs()))
            .unwrap_or(Vec3::x());
        let e1 = (seed - normal * seed.dot(&normal)).normalize();
        let e2 = normal.cross(&e1);
        Self { origin, e1, e2, normal }
    }

    fn local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(d.dot(&self.e1), d.dot(&self.e2), d.dot(&self.normal))
    }

    /// Square floor patch covering every point's footprint with a margin.
    fn quad(&self, points: &[Vec3]) -> [Vec3; 4] {
        let reach = points
            .iter()
            .map(|p| {
                let l = self.local(p);
                l.x.abs().max(l.y.abs())
            })
            .fold(0.5, f64::max)
            * 1.2;
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(a, b)| self.origin + self.e1 * (a * reach) + self.e2 * (b * reach))
    }
}

fn world_corners(objects: &[(&SceneObject, RigidTransform)]) -> Vec<Vec3> {
    objects
        .iter()
        .flat_map(|(o, t)| o.bbox_corners.iter().map(move |c| t.apply(c)))
        .collect()
}

struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<Vec<usize>>,
}

fn parse_obj_mesh(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |line: usize, what: &str| CliError::schema(path, format!("line {}: {what}", line + 1));
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let c: Vec<f64> = parts.take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(n, "bad vertex"))?;
                if c.len() != 3 {
                    return Err(bad(n, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut face = Vec::new();
                for tok in parts {
                    let idx: i64 = tok.split('/').next().unwrap_or("").parse().map_err(|_| bad(n, "bad face index"))?;
                    let resolved = if idx > 0 { idx - 1 } else { vertices.len() as i64 + idx };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(bad(n, "face index out of range"));
                    }
                    face.push(resolved as usize);
                }
                if face.len() < 3 {
                    return Err(bad(n, "face needs three vertices"));
                }
                faces.push(face);
            }
            _ => {}
        }
    }
    Ok(Mesh { vertices, faces })
}

/// OBJ with one group per object (its box, plus its mesh when referenced)
/// and a floor quad, all in the solution's frame.
pub fn to_obj(scene: &LoadedScene, sol: &SceneSolution) -> Result<String> {
    let objects = placed(scene, sol)?;
    let mut out = String::from("# layoutpnp scene export\n");
    let mut next = 1usize;
    for (o, t) in &objects {
        let _ = writeln!(out, "g {}", o.id);
        for c in &o.bbox_corners {
            let p = t.apply(c);
            let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
        }
        for f in BOX_FACES {
            let _ = writeln!(out, "f {} {} {} {}", next + f[0], next + f[1], next + f[2], next + f[3]);
        }
        next += 8;
        if let Some(mesh) = &o.mesh {
            let m = parse_obj_mesh(&resolve(&scene.path, mesh))?;
            for v in &m.vertices {
                let p = t.apply(v);
                let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
            }
            for f in &m.faces {
                let idx: Vec<String> = f.iter().map(|i| (next + i).to_string()).collect();
                let _ = writeln!(out, "f {}", idx.join(" "));
            }
            next += m.vertices.len();
        }
    }
    let corners = world_corners(&objects);
    let frame = FloorFrame::new(&sol.floor, &corners);
    out.push_str("g floor\n");
    for p in frame.quad(&corners) {
        let _ = writeln!(out, "v {} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(out, "f {} {} {} {}", next, next + 1, next + 2, next + 3);
    Ok(out)
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn color_for(id: &str) -> String {
    format!("hsl({},65%,55%)", fnv1a(id) % 360)
}

fn cross2(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let scale = pts.iter().map(|p| p.0.abs().max(p.1.abs())).fold(1e-300, f64::max);
    // near-duplicate and collinear points are dropped
    let eps = 1e-12 * scale * scale;
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross2(hull[hull.len() - 2], hull[hull.len() - 1], p) <= eps {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

const PANEL: f64 = 480.0;
const PAD: f64 = 20.0;

/// Scales 2D points into a panel at horizontal offset `x0`.
fn fit_panel(shapes: &[Vec<(f64, f64)>], x0: f64, flip_y: bool) -> Vec<Vec<(f64, f64)>> {
    let all = shapes.iter().flatten();
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for &(x, y) in all {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-12);
    let s = (PANEL - 2.0 * PAD) / span;
    let cx = 0.5 * (lo.0 + hi.0);
    let cy = 0.5 * (lo.1 + hi.1);
    shapes
        .iter()
        .map(|sh| {
            sh.iter()
                .map(|&(x, y)| {
                    let dy = if flip_y { cy - y } else { y - cy };
                    (x0 + 0.5 * PANEL + s * (x - cx), 0.5 * PANEL + s * dy)
                })
                .collect()
        })
        .collect()
}

fn polygon(out: &mut String, class: &str, id: Option<&str>, fill: &str, pts: &[(f64, f64)]) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
    let id_attr = id.map(|i| format!(" data-id=\"{}\"", xml_escape(i))).unwrap_or_default();
    let _ = writeln!(
        out,
        "  <polygon class=\"{class}\"{id_attr} points=\"{}\" fill=\"{fill}\" fill-opacity=\"0.6\" stroke=\"black\" stroke-width=\"1\"/>",
        coords.join(" ")
    );
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Top-down orthographic view (left) and a perspective view (right). Each
/// view holds one floor polygon and one silhouette polygon per object.
pub fn to_svg(scene: &LoadedScene, sol: &SceneSolution) -> Result<String> {
    let objects = placed(scene, sol)?;
    let corners = world_corners(&objects);
    let frame = FloorFrame::new(&sol.floor, &corners);
    let floor_quad = frame.quad(&corners);
    let local_boxes: Vec<Vec<Vec3>> = objects
        .iter()
        .map(|(o, t)| o.bbox_corners.iter().map(|c| frame.local(&t.apply(c))).collect())
        .collect();
    let local_floor: Vec<Vec3> = floor_quad.iter().map(|p| frame.local(p)).collect();

    let mut top: Vec<Vec<(f64, f64)>> = vec![local_floor.iter().map(|p| (p.x, p.y)).collect()];
    top.extend(local_boxes.iter().map(|b| convex_hull(b.iter().map(|p| (p.x, p.y)).collect())));
    let top = fit_panel(&top, 0.0, true);

    let size = (PANEL, PANEL);
    let k = default_camera(size.0, size.1)?;
    let mut everything: Vec<Vec3> = local_boxes.iter().flatten().copied().collect();
    everything.extend(local_floor.iter().copied());
    let reach = local_floor.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let cam: RigidTransform = fit_camera(&everything, &k, size, -0.5 * std::f64::consts::PI, 35f64.to_radians(), 2.0 * reach)?;
    let project = |pts: &[Vec3]| -> Result<Vec<(f64, f64)>> {
        pts.iter()
            .map(|p| k.project_camera_point(&cam.apply(p)).map(|px| (px.u, px.v)).map_err(CliError::from))
            .collect()
    };
    let mut persp = vec![project(&local_floor)?];
    for b in &local_boxes {
        persp.push(convex_hull(project(b)?));
    }
    let persp = fit_panel(&persp, PANEL, false);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">",
        w = 2.0 * PANEL,
        h = PANEL
    );
    let _ = writeln!(out, "  <rect width=\"{}\" height=\"{}\" fill=\"white\"/>", 2.0 * PANEL, PANEL);
    for (view, shapes) in [("top", &top), ("perspective", &persp)] {
        let _ = writeln!(out, " <g class=\"view\" data-view=\"{view}\">");
        polygon(&mut out, "floor", None, "#d9d9d9", &shapes[0]);
        for ((o, _), pts) in objects.iter().zip(&shapes[1..]) {
            polygon(&mut out, "object", Some(&o.id), &color_for(&o.id), pts);
        }
        let _ = writeln!(out, " </g>");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hull_of_square_with_interior_point() {
        let h = convex_hull(vec![(0.0, 0.0), (1.0, 0.0), (0.5, 0.5), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(h, vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
    }

    #[test]
    fn hull_drops_near_duplicates() {
        let h = convex_hull(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1e-17), (1.0, 1.0), (1.0 + 1e-16, 1.0), (0.0, 1.0)]);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn colors_are_stable() {
        assert_eq!(color_for("chair"), color_for("chair"));
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
    }
}
