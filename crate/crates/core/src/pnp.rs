//! Perspective-n-Point: a Grunert P3P minimal solver, RANSAC over noisy
//! correspondences, and Gauss-Newton refinement of the reprojection error.

use nalgebra::{DMatrix, Matrix2x3, Matrix6, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Mat3, PixelPoint, RigidTransform, UnitQuaternion, Vec3};
use crate::tol;

/// A 3D object point (object frame) matched to a pixel in the layout image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub object_point: Vec3,
    pub image_point: PixelPoint,
    /// Descriptor cosine similarity in `[-1, 1]`; `1.0` for synthetic matches.
    pub similarity: f64,
}

impl Correspondence {
    pub fn new(object_point: Vec3, image_point: PixelPoint, similarity: f64) -> Self {
        Self {
            object_point,
            image_point,
            similarity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl RansacConfig {
    /// Defaults for an image of the given size: threshold at 2% of the diagonal.
    pub fn for_image(width: f64, height: f64) -> Self {
        Self {
            inlier_threshold_px: 0.02 * width.hypot(height),
            max_iters: 2000,
            confidence: 0.999,
            seed: 0,
        }
    }

    /// Same as [`RansacConfig::for_image`] with the image size inferred from
    /// the principal point.
    pub fn for_camera(k: &CameraIntrinsics) -> Self {
        Self::for_image(2.0 * k.cx, 2.0 * k.cy)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: RigidTransform,
    /// Sorted, unique indices into the input correspondences.
    pub inlier_indices: Vec<usize>,
    pub iterations_run: usize,
}

/// Pixel distance between the observation and the projected object point,
/// `+inf` when the point lands behind the camera.
pub fn reprojection_error_single(k: &CameraIntrinsics, tr: &RigidTransform, c: &Correspondence) -> f64 {
    reprojection_error_with(k, &tr.rotation_matrix(), &tr.translation, c)
}

fn reprojection_error_with(k: &CameraIntrinsics, r: &Mat3, t: &Vec3, c: &Correspondence) -> f64 {
    let p = r * c.object_point + t;
    match k.project_camera_point(&p) {
        Ok(px) => px.distance(&c.image_point),
        Err(_) => f64::INFINITY,
    }
}

/// Real roots of `coeffs[0]·x^n + … + coeffs[n]`, via companion-matrix
/// eigenvalues polished with Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut lead = 0;
    while lead < coeffs.len() && coeffs[lead].abs() <= 1e-14 * scale {
        lead += 1;
    }
    let c = &coeffs[lead..];
    let degree = c.len().saturating_sub(1);
    if degree == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    let eval = |x: f64| c.iter().fold((0.0, 0.0), |(p, dp), &a| (p * x + a, dp * x + p));
    let mut roots = Vec::new();
    for z in companion.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let (p, dp) = eval(x);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Best-fit rotation and translation mapping `src` onto `dst` (Kabsch).
fn absolute_orientation(src: &[Vec3], dst: &[Vec3]) -> Option<RigidTransform> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let h = src
        .iter()
        .zip(dst)
        .fold(Mat3::zeros(), |acc, (s, d)| acc + (s - cs) * (d - cd).transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let r = v * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, sign)) * u.transpose();
    let t = cd - r * cs;
    Some(RigidTransform::from_matrix(&r, t).canonical())
}

/// P3P on the first three correspondences; up to four poses, best first by the
/// reprojection error of the fourth.
pub fn solve_minimal(k: &CameraIntrinsics, sample: &[Correspondence; 4]) -> Result<Vec<RigidTransform>> {
    let [p1, p2, p3] = [sample[0].object_point, sample[1].object_point, sample[2].object_point];
    let cross = (p2 - p1).cross(&(p3 - p1));
    let span = (p2 - p1).norm().max((p3 - p1).norm()).max((p3 - p2).norm());
    if cross.norm() <= tol::DEFAULT.degenerate * span * span || span == 0.0 {
        return Err(Error::DegenerateGeometry("collinear minimal sample"));
    }
    let [j1, j2, j3] = [
        k.bearing(&sample[0].image_point),
        k.bearing(&sample[1].image_point),
        k.bearing(&sample[2].image_point),
    ];
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let cos_a = j2.dot(&j3);
    let cos_b = j1.dot(&j3);
    let cos_g = j1.dot(&j2);

    // Grunert's quartic in v = s3 / s1.
    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a;
    let a3 = 4.0
        * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2 / b2 * cos_a * cos_a * cos_b);
    let a2c = 2.0
        * (amc * amc - 1.0
            + 2.0 * amc * amc * cos_b * cos_b
            + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g);
    let a1 = 4.0
        * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g;

    let src = [p1, p2, p3];
    let mut candidates: Vec<(f64, RigidTransform)> = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        if v <= 0.0 {
            continue;
        }
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-14 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / denom;
        if u <= 0.0 {
            continue;
        }
        let d1 = 1.0 + v * v - 2.0 * v * cos_b;
        if d1 <= 0.0 {
            continue;
        }
        let s1 = (b2 / d1).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        let dst = [j1 * s1, j2 * s2, j3 * s3];
        if !dst.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            continue;
        }
        let Some(pose) = absolute_orientation(&src, &dst) else {
            continue;
        };
        // Roots near multiplicities lose precision; polish on the three points.
        let pose = refine_pose(k, &pose, &sample[..3], &[0, 1, 2], 10);
        let err = reprojection_error_single(k, &pose, &sample[3]);
        candidates.push((err, pose));
    }
    if candidates.is_empty() {
        return Err(Error::NoSolution);
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(candidates.into_iter().map(|(_, p)| p).collect())
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn squared_cost(k: &CameraIntrinsics, tr: &RigidTransform, corrs: &[Correspondence], idx: &[usize]) -> f64 {
    let r = tr.rotation_matrix();
    idx.iter()
        .map(|&i| reprojection_error_with(k, &r, &tr.translation, &corrs[i]).powi(2))
        .sum()
}

/// Gauss-Newton on the summed squared reprojection error of `indices`,
/// using a left rotation increment and an additive translation increment.
/// Steps that increase the cost are retried with growing damping.
pub fn refine_pose(
    k: &CameraIntrinsics,
    init: &RigidTransform,
    corrs: &[Correspondence],
    indices: &[usize],
    max_iters: usize,
) -> RigidTransform {
    let mut pose = *init;
    let mut cost = squared_cost(k, &pose, corrs, indices);
    if !cost.is_finite() || indices.len() < 3 {
        return pose;
    }
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let r = pose.rotation_matrix();
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in indices {
            let c = &corrs[i];
            let rp = r * c.object_point;
            let p = rp + pose.translation;
            let inv_z = 1.0 / p.z;
            let (x, y) = (p.x * inv_z, p.y * inv_z);
            let res = [
                k.fx * x + k.skew * y + k.cx - c.image_point.u,
                k.fy * y + k.cy - c.image_point.v,
            ];
            let dproj = Matrix2x3::new(
                k.fx * inv_z,
                k.skew * inv_z,
                -(k.fx * x + k.skew * y) * inv_z,
                0.0,
                k.fy * inv_z,
                -k.fy * y * inv_z,
            );
            let j_rot = dproj * (-skew(&rp));
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
            jtj += j.transpose() * j;
            jtr += j.transpose() * nalgebra::Vector2::new(res[0], res[1]);
        }
        let mut improved = false;
        for _ in 0..10 {
            let damped = jtj + Matrix6::from_diagonal(&jtj.diagonal()) * lambda;
            let Some(delta) = damped.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                continue;
            };
            let omega = Vec3::new(delta[0], delta[1], delta[2]);
            let dq = UnitQuaternion::from_rotation_vector(&omega);
            let candidate = RigidTransform::new(
                dq.mul(&pose.rotation),
                pose.translation + Vec3::new(delta[3], delta[4], delta[5]),
            );
            let new_cost = squared_cost(k, &candidate, corrs, indices);
            if new_cost.is_finite() && new_cost <= cost {
                let converged = delta.norm() < 1e-14 || cost - new_cost <= 1e-15 * cost;
                pose = candidate;
                cost = new_cost;
                lambda *= 0.1;
                improved = !converged;
                break;
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        }
        if !improved {
            break;
        }
    }
    pose.canonical()
}

fn score(k: &CameraIntrinsics, pose: &RigidTransform, corrs: &[Correspondence], threshold: f64) -> (Vec<usize>, f64) {
    let r = pose.rotation_matrix();
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error_with(k, &r, &pose.translation, c);
        if e <= threshold {
            inliers.push(i);
            sum += e;
        }
    }
    let mean = if inliers.is_empty() {
        f64::INFINITY
    } else {
        sum / inliers.len() as f64
    };
    (inliers, mean)
}

fn mean_error(k: &CameraIntrinsics, pose: &RigidTransform, corrs: &[Correspondence], idx: &[usize]) -> f64 {
    let r = pose.rotation_matrix();
    idx.iter()
        .map(|&i| reprojection_error_with(k, &r, &pose.translation, &corrs[i]))
        .sum::<f64>()
        / idx.len() as f64
}

const REFINE_ITERS: usize = 50;
const REFINE_ROUNDS: usize = 3;

/// RANSAC over 4-point minimal samples followed by Gauss-Newton refinement on
/// the consensus set. Deterministic for a given seed.
pub fn ransac_pnp(k: &CameraIntrinsics, corrs: &[Correspondence], cfg: &RansacConfig) -> Result<RansacResult> {
    if corrs.len() < 4 {
        return Err(Error::TooFewCorrespondences {
            needed: 4,
            got: corrs.len(),
        });
    }
    let n = corrs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RigidTransform, Vec<usize>, f64)> = None;
    let mut needed = cfg.max_iters;
    let mut iters = 0;
    while iters < needed.min(cfg.max_iters) {
        iters += 1;
        let idx = sample(&mut rng, n, 4);
        let minimal = [corrs[idx.index(0)], corrs[idx.index(1)], corrs[idx.index(2)], corrs[idx.index(3)]];
        let Ok(candidates) = solve_minimal(k, &minimal) else {
            continue;
        };
        for pose in candidates {
            let (inliers, mean) = score(k, &pose, corrs, cfg.inlier_threshold_px);
            let better = match &best {
                None => !inliers.is_empty(),
                Some((_, b, bm)) => inliers.len() > b.len() || (inliers.len() == b.len() && mean < *bm),
            };
            if better {
                let ratio = inliers.len() as f64 / n as f64;
                needed = adaptive_iterations(ratio, cfg.confidence, cfg.max_iters);
                best = Some((pose, inliers, mean));
            }
        }
    }
    let Some((mut pose, mut inliers, _)) = best else {
        return Err(Error::NoConsensus { inliers: 0 });
    };
    if inliers.len() < 4 {
        return Err(Error::NoConsensus {
            inliers: inliers.len(),
        });
    }
    for _ in 0..REFINE_ROUNDS {
        let refined = refine_pose(k, &pose, corrs, &inliers, REFINE_ITERS);
        if mean_error(k, &refined, corrs, &inliers) > mean_error(k, &pose, corrs, &inliers) {
            break;
        }
        pose = refined;
        let (reclassified, _) = score(k, &pose, corrs, cfg.inlier_threshold_px);
        if reclassified == inliers {
            break;
        }
        inliers = reclassified;
        if inliers.len() < 4 {
            return Err(Error::NoConsensus {
                inliers: inliers.len(),
            });
        }
    }
    // the final pose must classify its own inlier set
    let (inliers, _) = score(k, &pose, corrs, cfg.inlier_threshold_px);
    if inliers.len() < 4 {
        return Err(Error::NoConsensus {
            inliers: inliers.len(),
        });
    }
    Ok(RansacResult {
        pose: pose.canonical(),
        inlier_indices: inliers,
        iterations_run: iters,
    })
}

/// Iterations needed to draw one all-inlier 4-sample with the given confidence.
fn adaptive_iterations(inlier_ratio: f64, confidence: f64, max_iters: usize) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= 0.0 {
        return max_iters;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !n.is_finite() {
        return max_iters;
    }
    (n.ceil() as usize).clamp(1, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, HomPoint};
    use rand::Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
        let c: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let q = UnitQuaternion::from_array(c).unwrap().canonical();
        let t = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(6.0..10.0));
        RigidTransform::new(q, t)
    }

    fn synth(rng: &mut ChaCha8Rng, pose: &RigidTransform, n: usize) -> Vec<Correspondence> {
        (0..n)
            .map(|_| {
                let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let u = project(&camera(), pose, &HomPoint::from_point(&p)).unwrap();
                Correspondence::new(p, u, 1.0)
            })
            .collect()
    }

    fn pose_gap(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
        (a.rotation.angle_to(&b.rotation), (a.translation - b.translation).norm())
    }

    #[test]
    fn minimal_solver_recovers_noiseless_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let truth = random_pose(&mut rng);
            let c = synth(&mut rng, &truth, 4);
            let sols = solve_minimal(&camera(), &[c[0], c[1], c[2], c[3]]).unwrap();
            let (rot, trans) = pose_gap(&sols[0], &truth);
            assert!(rot < 1e-6 && trans < 1e-6, "rot {rot} trans {trans}");
            assert!(sols.len() <= 4);
        }
    }

    #[test]
    fn minimal_solver_identity_pose() {
        let k = camera();
        let pts = [
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(1.0, 0.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
            Vec3::new(-0.5, 0.7, 2.0),
        ];
        let c = pts.map(|p| Correspondence::new(p, k.project_camera_point(&p).unwrap(), 1.0));
        let best = solve_minimal(&k, &c).unwrap()[0];
        let (rot, trans) = pose_gap(&best, &RigidTransform::IDENTITY);
        assert!(rot < 1e-6 && trans < 1e-6);
    }

    #[test]
    fn minimal_solver_rejects_collinear() {
        let px = PixelPoint::new(1.0, 1.0);
        let c = [0.0, 1.0, 2.0, 0.0].map(|x| Correspondence::new(Vec3::new(x, x, 0.0), px, 1.0));
        assert!(matches!(solve_minimal(&camera(), &c), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn single_error_examples() {
        let k = camera();
        let pose = RigidTransform::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let p = Vec3::new(0.2, -0.1, 0.3);
        let exact = project(&k, &pose, &HomPoint::from_point(&p)).unwrap();
        assert_eq!(reprojection_error_single(&k, &pose, &Correspondence::new(p, exact, 1.0)), 0.0);
        let off = PixelPoint::new(exact.u + 3.0, exact.v + 4.0);
        let e = reprojection_error_single(&k, &pose, &Correspondence::new(p, off, 1.0));
        assert!((e - 5.0).abs() < 1e-12);
        let behind = Vec3::new(0.0, 0.0, -6.0);
        assert_eq!(reprojection_error_single(&k, &pose, &Correspondence::new(behind, exact, 1.0)), f64::INFINITY);
    }

    #[test]
    fn ransac_noiseless_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_pose(&mut rng);
        let c = synth(&mut rng, &truth, 50);
        let res = ransac_pnp(&camera(), &c, &RansacConfig::for_camera(&camera())).unwrap();
        assert_eq!(res.inlier_indices, (0..50).collect::<Vec<_>>());
        let (rot, trans) = pose_gap(&res.pose, &truth);
        assert!(rot < 1e-6 && trans < 1e-6);
        assert!(res.pose.rotation.w >= 0.0);
    }

    #[test]
    fn ransac_too_few() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_pose(&mut rng);
        let c = synth(&mut rng, &truth, 3);
        assert!(matches!(
            ransac_pnp(&camera(), &c, &RansacConfig::for_camera(&camera())),
            Err(Error::TooFewCorrespondences { .. })
        ));
    }

    #[test]
    fn ransac_with_outliers_over_seeds() {
        let k = camera();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let (mut rot_sum, mut trans_sum, mut recall_sum) = (0.0, 0.0, 0.0);
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let truth = random_pose(&mut rng);
            let mut c = synth(&mut rng, &truth, 50);
            let outliers: Vec<usize> = sample(&mut rng, 50, 15).into_vec();
            for (i, corr) in c.iter_mut().enumerate() {
                if outliers.contains(&i) {
                    corr.image_point = PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                } else {
                    corr.image_point.u += noise.sample(&mut rng);
                    corr.image_point.v += noise.sample(&mut rng);
                }
            }
            let res = ransac_pnp(&k, &c, &RansacConfig::for_camera(&k).with_seed(seed)).unwrap();
            let true_inliers: Vec<usize> = (0..50).filter(|i| !outliers.contains(i)).collect();
            let found = true_inliers.iter().filter(|i| res.inlier_indices.contains(i)).count();
            recall_sum += found as f64 / true_inliers.len() as f64;
            let (rot, trans) = pose_gap(&res.pose, &truth);
            rot_sum += rot.to_degrees();
            // scene diameter of the unit-cube keypoint cloud
            trans_sum += trans / (2.0 * 3f64.sqrt());
        }
        assert!(recall_sum / 20.0 >= 0.9);
        assert!(rot_sum / 20.0 < 2.0, "mean rot {}", rot_sum / 20.0);
        assert!(trans_sum / 20.0 < 0.02, "mean trans {}", trans_sum / 20.0);
    }

    #[test]
    fn ransac_is_deterministic_and_inliers_recheck() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = random_pose(&mut rng);
        let mut c = synth(&mut rng, &truth, 40);
        for corr in c.iter_mut().take(10) {
            corr.image_point = PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let cfg = RansacConfig::for_camera(&k).with_seed(5);
        let a = ransac_pnp(&k, &c, &cfg).unwrap();
        let b = ransac_pnp(&k, &c, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.inlier_indices.windows(2) {
            assert!(w[0] < w[1]);
        }
        for &i in &a.inlier_indices {
            assert!(reprojection_error_single(&k, &a.pose, &c[i]) <= cfg.inlier_threshold_px);
        }
        let mut dup = c.clone();
        dup.push(c[a.inlier_indices[0]]);
        let d = ransac_pnp(&k, &dup, &cfg).unwrap();
        assert!(d.inlier_indices.len() >= a.inlier_indices.len());
    }

    #[test]
    fn refinement_does_not_increase_mean_error() {
        let k = camera();
        let noise = Normal::new(0.0, 1.5).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_pose(&mut rng);
            let mut c = synth(&mut rng, &truth, 30);
            for corr in c.iter_mut() {
                corr.image_point.u += noise.sample(&mut rng);
                corr.image_point.v += noise.sample(&mut rng);
            }
            let init = solve_minimal(&k, &[c[0], c[1], c[2], c[3]]).unwrap()[0];
            let idx: Vec<usize> = (0..c.len()).collect();
            let refined = refine_pose(&k, &init, &c, &idx, 50);
            assert!(squared_cost(&k, &refined, &c, &idx) <= squared_cost(&k, &init, &c, &idx));
        }
    }

    #[test]
    fn adaptive_iteration_count() {
        assert_eq!(adaptive_iterations(1.0, 0.999, 2000), 1);
        assert_eq!(adaptive_iterations(0.0, 0.999, 2000), 2000);
        // log(0.001) / log(1 - 0.5^4) = 107.2
        assert_eq!(adaptive_iterations(0.5, 0.999, 2000), 108);
    }
}
