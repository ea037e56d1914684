//! Descriptor matching between object renders and the layout image, the
//! inlier-median matching score, and neglect filtering.

use crate::error::{Error, Result};
use crate::geom::{PixelPoint, Vec3};
use crate::pnp::{Correspondence, RansacResult};

/// Default score below which an object is considered absent from the image.
pub const DEFAULT_NEGLECT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorEntry {
    pub pixel: PixelPoint,
    /// Back-projected object-frame point; present for render entries only.
    pub point: Option<Vec3>,
    pub descriptor: Vec<f32>,
    /// Foreground flag; `None` counts as foreground.
    pub foreground: Option<bool>,
}

impl DescriptorEntry {
    pub fn is_foreground(&self) -> bool {
        self.foreground.unwrap_or(true)
    }
}

/// Descriptors sampled from one image (an object render or the layout image).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptorMap {
    entries: Vec<DescriptorEntry>,
    dim: usize,
}

impl DescriptorMap {
    pub fn new(entries: Vec<DescriptorEntry>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.descriptor.len());
        for e in &entries {
            if e.descriptor.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.descriptor.len(),
                });
            }
            if e.descriptor.iter().any(|d| !d.is_finite()) {
                return Err(Error::InvalidInput("non-finite descriptor value".into()));
            }
        }
        if !entries.is_empty() && dim == 0 {
            return Err(Error::InvalidInput("descriptors must have at least one component".into()));
        }
        Ok(Self { entries, dim })
    }

    pub fn entries(&self) -> &[DescriptorEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn norm(d: &[f32]) -> f64 {
    d.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        return 0.0;
    }
    (dot(a, b) / n).clamp(-1.0, 1.0)
}

/// Nearest scene descriptor (by cosine) for every foreground render entry.
///
/// All render views are pooled in order. Ties resolve to the lowest scene index.
pub fn match_descriptors(render_maps: &[DescriptorMap], scene_map: &DescriptorMap) -> Result<Vec<Correspondence>> {
    if scene_map.is_empty() {
        return Err(Error::EmptyInput("scene descriptor map is empty"));
    }
    if render_maps.iter().all(|m| m.is_empty()) {
        return Err(Error::EmptyInput("no render descriptors"));
    }
    for m in render_maps.iter().filter(|m| !m.is_empty()) {
        if m.dim() != scene_map.dim() {
            return Err(Error::DimensionMismatch {
                expected: scene_map.dim(),
                got: m.dim(),
            });
        }
    }
    let scene_norms: Vec<f64> = scene_map.entries.iter().map(|e| norm(&e.descriptor)).collect();
    let mut out = Vec::new();
    for entry in render_maps.iter().flat_map(|m| m.entries.iter()).filter(|e| e.is_foreground()) {
        let point = entry
            .point
            .ok_or_else(|| Error::InvalidInput("render descriptor without a 3D point".into()))?;
        let qn = norm(&entry.descriptor);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, s) in scene_map.entries.iter().enumerate() {
            let n = qn * scene_norms[i];
            let sim = if n == 0.0 { 0.0 } else { dot(&entry.descriptor, &s.descriptor) / n };
            if sim > best.0 {
                best = (sim, i);
            }
        }
        out.push(Correspondence::new(
            point,
            scene_map.entries[best.1].pixel,
            best.0.clamp(-1.0, 1.0),
        ));
    }
    Ok(out)
}

/// Median similarity over the inlier matches; `-1` when there are none.
pub fn matching_score(correspondences: &[Correspondence], inlier_indices: &[usize]) -> f64 {
    let mut sims: Vec<f64> = inlier_indices
        .iter()
        .filter_map(|&i| correspondences.get(i))
        .map(|c| c.similarity)
        .collect();
    if sims.is_empty() {
        return -1.0;
    }
    sims.sort_by(f64::total_cmp);
    let mid = sims.len() / 2;
    if sims.len() % 2 == 1 {
        sims[mid]
    } else {
        0.5 * (sims[mid - 1] + sims[mid])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub object_id: String,
    pub correspondences: Vec<Correspondence>,
    pub matching_score: f64,
    pub neglected: bool,
}

impl MatchReport {
    /// `ransac` is `None` when consensus failed, which always marks the object neglected.
    pub fn new(object_id: impl Into<String>, correspondences: Vec<Correspondence>, ransac: Option<&RansacResult>, threshold: f64) -> Self {
        let (score, neglected) = match ransac {
            Some(r) => {
                let s = matching_score(&correspondences, &r.inlier_indices);
                (s, s < threshold)
            }
            None => (-1.0, true),
        };
        Self {
            object_id: object_id.into(),
            correspondences,
            matching_score: score,
            neglected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeglectDecision {
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
}

impl NeglectDecision {
    /// A layout image is usable only if every object in it was found.
    pub fn scene_accepted(&self) -> bool {
        self.rejected.is_empty()
    }
}

/// Splits objects by `matching_score >= threshold`.
pub fn filter_neglect(reports: &[MatchReport], threshold: f64) -> Result<NeglectDecision> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!("neglect threshold {threshold} outside [-1, 1]")));
    }
    let mut decision = NeglectDecision::default();
    for r in reports {
        if r.matching_score >= threshold {
            decision.accepted.push(r.object_id.clone());
        } else {
            decision.rejected.push(r.object_id.clone());
        }
    }
    Ok(decision)
}
