//! Signed distance to a closed triangle mesh, positive inside.
//!
//! The sign comes from the angle-weighted pseudonormal of the closest
//! feature (face, edge or vertex); nearest-triangle search runs over an
//! axis-aligned bounding-volume hierarchy.

mod bvh;
mod io;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use bvh::{Bvh, NodeKind};

pub use io::{parse_obj, parse_stl, write_obj, write_stl};

/// Distances below this count as "on the surface" for the gradient fallback.
pub const SURFACE_EPS: f64 = 1e-9;

/// Mesh feature that holds the closest point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Feature {
    Face(u32),
    Edge(u32, u32),
    Vertex(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdfResult {
    /// Signed distance (mm), positive inside the zone.
    pub distance: f64,
    pub closest_point: Vector3<f64>,
    /// Unit direction of increasing distance.
    pub gradient: Vector3<f64>,
    pub feature: Feature,
}

#[derive(Debug, Clone)]
pub struct SafeZone {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    corners: Vec<[Vector3<f64>; 3]>,
    face_normals: Vec<Vector3<f64>>,
    vertex_normals: Vec<Vector3<f64>>,
    edge_normals: HashMap<(u32, u32), Vector3<f64>>,
    bvh: Bvh,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    point: Vector3<f64>,
    feature: Feature,
}

impl Candidate {
    /// Total order: distance, then lexicographic closest point, then feature.
    fn cmp(&self, other: &Candidate) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.point.x.total_cmp(&other.point.x))
            .then(self.point.y.total_cmp(&other.point.y))
            .then(self.point.z.total_cmp(&other.point.z))
            .then(self.feature.cmp(&other.feature))
    }
}

impl SafeZone {
    /// Builds a zone from an indexed triangle list. Fails unless every
    /// directed edge has exactly one opposite partner. A mesh wound inward is
    /// flipped so that face normals point out of the enclosed volume.
    pub fn new(vertices: Vec<Vector3<f64>>, mut triangles: Vec<[u32; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::MeshInvalid {
                reason: "mesh has no triangles".into(),
                edges: vec![],
            });
        }
        for t in &triangles {
            if t.iter().any(|&v| v as usize >= vertices.len()) {
                return Err(Error::MeshInvalid {
                    reason: format!("triangle {t:?} references a missing vertex"),
                    edges: vec![],
                });
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::MeshInvalid {
                    reason: format!("triangle {t:?} is degenerate"),
                    edges: vec![],
                });
            }
        }
        check_closed(&triangles)?;

        let corners_of = |t: &[u32; 3]| t.map(|v| vertices[v as usize]);
        let volume: f64 = triangles
            .iter()
            .map(|t| {
                let [a, b, c] = corners_of(t);
                a.dot(&b.cross(&c))
            })
            .sum::<f64>()
            / 6.0;
        if volume < 0.0 {
            for t in &mut triangles {
                t.swap(1, 2);
            }
        }

        let corners: Vec<[Vector3<f64>; 3]> = triangles.iter().map(corners_of).collect();
        let mut face_normals = Vec::with_capacity(triangles.len());
        for (t, [a, b, c]) in triangles.iter().zip(&corners) {
            let n = (b - a).cross(&(c - a));
            let norm = n.norm();
            if !(norm > 0.0) {
                return Err(Error::MeshInvalid {
                    reason: format!("triangle {t:?} has zero area"),
                    edges: vec![],
                });
            }
            face_normals.push(n / norm);
        }

        let mut vertex_normals = vec![Vector3::zeros(); vertices.len()];
        let mut edge_normals: HashMap<(u32, u32), Vector3<f64>> = HashMap::new();
        for ((t, pts), n) in triangles.iter().zip(&corners).zip(&face_normals) {
            for k in 0..3 {
                let p = pts[k];
                let e1 = (pts[(k + 1) % 3] - p).normalize();
                let e2 = (pts[(k + 2) % 3] - p).normalize();
                let angle = e1.dot(&e2).clamp(-1.0, 1.0).acos();
                vertex_normals[t[k] as usize] += angle * n;
                *edge_normals
                    .entry(edge_key(t[k], t[(k + 1) % 3]))
                    .or_insert_with(Vector3::zeros) += n;
            }
        }
        for n in vertex_normals.iter_mut() {
            let norm = n.norm();
            if norm > 0.0 {
                *n /= norm;
            }
        }
        for n in edge_normals.values_mut() {
            let norm = n.norm();
            if norm > 0.0 {
                *n /= norm;
            }
        }

        let bvh = Bvh::build(&corners);
        Ok(Self {
            vertices,
            triangles,
            corners,
            face_normals,
            vertex_normals,
            edge_normals,
            bvh,
        })
    }

    /// Loads an ASCII OBJ (`.obj`) or binary STL (`.stl`) mesh.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let (vertices, triangles) = match ext.as_deref() {
            Some("stl") => parse_stl(&bytes).map_err(|message| Error::Parse {
                path: path.to_owned(),
                message,
            })?,
            _ => {
                let text = String::from_utf8_lossy(&bytes);
                parse_obj(&text).map_err(|message| Error::Parse {
                    path: path.to_owned(),
                    message,
                })?
            }
        };
        Self::new(vertices, triangles)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_normal(&self, triangle: usize) -> Vector3<f64> {
        self.face_normals[triangle]
    }

    /// Angle-weighted pseudonormal (outward) of a feature.
    pub fn pseudonormal(&self, feature: Feature) -> Vector3<f64> {
        match feature {
            Feature::Face(t) => self.face_normals[t as usize],
            Feature::Edge(a, b) => self.edge_normals[&edge_key(a, b)],
            Feature::Vertex(v) => self.vertex_normals[v as usize],
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> SdfResult {
        let best = self.nearest(p);
        self.finish(p, best)
    }

    /// Same query answered by scanning every triangle.
    pub fn signed_distance_brute_force(&self, p: &Vector3<f64>) -> SdfResult {
        let best = (0..self.triangles.len())
            .map(|t| self.candidate(t, p))
            .min_by(|a, b| a.cmp(b))
            .expect("mesh has triangles");
        self.finish(p, best)
    }

    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.signed_distance(p).gradient
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.signed_distance(p).distance > 0.0
    }

    /// Closest points on every feature within `radius` of `p`, each with
    /// its unsigned distance and the direction away from it. Inside the
    /// zone the signed distance is the smallest of these, so requiring each
    /// of them to stay above a margin is the same as requiring it of the
    /// signed distance.
    pub fn witnesses_within(&self, p: &Vector3<f64>, radius: f64) -> Vec<SdfResult> {
        let r2 = radius * radius;
        let mut found: Vec<Candidate> = Vec::new();
        let mut stack = vec![0usize];
        while let Some(index) = stack.pop() {
            let node = &self.bvh.nodes[index];
            if node.bounds.distance_squared(p) > r2 {
                continue;
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.bvh.order[start..start + count] {
                        let cand = self.candidate(t, p);
                        if cand.dist2 > r2 {
                            continue;
                        }
                        // a shared edge or vertex is reached from several
                        // triangles; keep the smallest, as the full query does
                        match found.iter_mut().find(|c| c.feature == cand.feature) {
                            Some(c) if cand.cmp(c) == Ordering::Less => *c = cand,
                            Some(_) => {}
                            None => found.push(cand),
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        found.sort_by(|a, b| a.cmp(b));
        found
            .into_iter()
            .filter_map(|c| {
                let dist = c.dist2.sqrt();
                (dist >= SURFACE_EPS).then(|| SdfResult {
                    distance: dist,
                    closest_point: c.point,
                    gradient: (p - c.point) / dist,
                    feature: c.feature,
                })
            })
            .collect()
    }

    fn finish(&self, p: &Vector3<f64>, best: Candidate) -> SdfResult {
        let normal = self.pseudonormal(best.feature);
        let offset = p - best.point;
        let dist = best.dist2.sqrt();
        let outside = offset.dot(&normal) > 0.0;
        let distance = if outside { -dist } else { dist };
        let gradient = if dist < SURFACE_EPS {
            -normal
        } else if outside {
            -offset / dist
        } else {
            offset / dist
        };
        SdfResult {
            distance,
            closest_point: best.point,
            gradient,
            feature: best.feature,
        }
    }

    fn candidate(&self, t: usize, p: &Vector3<f64>) -> Candidate {
        let [a, b, c] = self.corners[t];
        let (point, local) = closest_point_on_triangle(p, &a, &b, &c);
        let ids = self.triangles[t];
        let feature = match local {
            LocalFeature::Face => Feature::Face(t as u32),
            LocalFeature::Edge(i, j) => {
                let (x, y) = edge_key(ids[i], ids[j]);
                Feature::Edge(x, y)
            }
            LocalFeature::Vertex(i) => Feature::Vertex(ids[i]),
        };
        Candidate {
            dist2: (p - point).norm_squared(),
            point,
            feature,
        }
    }

    fn nearest(&self, p: &Vector3<f64>) -> Candidate {
        let mut best: Option<Candidate> = None;
        let mut stack: Vec<(usize, f64)> = Vec::with_capacity(64);
        stack.push((0, self.bvh.nodes[0].bounds.distance_squared(p)));
        while let Some((index, box_d2)) = stack.pop() {
            if let Some(b) = &best {
                // Equal distances are still visited so ties resolve as in a
                // full scan.
                if box_d2 > b.dist2 {
                    continue;
                }
            }
            match self.bvh.nodes[index].kind {
                NodeKind::Leaf { start, count } => {
                    for &t in &self.bvh.order[start..start + count] {
                        let cand = self.candidate(t, p);
                        if best.map_or(true, |b| cand.cmp(&b) == Ordering::Less) {
                            best = Some(cand);
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let dl = self.bvh.nodes[left].bounds.distance_squared(p);
                    let dr = self.bvh.nodes[right].bounds.distance_squared(p);
                    // nearer child on top of the stack
                    if dl <= dr {
                        stack.push((right, dr));
                        stack.push((left, dl));
                    } else {
                        stack.push((left, dl));
                        stack.push((right, dr));
                    }
                }
            }
        }
        best.expect("mesh has triangles")
    }
}

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn check_closed(triangles: &[[u32; 3]]) -> Result<()> {
    let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
        }
    }
    let mut bad: Vec<(u32, u32)> = Vec::new();
    for (&(a, b), &count) in &directed {
        let reverse = directed.get(&(b, a)).copied().unwrap_or(0);
        if count != 1 || reverse != 1 {
            bad.push(edge_key(a, b));
        }
    }
    bad.sort_unstable();
    bad.dedup();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::MeshInvalid {
            reason: "edges not shared by exactly two oppositely wound triangles".into(),
            edges: bad,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LocalFeature {
    Face,
    Edge(usize, usize),
    Vertex(usize),
}

/// Closest point on triangle `abc` to `p` by Voronoi-region classification.
fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (Vector3<f64>, LocalFeature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, LocalFeature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, LocalFeature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, LocalFeature::Edge(0, 1));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, LocalFeature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, LocalFeature::Edge(0, 2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, LocalFeature::Edge(1, 2));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, LocalFeature::Face)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgen;

    fn cube() -> SafeZone {
        let (v, t) = meshgen::unit_cube();
        SafeZone::new(v, t).unwrap()
    }

    #[test]
    fn cube_center_is_inside() {
        let zone = cube();
        let r = zone.signed_distance(&Vector3::zeros());
        assert!((r.distance - 0.5).abs() < 1e-15);
        // medial tie resolved to the lexicographically smallest closest point
        assert_eq!(r.closest_point, Vector3::new(-0.5, 0.0, 0.0));
    }

    #[test]
    fn cube_outside_query() {
        let zone = cube();
        let r = zone.signed_distance(&Vector3::new(1.0, 0.0, 0.0));
        assert!((r.distance + 0.5).abs() < 1e-15);
        assert!((r.gradient - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn cube_inside_gradient_points_inward() {
        let zone = cube();
        let g = zone.sdf_gradient(&Vector3::new(0.4, 0.0, 0.0));
        assert!((g - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn corner_and_edge_signs() {
        let zone = cube();
        let corner = zone.signed_distance(&Vector3::new(0.6, 0.6, 0.6));
        assert!(corner.distance < 0.0);
        assert!(matches!(corner.feature, Feature::Vertex(_)));
        let edge = zone.signed_distance(&Vector3::new(0.6, 0.6, 0.0));
        assert!(edge.distance < 0.0);
        assert!(matches!(edge.feature, Feature::Edge(..)));
        assert!((edge.distance + (0.02f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn on_surface_gradient_falls_back_to_pseudonormal() {
        let zone = cube();
        let r = zone.signed_distance(&Vector3::new(0.5, 0.1, 0.2));
        assert!(r.distance.abs() < 1e-15);
        assert!((r.gradient - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn open_cube_is_rejected() {
        let (v, mut t) = meshgen::unit_cube();
        t.truncate(10);
        match SafeZone::new(v, t) {
            Err(Error::MeshInvalid { edges, .. }) => assert_eq!(edges.len(), 4),
            other => panic!("expected MeshInvalid, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_winding_is_rejected() {
        let (v, mut t) = meshgen::unit_cube();
        t[0].swap(1, 2);
        assert!(matches!(SafeZone::new(v, t), Err(Error::MeshInvalid { .. })));
    }

    #[test]
    fn inward_wound_mesh_is_flipped() {
        let (v, mut t) = meshgen::unit_cube();
        for tri in &mut t {
            tri.swap(1, 2);
        }
        let zone = SafeZone::new(v, t).unwrap();
        assert!(zone.signed_distance(&Vector3::zeros()).distance > 0.0);
    }

    #[test]
    fn bvh_matches_brute_force_on_tube() {
        let (v, t) = meshgen::winding_tube();
        let zone = SafeZone::new(v, t).unwrap();
        let mut s = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let p = Vector3::new(next() * 160.0 - 60.0, next() * 80.0 - 40.0, next() * 330.0 - 30.0);
            let a = zone.signed_distance(&p);
            let b = zone.signed_distance_brute_force(&p);
            assert_eq!(a.distance, b.distance);
            assert_eq!(a.closest_point, b.closest_point);
        }
    }

    #[test]
    fn witnesses_bound_the_inside_distance() {
        let zone = cube();
        let p = Vector3::new(0.3, 0.0, 0.1);
        let w = zone.witnesses_within(&p, 0.7);
        assert!((w[0].distance - 0.2).abs() < 1e-15);
        assert_eq!(w[0].distance, zone.signed_distance(&p).distance);
        // the face at x = -0.5 is 0.8 away
        assert!(w.iter().all(|r| r.closest_point.x > -0.5));
        assert!(w.iter().any(|r| (r.closest_point.z - 0.5).abs() < 1e-15));

        let (v, t) = meshgen::winding_tube();
        let zone = SafeZone::new(v, t).unwrap();
        for k in 0..40 {
            let p = meshgen::winding_tube_centerline(0.02 * k as f64) + Vector3::new(9.0, 4.0, 0.0);
            let d = zone.signed_distance(&p);
            assert!(d.distance > 0.0);
            let w = zone.witnesses_within(&p, d.distance + 1.0);
            assert_eq!(w[0].distance, d.distance);
            assert!(w.iter().all(|r| r.distance >= d.distance));
        }
    }
}
