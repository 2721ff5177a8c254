#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use tdcr_core::kinematics::{arcs_to_tendons, ArcParameters, SegmentArc, SEGMENTS};
use tdcr_core::{ActuatorState, RobotGeometry, SafeZone};

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn shipped_meshes() -> Vec<(String, SafeZone)> {
    let mut paths: Vec<_> = std::fs::read_dir(repo_path("meshes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "obj"))
        .collect();
    paths.sort();
    assert!(!paths.is_empty());
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, SafeZone::load(&p).unwrap())
        })
        .collect()
}

/// Random arcs whose bend stays below `frac` of both the bend-angle limit and
/// `1/r_t`, with tendons inside the actuator box.
pub fn random_arcs(rng: &mut impl Rng, geom: &RobotGeometry, frac: f64) -> ArcParameters {
    loop {
        let segments: [SegmentArc; SEGMENTS] = std::array::from_fn(|_| {
            let length = rng.gen_range(geom.segment_min + 1.0..geom.segment_max - 1.0);
            let kmax = (geom.max_bend_angle / length).min(1.0 / geom.tendon_radius);
            SegmentArc {
                curvature: rng.gen_range(0.0..frac * kmax),
                bend_plane: rng.gen_range(-PI..PI),
                length,
            }
        });
        let arcs = ArcParameters { segments };
        let x = arcs_to_tendons(&arcs, geom);
        if x.within_bounds(geom) && x.0.iter().zip(geom.lower_bounds().iter()).all(|(v, lo)| v - lo > 1e-3) {
            return arcs;
        }
    }
}

pub fn random_state(rng: &mut impl Rng, geom: &RobotGeometry, frac: f64) -> ActuatorState {
    arcs_to_tendons(&random_arcs(rng, geom, frac), geom)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

pub const STEPS_PER_SEGMENT: usize = 10_000;

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Integrates p' = R e_z, R' = R [w]x with classical RK4, w the constant
/// body-frame curvature vector of each segment.
pub fn frenet_shape(arcs: &ArcParameters, n: usize) -> Vec<Vector3<f64>> {
    let mut p = Vector3::zeros();
    let mut r = Matrix3::identity();
    let ez = Vector3::z();
    let mut out = Vec::new();
    for arc in &arcs.segments {
        let (s, c) = arc.bend_plane.sin_cos();
        let omega = skew(&(Vector3::new(-s, c, 0.0) * arc.curvature));
        let h = arc.length / STEPS_PER_SEGMENT as f64;
        let f = |r: &Matrix3<f64>| (r * ez, r * omega);
        for k in 1..=STEPS_PER_SEGMENT {
            let (dp1, dr1) = f(&r);
            let (dp2, dr2) = f(&(r + dr1 * (h / 2.0)));
            let (dp3, dr3) = f(&(r + dr2 * (h / 2.0)));
            let (dp4, dr4) = f(&(r + dr3 * h));
            p += (dp1 + dp2 * 2.0 + dp3 * 2.0 + dp4) * (h / 6.0);
            r += (dr1 + dr2 * 2.0 + dr3 * 2.0 + dr4) * (h / 6.0);
            if k % (STEPS_PER_SEGMENT / n) == 0 {
                out.push(p);
            }
        }
    }
    out
}

pub fn bounds(zone: &SafeZone) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in zone.vertices() {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let pad = (hi - lo) * 0.1;
    (lo - pad, hi + pad)
}

/// Mix of uniform points in the padded box and points just off the surface.
pub fn sample(zone: &SafeZone, rng: &mut impl Rng) -> Vector3<f64> {
    let (lo, hi) = bounds(zone);
    if rng.gen_bool(0.7) {
        Vector3::from_fn(|i, _| rng.gen_range(lo[i]..hi[i]))
    } else {
        let t = zone.triangles()[rng.gen_range(0..zone.triangle_count())];
        let [a, b, c] = t.map(|i| zone.vertices()[i as usize]);
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            (u, v) = (1.0 - u, 1.0 - v);
        }
        let n = (b - a).cross(&(c - a)).normalize();
        a + (b - a) * u + (c - a) * v + n * rng.gen_range(-2.0..2.0)
    }
}

/// Closest point on a triangle, region by region.
pub fn closest_on_triangle(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

pub fn unsigned_distance(zone: &SafeZone, p: &Vector3<f64>) -> f64 {
    zone.triangles()
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| zone.vertices()[i as usize]);
            (p - closest_on_triangle(p, &a, &b, &c)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Ray-crossing parity. Returns None when the ray grazes an edge.
pub fn parity_inside(zone: &SafeZone, p: &Vector3<f64>, dir: &Vector3<f64>) -> Option<bool> {
    let mut hits = 0;
    for t in zone.triangles() {
        let [a, b, c] = t.map(|i| zone.vertices()[i as usize]);
        let e1 = b - a;
        let e2 = c - a;
        let h = dir.cross(&e2);
        let det = e1.dot(&h);
        if det.abs() < 1e-14 {
            continue;
        }
        let s = p - a;
        let u = s.dot(&h) / det;
        let q = s.cross(&e1);
        let v = dir.dot(&q) / det;
        let t = e2.dot(&q) / det;
        if t <= 0.0 {
            continue;
        }
        let eps = 1e-9;
        if u < -eps || v < -eps || u + v > 1.0 + eps {
            continue;
        }
        if u < eps || v < eps || u + v > 1.0 - eps {
            return None;
        }
        hits += 1;
    }
    Some(hits % 2 == 1)
}

/// Proptest settings for integration tests, which have no source file to
/// persist failures next to.
pub fn proptest_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}
