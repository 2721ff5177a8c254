//! ASCII OBJ and binary STL triangle meshes.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;

type Mesh = (Vec<Vector3<f64>>, Vec<[u32; 3]>);

/// Vertices closer than this (mm) are merged when reading STL.
pub const STL_WELD_TOLERANCE: f64 = 1e-6;

pub fn parse_obj(text: &str) -> Result<Mesh, String> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| format!("line {}: bad vertex: {e}", lineno + 1))?;
                if coords.len() != 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", lineno + 1));
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<&str> = parts.collect();
                if idx.len() != 3 {
                    return Err(format!(
                        "line {}: only triangular faces are supported (got {} vertices)",
                        lineno + 1,
                        idx.len()
                    ));
                }
                let mut tri = [0u32; 3];
                for (slot, token) in tri.iter_mut().zip(idx) {
                    let first = token.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|e| format!("line {}: bad face index {token:?}: {e}", lineno + 1))?;
                    let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(format!("line {}: face index {i} out of range", lineno + 1));
                    }
                    *slot = resolved as u32;
                }
                triangles.push(tri);
            }
            _ => {}
        }
    }
    Ok((vertices, triangles))
}

pub fn write_obj(vertices: &[Vector3<f64>], triangles: &[[u32; 3]], comment: &str) -> String {
    let mut out = String::new();
    for line in comment.lines() {
        let _ = writeln!(out, "# {line}");
    }
    for v in vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for t in triangles {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn parse_stl(bytes: &[u8]) -> Result<Mesh, String> {
    if bytes.len() < 84 {
        return Err("file too short for binary STL".into());
    }
    if bytes.starts_with(b"solid") && !binary_size_matches(bytes) {
        return Err("ASCII STL is not supported; use binary STL or OBJ".into());
    }
    let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    if !binary_size_matches(bytes) {
        return Err(format!(
            "binary STL declares {count} triangles but has {} bytes",
            bytes.len()
        ));
    }
    let mut welder = Welder::default();
    let mut triangles = Vec::with_capacity(count);
    for k in 0..count {
        let rec = &bytes[84 + 50 * k..84 + 50 * (k + 1)];
        let mut tri = [0u32; 3];
        for (v, slot) in tri.iter_mut().enumerate() {
            let off = 12 + 12 * v;
            let f = |i: usize| f32::from_le_bytes(rec[off + 4 * i..off + 4 * i + 4].try_into().unwrap()) as f64;
            *slot = welder.insert(Vector3::new(f(0), f(1), f(2)));
        }
        triangles.push(tri);
    }
    Ok((welder.vertices, triangles))
}

fn binary_size_matches(bytes: &[u8]) -> bool {
    bytes.len() >= 84 && {
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        bytes.len() == 84 + 50 * count
    }
}

pub fn write_stl(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Vec<u8> {
    let mut out = vec![0u8; 80];
    out.extend_from_slice(&(triangles.len() as u32).to_le_bytes());
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        let n = (b - a).cross(&(c - a)).normalize();
        for v in [n, a, b, c] {
            for k in 0..3 {
                out.extend_from_slice(&(v[k] as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

/// Merges vertices within `STL_WELD_TOLERANCE` using a hashed grid.
#[derive(Default)]
struct Welder {
    vertices: Vec<Vector3<f64>>,
    grid: HashMap<[i64; 3], Vec<u32>>,
}

impl Welder {
    fn cell(p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|k| (p[k] / STL_WELD_TOLERANCE).floor() as i64)
    }

    fn insert(&mut self, p: Vector3<f64>) -> u32 {
        let c = Self::cell(&p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &id in ids {
                            if (self.vertices[id as usize] - p).norm() <= STL_WELD_TOLERANCE {
                                return id;
                            }
                        }
                    }
                }
            }
        }
        let id = self.vertices.len() as u32;
        self.vertices.push(p);
        self.grid.entry(c).or_default().push(id);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn obj_with_slashes_and_negative_indices() {
        let text = "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2//2 -1\n";
        let (v, t) = parse_obj(text).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(t, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_rejects_quads() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert!(parse_obj(text).unwrap_err().contains("triangular"));
    }

    #[test]
    fn stl_welds_shared_vertices() {
        let (v, t) = crate::meshgen::unit_cube();
        let bytes = write_stl(&v, &t);
        let (v2, t2) = parse_stl(&bytes).unwrap();
        assert_eq!(v2.len(), 8);
        assert_eq!(t2.len(), 12);
    }
}
