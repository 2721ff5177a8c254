//! Procedural safe-zone meshes shipped with the repository.
//!
//! `tdcr meshes --out meshes/` regenerates the OBJ files from these.

use std::f64::consts::PI;

use nalgebra::Vector3;

pub type Mesh = (Vec<Vector3<f64>>, Vec<[u32; 3]>);

/// Axis-aligned box, outward winding.
pub fn axis_box(min: Vector3<f64>, max: Vector3<f64>) -> Mesh {
    let v = |x: bool, y: bool, z: bool| {
        Vector3::new(
            if x { max.x } else { min.x },
            if y { max.y } else { min.y },
            if z { max.z } else { min.z },
        )
    };
    let vertices = vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, false, true),
        v(true, false, true),
        v(true, true, true),
        v(false, true, true),
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    (vertices, triangles)
}

/// Cube of side 1 centred at the origin.
pub fn unit_cube() -> Mesh {
    axis_box(Vector3::repeat(-0.5), Vector3::repeat(0.5))
}

/// Box the robot stands in, with a wall at `x = 40` that exterior targets lie
/// beyond.
pub fn half_space_box() -> Mesh {
    axis_box(Vector3::new(-60.0, -60.0, -20.0), Vector3::new(40.0, 60.0, 260.0))
}

/// Cross-section frame along a centreline: centre, two unit normals whose
/// cross product is the tangent.
#[derive(Debug, Clone, Copy)]
pub struct Station {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub binormal: Vector3<f64>,
}

/// Closed tube of polygonal cross-section swept through `stations`, capped
/// at both ends with a fan around a centre vertex.
pub fn swept_tube(stations: &[Station], radius: f64, sides: usize) -> Mesh {
    assert!(stations.len() >= 2 && sides >= 3);
    let mut vertices = Vec::with_capacity(stations.len() * sides + 2);
    for st in stations {
        for i in 0..sides {
            let psi = 2.0 * PI * i as f64 / sides as f64;
            vertices.push(st.center + radius * (psi.cos() * st.normal + psi.sin() * st.binormal));
        }
    }
    let start = vertices.len() as u32;
    vertices.push(stations[0].center);
    let end = vertices.len() as u32;
    vertices.push(stations[stations.len() - 1].center);

    let m = sides as u32;
    let mut triangles = Vec::new();
    for k in 0..stations.len() as u32 - 1 {
        for i in 0..m {
            let a = k * m + i;
            let b = k * m + (i + 1) % m;
            let c = (k + 1) * m + i;
            let d = (k + 1) * m + (i + 1) % m;
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    let last = (stations.len() as u32 - 1) * m;
    for i in 0..m {
        triangles.push([start, (i + 1) % m, i]);
        triangles.push([end, last + i, last + (i + 1) % m]);
    }
    (vertices, triangles)
}

fn straight_station(z: f64) -> Station {
    Station {
        center: Vector3::new(0.0, 0.0, z),
        normal: Vector3::x(),
        binormal: Vector3::y(),
    }
}

/// Station on an arc in the x-z plane that leaves `(x0, 0, z0)` heading
/// along `heading` (angle from +z towards +x) and turns towards +x.
fn arc_station(x0: f64, z0: f64, radius: f64, heading: f64, swept: f64) -> Station {
    let a = heading + swept;
    // centre of curvature lies to the +x side of the heading direction
    let cx = x0 + radius * heading.cos();
    let cz = z0 - radius * heading.sin();
    Station {
        center: Vector3::new(cx - radius * a.cos(), 0.0, cz + radius * a.sin()),
        normal: Vector3::new(a.cos(), 0.0, -a.sin()),
        binormal: Vector3::y(),
    }
}

pub const WINDING_TUBE_RADIUS: f64 = 22.0;
pub const WINDING_TUBE_STRAIGHT_END: f64 = 190.0;
pub const WINDING_TUBE_BEND_RADIUS: f64 = 110.0;
pub const WINDING_TUBE_BEND_ANGLE: f64 = PI / 3.0;

/// Point on the winding-tube centreline after turning `swept` rad into the
/// bend.
pub fn winding_tube_centerline(swept: f64) -> Vector3<f64> {
    arc_station(
        0.0,
        WINDING_TUBE_STRAIGHT_END,
        WINDING_TUBE_BEND_RADIUS,
        0.0,
        swept,
    )
    .center
}

/// Vertical tube around the robot base that bends towards +x:
/// 29 rings of 12 vertices plus two cap centres, 350 vertices in total.
pub fn winding_tube() -> Mesh {
    let mut stations = vec![
        straight_station(-20.0),
        straight_station(50.0),
        straight_station(120.0),
    ];
    let arc_rings = 26;
    for k in 0..arc_rings {
        let swept = WINDING_TUBE_BEND_ANGLE * k as f64 / (arc_rings - 1) as f64;
        stations.push(arc_station(
            0.0,
            WINDING_TUBE_STRAIGHT_END,
            WINDING_TUBE_BEND_RADIUS,
            0.0,
            swept,
        ));
    }
    swept_tube(&stations, WINDING_TUBE_RADIUS, 12)
}

/// Tube that rises from the base, turns over through 180 degrees and
/// descends again.
pub fn inverted_u() -> Mesh {
    let radius = 18.0;
    let bend = 35.0;
    let top = 150.0;
    let mut stations = vec![straight_station(-20.0), straight_station(60.0)];
    let rings = 24;
    for k in 0..rings {
        let swept = PI * k as f64 / (rings - 1) as f64;
        stations.push(arc_station(0.0, top, bend, 0.0, swept));
    }
    let down = |z: f64| Station {
        center: Vector3::new(2.0 * bend, 0.0, z),
        normal: Vector3::new(-1.0, 0.0, 0.0),
        binormal: Vector3::y(),
    };
    stations.push(down(110.0));
    stations.push(down(80.0));
    swept_tube(&stations, radius, 12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::SafeZone;

    #[test]
    fn shipped_meshes_are_closed() {
        for (name, (v, t)) in [
            ("cube", unit_cube()),
            ("box", half_space_box()),
            ("tube", winding_tube()),
            ("u", inverted_u()),
        ] {
            let zone = SafeZone::new(v, t).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(zone.signed_distance(&Vector3::new(0.0, 0.0, 10.0)).distance > 0.0 || name == "cube");
        }
    }

    #[test]
    fn tube_vertex_count_is_about_350() {
        let (v, t) = winding_tube();
        assert_eq!(v.len(), 350);
        let zone = SafeZone::new(v, t).unwrap();
        // on the centreline the distance is the polygon inradius
        let r = zone.signed_distance(&Vector3::new(0.0, 0.0, 100.0)).distance;
        assert!((r - WINDING_TUBE_RADIUS * (PI / 12.0).cos()).abs() < 1e-9);
    }

    #[test]
    fn centreline_is_inside_the_bend() {
        let (v, t) = winding_tube();
        let zone = SafeZone::new(v, t).unwrap();
        for k in 0..=10 {
            let p = winding_tube_centerline(WINDING_TUBE_BEND_ANGLE * 0.8 * k as f64 / 10.0);
            assert!(zone.signed_distance(&p).distance > 15.0, "{p:?}");
        }
    }
}
