mod common;

use std::time::Instant;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{parity_inside, sample, shipped_meshes, unsigned_distance};
use tdcr_core::sdf::Feature;

const QUERIES: usize = 10_000;

#[test]
fn queries_match_brute_force_on_shipped_meshes() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (name, zone) in shipped_meshes() {
        let mut worst_bf: f64 = 0.0;
        let mut worst_indep: f64 = 0.0;
        let mut parity_checked = 0;
        for _ in 0..QUERIES {
            let p = sample(&zone, &mut rng);
            let fast = zone.signed_distance(&p);
            let slow = zone.signed_distance_brute_force(&p);
            worst_bf = worst_bf.max((fast.distance - slow.distance).abs());
            assert_eq!(
                fast.distance > 0.0,
                slow.distance > 0.0,
                "{name}: sign differs at {p:?}"
            );
            worst_indep = worst_indep.max((fast.distance.abs() - unsigned_distance(&zone, &p)).abs());
            if fast.distance.abs() > 1e-6 {
                let inside = loop {
                    let dir = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize();
                    if let Some(inside) = parity_inside(&zone, &p, &dir) {
                        break inside;
                    }
                };
                assert_eq!(inside, fast.distance > 0.0, "{name}: parity disagrees at {p:?}");
                parity_checked += 1;
            }
        }
        eprintln!(
            "{name}: {} triangles, brute force {worst_bf:.1e}, independent {worst_indep:.1e}, {parity_checked} parity checks",
            zone.triangle_count()
        );
        assert!(worst_bf <= 1e-12, "{name}: {worst_bf}");
        assert!(worst_indep <= 1e-9, "{name}: {worst_indep}");
        assert!(parity_checked > QUERIES * 9 / 10);
    }
    let elapsed = started.elapsed().as_secs_f64();
    eprintln!("sdf oracle: {elapsed:.2} s");
    assert!(elapsed < 30.0, "took {elapsed} s");
}

#[test]
fn gradient_matches_finite_differences_away_from_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = 1e-6;
    for (name, zone) in shipped_meshes() {
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..2000 {
            let p = sample(&zone, &mut rng);
            let r = zone.signed_distance(&p);
            // smooth only where a single face interior is nearest, clear of
            // its edges and of the medial axis
            if !matches!(r.feature, Feature::Face(_)) || r.distance.abs() < 1e-3 {
                continue;
            }
            if zone.witnesses_within(&p, r.distance.abs() + 1e-3).len() != 1 {
                continue;
            }
            let fd = Vector3::from_fn(|i, _| {
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                (zone.signed_distance(&a).distance - zone.signed_distance(&b).distance) / (2.0 * h)
            });
            worst = worst.max((fd - r.gradient).amax());
            checked += 1;
        }
        eprintln!("{name}: {checked} gradient checks, worst {worst:.1e}");
        assert!(checked >= 200, "{name}: only {checked} smooth samples");
        assert!(worst <= 1e-5, "{name}: {worst}");
    }
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn distance_is_one_lipschitz(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, zone) in shipped_meshes() {
            for _ in 0..50 {
                let p = sample(&zone, &mut rng);
                let q = sample(&zone, &mut rng);
                let dp = zone.signed_distance(&p).distance;
                let dq = zone.signed_distance(&q).distance;
                prop_assert!((dp - dq).abs() <= (p - q).norm() + 1e-9);
            }
        }
    }
}
