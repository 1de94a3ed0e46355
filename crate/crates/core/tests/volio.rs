use std::collections::VecDeque;
use std::fs;

use nucparc::volio::{
    connected_components, dilate_mask, load_labelmap, load_mask, load_volume, save_volume,
    Connectivity, Geometry, Labelmap, Mask, Volume3D,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn random_mask(n: usize, density: f64, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::with_spacing([n, n, n], [1.0; 3]).unwrap();
    Mask::from_fn(g, |_| rng.random_bool(density))
}

fn oblique_geometry(dims: [usize; 3]) -> Geometry {
    let affine = [
        [-1.25, 0.0, 0.0, 90.0],
        [0.0, 1.25, 0.125, -126.0],
        [0.0, 0.0, 1.25, -72.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    Geometry::new(dims, [1.25; 3], affine).unwrap()
}

#[test]
fn random_float_volume_roundtrip() {
    let dir = tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = oblique_geometry([7, 5, 6]);
    let data: Vec<f32> = (0..g.len()).map(|_| rng.random::<f32>() * 10.0 - 5.0).collect();
    let v = Volume3D::new(g, data).unwrap();
    for name in ["v.nii", "v.nii.gz"] {
        let p = dir.path().join(name);
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back, v, "{name}");
    }
}

#[test]
fn float_payload_is_byte_identical_after_resave() {
    let dir = tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = oblique_geometry([4, 4, 4]);
    let data: Vec<f32> = (0..g.len()).map(|_| rng.random::<f32>()).collect();
    let a = dir.path().join("a.nii");
    let b = dir.path().join("b.nii");
    save_volume(&Volume3D::new(g, data).unwrap(), &a).unwrap();
    save_volume(&load_volume(&a).unwrap(), &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn mask_and_labelmap_roundtrip() {
    let dir = tempdir().unwrap();
    let m = random_mask(9, 0.4, 3);
    let p = dir.path().join("m.nii.gz");
    save_volume(&m, &p).unwrap();
    assert_eq!(load_mask(&p).unwrap(), m);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = oblique_geometry([6, 6, 6]);
    let labels: Vec<u32> = (0..g.len()).map(|_| rng.random_range(0..400)).collect();
    let lm = Labelmap::new(g, labels).unwrap();
    let p = dir.path().join("l.nii");
    save_volume(&lm, &p).unwrap();
    assert_eq!(load_labelmap(&p).unwrap(), lm);
}

/// Independent BFS over explicit neighbor predicates.
fn flood_fill_partition(m: &Mask, conn: Connectivity) -> Vec<usize> {
    let [nx, ny, nz] = m.geometry.dims();
    let adjacent = |a: [usize; 3], b: [usize; 3]| {
        let d: Vec<i64> = (0..3).map(|i| (a[i] as i64 - b[i] as i64).abs()).collect();
        if d.iter().any(|&x| x > 1) {
            return false;
        }
        let s: i64 = d.iter().sum();
        match conn {
            Connectivity::Six => s == 1,
            Connectivity::Eighteen => s == 1 || s == 2,
            Connectivity::TwentySix => s >= 1,
        }
    };
    let mut comp = vec![usize::MAX; m.geometry.len()];
    let mut next = 0;
    for start in m.foreground().collect::<Vec<_>>() {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        let mut q = VecDeque::from([start]);
        while let Some(v) = q.pop_front() {
            let c = m.geometry.coords(v);
            for x in c[0].saturating_sub(1)..(c[0] + 2).min(nx) {
                for y in c[1].saturating_sub(1)..(c[1] + 2).min(ny) {
                    for z in c[2].saturating_sub(1)..(c[2] + 2).min(nz) {
                        let n = [x, y, z];
                        let ni = m.geometry.index(n);
                        if m.is_set(ni) && comp[ni] == usize::MAX && adjacent(c, n) {
                            comp[ni] = next;
                            q.push_back(ni);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    comp
}

#[test]
fn components_match_flood_fill_oracle() {
    for (seed, conn) in [(1, Connectivity::Six), (2, Connectivity::Eighteen), (3, Connectivity::TwentySix)] {
        let m = random_mask(16, 0.3, seed);
        let cc = connected_components(&m, conn);
        let oracle = flood_fill_partition(&m, conn);
        let n_oracle = oracle.iter().filter(|&&c| c != usize::MAX).max().map_or(0, |m| m + 1);
        assert_eq!(cc.count(), n_oracle, "component count, connectivity {conn:?}");
        assert_eq!(cc.sizes.iter().sum::<usize>(), m.count());
        assert!(cc.sizes.windows(2).all(|w| w[0] >= w[1]));
        // same partition: label pairs agree
        let mut map = std::collections::HashMap::new();
        for idx in m.foreground() {
            let ours = cc.labels.data[idx];
            assert_ne!(ours, 0);
            let prev = map.insert(oracle[idx], ours);
            assert!(prev.is_none() || prev == Some(ours));
        }
        let mut seen: Vec<u32> = map.values().copied().collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), n_oracle);
    }
}

#[test]
fn radius_two_equals_two_unit_dilations() {
    for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
        let m = random_mask(12, 0.02, 11);
        let twice = dilate_mask(&dilate_mask(&m, 1, conn).unwrap(), 1, conn).unwrap();
        assert_eq!(dilate_mask(&m, 2, conn).unwrap(), twice);
    }
}

#[test]
fn dilation_stays_within_radius() {
    // every added voxel is within `radius` chessboard steps (26-neighborhood)
    let m = random_mask(10, 0.01, 5);
    let d = dilate_mask(&m, 2, Connectivity::TwentySix).unwrap();
    let seeds: Vec<[usize; 3]> = m.foreground().map(|i| m.geometry.coords(i)).collect();
    for idx in d.foreground() {
        let c = d.geometry.coords(idx);
        let near = seeds.iter().any(|s| (0..3).all(|a| (s[a] as i64 - c[a] as i64).abs() <= 2));
        assert!(near);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dilation_is_monotone_and_extensive(seed in 0u64..1000, extra in 0u64..1000, radius in 1usize..3) {
        let a = random_mask(8, 0.05, seed);
        let noise = random_mask(8, 0.05, extra);
        let b = Mask::new(
            a.geometry.clone(),
            a.data().iter().zip(noise.data()).map(|(x, y)| x | y).collect(),
        ).unwrap();
        let da = dilate_mask(&a, radius, Connectivity::Eighteen).unwrap();
        let db = dilate_mask(&b, radius, Connectivity::Eighteen).unwrap();
        prop_assert!(a.is_subset_of(&da));
        prop_assert!(da.is_subset_of(&db));
    }

    #[test]
    fn component_count_ignores_voxel_order(seed in 0u64..1000) {
        // mirror the grid: same topology, different scan order
        let m = random_mask(7, 0.35, seed);
        let n = 7;
        let mirrored = Mask::from_fn(m.geometry.clone(), |[i, j, k]| m.get([n - 1 - i, n - 1 - j, n - 1 - k]));
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let a = connected_components(&m, conn);
            let b = connected_components(&mirrored, conn);
            prop_assert_eq!(a.sizes, b.sizes);
        }
    }
}
