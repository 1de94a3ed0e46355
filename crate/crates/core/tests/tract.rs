use nucparc::tract::{
    assign_clusters, cluster_streamlines, filter_by_mask, load_cluster_model, load_tck,
    resample_streamline, save_cluster_model, save_tck, streamline_distance, ClusterModel,
    ClusterParams, Point, Streamline, StreamlineSet,
};
use nucparc::volio::{Geometry, Mask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::tempdir;

fn random_streamline(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Streamline {
    let mut p = [rng.random::<f64>() * scale, rng.random::<f64>() * scale, rng.random::<f64>() * scale];
    let mut pts = vec![p];
    for _ in 1..n {
        for v in &mut p {
            *v += rng.random::<f64>() * 2.0 - 1.0;
        }
        pts.push(p);
    }
    Streamline::new(pts).unwrap()
}

fn random_set(seed: u64, count: usize) -> StreamlineSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = (0..count).map(|_| {
        let n = rng.random_range(2..12);
        random_streamline(&mut rng, n, 20.0)
    });
    StreamlineSet::new(format!("s{seed}"), lines.collect())
}

#[test]
fn tck_roundtrip_within_f32() {
    let dir = tempdir().unwrap();
    let set = random_set(1, 40);
    let p = dir.path().join("sub.tck");
    save_tck(&set, &p).unwrap();
    let back = load_tck(&p).unwrap();
    assert_eq!(back.len(), set.len());
    assert_eq!(back.subject_id, "sub");
    for (a, b) in set.streamlines.iter().zip(&back.streamlines) {
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points().iter().zip(b.points()) {
            for ax in 0..3 {
                assert_eq!(q[ax], p[ax] as f32 as f64);
            }
        }
    }
}

/// Slab test: does the segment a-b intersect the closed voxel box around `c`?
fn segment_hits_voxel(a: [f64; 3], b: [f64; 3], c: [i64; 3]) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for ax in 0..3 {
        let lo = c[ax] as f64 - 0.5;
        let hi = c[ax] as f64 + 0.5;
        let d = b[ax] - a[ax];
        if d.abs() < 1e-15 {
            if a[ax] < lo || a[ax] > hi {
                return false;
            }
        } else {
            let (mut ta, mut tb) = ((lo - a[ax]) / d, (hi - a[ax]) / d);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

#[test]
fn filter_matches_line_box_oracle() {
    let g = Geometry::new(
        [12, 12, 12],
        [1.5, 1.5, 1.5],
        [[1.5, 0.0, 0.0, -3.0], [0.0, 1.5, 0.0, 2.0], [0.0, 0.0, 1.5, 1.0], [0.0, 0.0, 0.0, 1.0]],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // sparse mask so plenty of streamlines miss it
    let mask = Mask::from_fn(g.clone(), |_| rng.random_bool(0.01));
    let lines: Vec<Streamline> = (0..300)
        .map(|_| {
            let a: Point = [rng.random::<f64>() * 20.0 - 4.0, rng.random::<f64>() * 20.0 + 1.0, rng.random::<f64>() * 20.0];
            let b: Point = [a[0] + rng.random::<f64>() * 8.0 - 4.0, a[1] + rng.random::<f64>() * 8.0 - 4.0, a[2] + rng.random::<f64>() * 8.0 - 4.0];
            Streamline::new(vec![a, b]).unwrap()
        })
        .collect();
    let set = StreamlineSet::new("s", lines.clone());
    let kept = filter_by_mask(&set, &mask).kept;

    let fg: Vec<[i64; 3]> = mask
        .foreground()
        .map(|i| {
            let c = g.coords(i);
            [c[0] as i64, c[1] as i64, c[2] as i64]
        })
        .collect();
    let oracle: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let a = g.world_to_voxel(s.points()[0]);
            let b = g.world_to_voxel(s.points()[1]);
            fg.iter().any(|&c| segment_hits_voxel(a, b, c))
        })
        .map(|(i, _)| i)
        .collect();
    assert!(!oracle.is_empty() && oracle.len() < lines.len());
    assert_eq!(kept, oracle);
}

#[test]
fn filter_is_subset_and_idempotent() {
    let g = Geometry::with_spacing([20, 20, 20], [1.0; 3]).unwrap();
    let mask = Mask::from_fn(g, |c| c.iter().all(|&x| (8..12).contains(&x)));
    let set = random_set(3, 200);
    let once = filter_by_mask(&set, &mask).set;
    let twice = filter_by_mask(&once, &mask).set;
    assert_eq!(once, twice);
    assert!(once.streamlines.iter().all(|s| set.streamlines.contains(s)));
}

#[test]
fn filter_center_and_outside() {
    let g = Geometry::with_spacing([9, 9, 9], [1.0; 3]).unwrap();
    let mask = Mask::from_fn(g, |c| c.iter().all(|&x| (3..6).contains(&x)));
    let through = Streamline::new(vec![[0.0, 4.0, 4.0], [8.0, 4.0, 4.0]]).unwrap();
    let away = Streamline::new(vec![[50.0, 50.0, 50.0], [60.0, 50.0, 50.0]]).unwrap();
    let f = filter_by_mask(&StreamlineSet::new("s", vec![through, away]), &mask);
    assert_eq!(f.kept, vec![0]);
}

/// Arc-length position of each resampled point, measured by dense sampling
/// of the original polyline.
#[test]
fn resample_matches_dense_arc_length_oracle() {
    let s = Streamline::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [3.0, 4.0, 0.0], [3.0, 4.0, 7.5], [2.0, 4.0, 7.5]]).unwrap();
    let p = 9;
    let r = resample_streamline(&s, p).unwrap();
    let steps = 200_000usize;
    let mut dense = Vec::with_capacity(steps * 4 + 1);
    for w in s.points().windows(2) {
        for t in 0..steps {
            let f = t as f64 / steps as f64;
            dense.push([
                w[0][0] + f * (w[1][0] - w[0][0]),
                w[0][1] + f * (w[1][1] - w[0][1]),
                w[0][2] + f * (w[1][2] - w[0][2]),
            ]);
        }
    }
    dense.push(*s.points().last().unwrap());
    let mut arc = vec![0.0];
    for w in dense.windows(2) {
        let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2) + (w[1][2] - w[0][2]).powi(2)).sqrt();
        arc.push(arc.last().unwrap() + d);
    }
    let total = *arc.last().unwrap();
    for (n, q) in r.points().iter().enumerate() {
        let target = total * n as f64 / (p - 1) as f64;
        let i = arc.partition_point(|&a| a < target).min(dense.len() - 1);
        let i0 = i.saturating_sub(1);
        let (a0, a1) = (arc[i0], arc[i]);
        let f = if a1 > a0 { (target - a0) / (a1 - a0) } else { 0.0 };
        let expect = [
            dense[i0][0] + f * (dense[i][0] - dense[i0][0]),
            dense[i0][1] + f * (dense[i][1] - dense[i0][1]),
            dense[i0][2] + f * (dense[i][2] - dense[i0][2]),
        ];
        for ax in 0..3 {
            assert!((q[ax] - expect[ax]).abs() < 1e-6, "point {n} axis {ax}: {} vs {}", q[ax], expect[ax]);
        }
    }
    assert_eq!(r.points()[0], s.points()[0]);
    assert_eq!(r.points()[p - 1], *s.points().last().unwrap());
}

/// K separated bundles: one medoid per bundle, members nearest their own.
#[test]
fn separated_bundles_get_one_medoid_each() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let k = 5;
    let mut subjects = Vec::new();
    let mut truth = Vec::new();
    for subj in 0..3 {
        let mut lines = Vec::new();
        let mut ids = Vec::new();
        for b in 0..k {
            let base = [b as f64 * 25.0, (b % 2) as f64 * 10.0, 0.0];
            for _ in 0..15 {
                let off = [noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)];
                let pts = (0..6)
                    .map(|t| [base[0] + off[0] + t as f64 * 0.5, base[1] + off[1] + t as f64 * 3.0, base[2] + off[2]])
                    .collect();
                lines.push(Streamline::new(pts).unwrap());
                ids.push(b);
            }
        }
        subjects.push(StreamlineSet::new(format!("sub{subj}"), lines));
        truth.push(ids);
    }
    let params = ClusterParams { k, points: 10, seed: 9, max_pool: 1000 };
    let model = cluster_streamlines(&subjects, &params).unwrap();
    assert_eq!(model.k(), k);
    for (set, ids) in subjects.iter().zip(&truth) {
        let a = assign_clusters(set, &model).unwrap();
        // bundle -> cluster must be a bijection
        let mut map = vec![None; k];
        for (cl, &b) in a.iter().zip(ids) {
            match map[b] {
                None => map[b] = Some(*cl),
                Some(prev) => assert_eq!(prev, *cl),
            }
        }
        let mut used: Vec<u32> = map.iter().map(|m| m.unwrap()).collect();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), k);
    }
}

#[test]
fn single_medoid_matches_exhaustive_search() {
    let set = random_set(12, 150);
    let params = ClusterParams { k: 1, points: 8, seed: 1, max_pool: 1000 };
    let model = cluster_streamlines(std::slice::from_ref(&set), &params).unwrap();
    let resampled: Vec<Streamline> =
        set.streamlines.iter().map(|s| resample_streamline(s, 8).unwrap()).collect();
    let costs: Vec<f64> = resampled
        .iter()
        .map(|a| resampled.iter().map(|b| streamline_distance(a, b).unwrap()).sum())
        .collect();
    let best = (0..costs.len()).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap();
    assert_eq!(model.medoids()[0], resampled[best]);
}

#[test]
fn clustering_is_deterministic_and_medoids_self_assign() {
    let sets = [random_set(30, 80), random_set(31, 60)];
    let params = ClusterParams { k: 6, points: 7, seed: 77, max_pool: 100 };
    let a = cluster_streamlines(&sets, &params).unwrap();
    let b = cluster_streamlines(&sets, &params).unwrap();
    assert_eq!(a, b);
    let medoid_set = StreamlineSet::new("m", a.medoids().to_vec());
    let ids = assign_clusters(&medoid_set, &a).unwrap();
    assert_eq!(ids, (1..=6).collect::<Vec<u32>>());
}

#[test]
fn assignment_matches_brute_force_and_ignores_order() {
    let model_src = random_set(40, 60);
    let params = ClusterParams { k: 7, points: 9, seed: 3, max_pool: 60 };
    let model = cluster_streamlines(std::slice::from_ref(&model_src), &params).unwrap();
    let test = random_set(41, 100);
    let ids = assign_clusters(&test, &model).unwrap();
    for (s, &id) in test.streamlines.iter().zip(&ids) {
        let r = resample_streamline(s, 9).unwrap();
        let d: Vec<f64> = model.medoids().iter().map(|m| streamline_distance(&r, m).unwrap()).collect();
        let mut best = 0;
        for j in 1..d.len() {
            if d[j] < d[best] {
                best = j;
            }
        }
        assert_eq!(id as usize, best + 1);
    }
    let mut rev = test.clone();
    rev.streamlines.reverse();
    let mut ids_rev = assign_clusters(&rev, &model).unwrap();
    ids_rev.reverse();
    assert_eq!(ids, ids_rev);
    assert!(assign_clusters(&StreamlineSet::default(), &model).unwrap().is_empty());
}

#[test]
fn ties_go_to_lowest_cluster_id() {
    let line = |y: f64| Streamline::new(vec![[0.0, y, 0.0], [4.0, y, 0.0]]).unwrap();
    let medoids = vec![line(10.0), line(-1.0), line(30.0), line(40.0), line(1.0)];
    let model = ClusterModel::new(medoids, 2, 0).unwrap();
    let ids = assign_clusters(&StreamlineSet::new("t", vec![line(0.0)]), &model).unwrap();
    assert_eq!(ids, vec![2]);
}

#[test]
fn cluster_model_persistence() {
    let dir = tempdir().unwrap();
    let params = ClusterParams { k: 4, points: 6, seed: 5, max_pool: 50 };
    let model = cluster_streamlines(&[random_set(50, 30)], &params).unwrap();
    let stem = dir.path().join("clusters");
    save_cluster_model(&model, &stem).unwrap();
    let back = load_cluster_model(&stem).unwrap();
    assert_eq!(back.k(), 4);
    assert_eq!(back.points(), 6);
    assert_eq!(back.seed(), 5);
    for (a, b) in model.medoids().iter().zip(back.medoids()) {
        assert!(streamline_distance(a, b).unwrap() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distance_is_a_symmetric_flip_invariant_dissimilarity(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = resample_streamline(&random_streamline(&mut rng, 6, 10.0), 10).unwrap();
        let b = resample_streamline(&random_streamline(&mut rng, 4, 10.0), 10).unwrap();
        let ab = streamline_distance(&a, &b).unwrap();
        let ba = streamline_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((streamline_distance(&a, &b.reversed()).unwrap() - ab).abs() < 1e-12);
        prop_assert_eq!(streamline_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn parallel_offset_lines(t in 0.01f64..20.0) {
        let a = resample_streamline(&Streamline::new(vec![[0.0, 0.0, 0.0], [30.0, 0.0, 0.0]]).unwrap(), 15).unwrap();
        let b = resample_streamline(&Streamline::new(vec![[0.0, 0.0, t], [30.0, 0.0, t]]).unwrap(), 15).unwrap();
        prop_assert!((streamline_distance(&a, &b).unwrap() - t).abs() < 1e-9);
    }
}
