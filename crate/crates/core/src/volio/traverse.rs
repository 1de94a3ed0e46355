/// Visits every voxel a straight segment passes through.
///
/// Endpoints are continuous voxel coordinates with voxel centers at integers,
/// so voxel `v` spans `[v - 0.5, v + 0.5)` on each axis. Voxels are reported
/// in order along the segment (3D DDA), starting with the voxel holding `a`.
pub fn traverse_segment(a: [f64; 3], b: [f64; 3], mut visit: impl FnMut([i64; 3])) {
    let start = [a[0] + 0.5, a[1] + 0.5, a[2] + 0.5];
    let end = [b[0] + 0.5, b[1] + 0.5, b[2] + 0.5];
    let mut cell = [start[0].floor() as i64, start[1].floor() as i64, start[2].floor() as i64];
    let last = [end[0].floor() as i64, end[1].floor() as i64, end[2].floor() as i64];
    visit(cell);

    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for ax in 0..3 {
        let d = end[ax] - start[ax];
        if d > 0.0 {
            step[ax] = 1;
            t_delta[ax] = 1.0 / d;
            t_max[ax] = ((cell[ax] + 1) as f64 - start[ax]) / d;
        } else if d < 0.0 {
            step[ax] = -1;
            t_delta[ax] = -1.0 / d;
            t_max[ax] = (cell[ax] as f64 - start[ax]) / d;
        }
    }

    let budget: i64 = (0..3).map(|ax| (last[ax] - cell[ax]).abs()).sum::<i64>() + 1;
    for _ in 0..budget {
        if cell == last {
            break;
        }
        let ax = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[ax] > 1.0 {
            break;
        }
        cell[ax] += step[ax];
        t_max[ax] += t_delta[ax];
        visit(cell);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collect(a: [f64; 3], b: [f64; 3]) -> Vec<[i64; 3]> {
        let mut v = Vec::new();
        traverse_segment(a, b, |c| v.push(c));
        v
    }

    #[test]
    fn axis_aligned_run() {
        let v = collect([0.0, 0.0, 0.0], [3.0, 0.0, 0.0]);
        assert_eq!(v, vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
    }

    #[test]
    fn point_segment() {
        assert_eq!(collect([1.2, 2.2, -0.7], [1.2, 2.2, -0.7]), vec![[1, 2, -1]]);
    }

    #[test]
    fn reversed_segment_visits_same_set() {
        let a = [0.13, -1.7, 2.2];
        let b = [4.9, 3.3, -2.41];
        let mut f = collect(a, b);
        let mut r = collect(b, a);
        f.sort();
        r.sort();
        assert_eq!(f, r);
    }

    #[test]
    fn consecutive_cells_are_face_neighbors() {
        let v = collect([0.3, 0.1, 0.2], [7.7, -5.2, 3.9]);
        for w in v.windows(2) {
            let d: i64 = (0..3).map(|a| (w[0][a] - w[1][a]).abs()).sum();
            assert_eq!(d, 1);
        }
    }
}
