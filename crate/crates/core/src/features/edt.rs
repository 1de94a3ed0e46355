//! Exact squared Euclidean distance transform (separable lower-envelope method).

/// Squared distance from every cell of a `dims` box to the nearest target
/// cell, with per-axis weights `w` (squared voxel spacing). Cells with no
/// reachable target get `f64::INFINITY`.
pub(crate) fn squared_edt(targets: &[bool], dims: [usize; 3], w: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut f: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { f64::INFINITY }).collect();
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut scratch = Scratch::new(max_n);

    for z in 0..nz {
        for y in 0..ny {
            let base = nx * (y + ny * z);
            line[..nx].copy_from_slice(&f[base..base + nx]);
            transform_1d(&line[..nx], &mut out[..nx], w[0], &mut scratch);
            f[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = f[x + nx * (y + ny * z)];
            }
            transform_1d(&line[..ny], &mut out[..ny], w[1], &mut scratch);
            for y in 0..ny {
                f[x + nx * (y + ny * z)] = out[y];
            }
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = f[x + nx * (y + ny * z)];
            }
            transform_1d(&line[..nz], &mut out[..nz], w[2], &mut scratch);
            for z in 0..nz {
                f[x + nx * (y + ny * z)] = out[z];
            }
        }
    }
    f
}

struct Scratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self { v: vec![0; n], z: vec![0.0; n + 1] }
    }
}

/// `out[q] = min_p w * (q - p)^2 + f[p]` over finite `f[p]`.
fn transform_1d(f: &[f64], out: &mut [f64], w: f64, s: &mut Scratch) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            if k < 0 {
                k = 0;
                s.v[0] = q;
                s.z[0] = f64::NEG_INFINITY;
                s.z[1] = f64::INFINITY;
                break;
            }
            let p = s.v[k as usize];
            let fp = f[p] + w * (p * p) as f64;
            let cross = (fq - fp) / (2.0 * w * (q as f64 - p as f64));
            if cross <= s.z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            s.v[k as usize] = q;
            s.z[k as usize] = cross;
            s.z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while s.z[j + 1] < q as f64 {
            j += 1;
        }
        let p = s.v[j];
        let d = q as f64 - p as f64;
        *o = w * d * d + f[p];
    }
}
