use crate::error::{Error, Result};
use crate::volio::Labelmap;

/// Agreement between a predicted parcellation and the phantom truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub ari: f64,
    /// Dice per truth region after matching, index `g` for label `g + 1`.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// Truth label matched to each predicted label `1..=c`, 0 if unmatched.
    pub mapping: Vec<u32>,
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items. Returns 1 when
/// both labelings are trivial, where the index is undefined.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().max().map_or(0, |&m| m as usize + 1);
    let nb = b.iter().max().map_or(0, |&m| m as usize + 1);
    let mut table = vec![0u64; na * nb];
    for (&x, &y) in a.iter().zip(b) {
        table[x as usize * nb + y as usize] += 1;
    }
    let index: f64 = table.iter().map(|&n| choose2(n)).sum();
    let rows: f64 = (0..na).map(|i| choose2(table[i * nb..(i + 1) * nb].iter().sum())).sum();
    let cols: f64 = (0..nb).map(|j| choose2((0..na).map(|i| table[i * nb + j]).sum())).sum();
    let total = choose2(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost perfect matching on a square cost matrix; `result[row] = col`.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let (mut delta, mut j1) = (f64::INFINITY, 0);
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[owner[j] - 1] = j - 1;
    }
    result
}

/// Compares `pred` (labels `1..=c`) against `truth` (labels `1..=g`) on the
/// truth support. With `c <= g` parcels are matched one-to-one to maximize
/// total Dice; with `c > g` each parcel joins the region it overlaps most.
pub fn evaluate_recovery(pred: &Labelmap, truth: &Labelmap, c: usize) -> Result<Recovery> {
    pred.geometry.ensure_same_grid(&truth.geometry, "prediction and truth")?;
    let g = truth.max_label() as usize;
    if g == 0 {
        return Err(Error::Degenerate("truth labelmap is empty".into()));
    }
    if pred.max_label() as usize > c {
        return Err(Error::Parameter(format!("prediction has labels above c = {c}")));
    }
    let (mut p, mut t) = (Vec::new(), Vec::new());
    for (&x, &y) in pred.data.iter().zip(&truth.data) {
        if y > 0 {
            p.push(x);
            t.push(y);
        }
    }
    let ari = adjusted_rand_index(&p, &t)?;

    // overlap[i][j] between pred label i+1 and truth label j+1
    let mut overlap = vec![vec![0usize; g]; c];
    let mut pred_size = vec![0usize; c];
    let mut truth_size = vec![0usize; g];
    for (&x, &y) in p.iter().zip(&t) {
        truth_size[y as usize - 1] += 1;
        if x > 0 {
            overlap[x as usize - 1][y as usize - 1] += 1;
            pred_size[x as usize - 1] += 1;
        }
    }
    let mut mapping = vec![0u32; c];
    if c <= g {
        let dice = |i: usize, j: usize| {
            let s = pred_size[i] + truth_size[j];
            if s == 0 { 0.0 } else { 2.0 * overlap[i][j] as f64 / s as f64 }
        };
        let cost: Vec<Vec<f64>> =
            (0..g).map(|i| (0..g).map(|j| if i < c { -dice(i, j) } else { 0.0 }).collect()).collect();
        for (i, j) in hungarian(&cost).into_iter().enumerate().take(c) {
            mapping[i] = j as u32 + 1;
        }
    } else {
        for (i, row) in overlap.iter().enumerate() {
            if pred_size[i] > 0 {
                let best = (0..g).max_by_key(|&j| (row[j], std::cmp::Reverse(j))).unwrap();
                mapping[i] = best as u32 + 1;
            }
        }
    }
    let mut inter = vec![0usize; g];
    let mut merged = vec![0usize; g];
    for i in 0..c {
        if mapping[i] > 0 {
            let j = mapping[i] as usize - 1;
            inter[j] += overlap[i][j];
            merged[j] += pred_size[i];
        }
    }
    let dice: Vec<f64> = (0..g)
        .map(|j| {
            let s = merged[j] + truth_size[j];
            if s == 0 { 0.0 } else { 2.0 * inter[j] as f64 / s as f64 }
        })
        .collect();
    let mean_dice = dice.iter().sum::<f64>() / g as f64;
    Ok(Recovery { ari, dice, mean_dice, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.len()])
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        use rand::Rng;
        let mut rng = crate::util::rng(3);
        for n in 1..=6 {
            for _ in 0..20 {
                let cost: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..n).map(|_| rng.random_range(0..10) as f64).collect()).collect();
                let m = hungarian(&cost);
                let mut seen = m.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let total: f64 = m.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                assert_eq!(total, brute_force(&cost));
            }
        }
    }

    #[test]
    fn ari_known_value() {
        // contingency [[2,1],[0,3]]: index 1+3, rows 3+3, cols 1+6, 15 pairs
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 1, 1];
        let expected = (4.0 - 6.0 * 7.0 / 15.0) / (6.5 - 6.0 * 7.0 / 15.0);
        assert!((adjusted_rand_index(&a, &b).unwrap() - expected).abs() < 1e-12);
    }
}
