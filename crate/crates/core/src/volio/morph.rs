use std::collections::VecDeque;

use super::{Connectivity, Labelmap, Mask};
use crate::error::{Error, Result};

/// Binary dilation by `radius` unit steps of the given neighborhood.
pub fn dilate_mask(mask: &Mask, radius: usize, connectivity: Connectivity) -> Result<Mask> {
    if radius < 1 {
        return Err(Error::Parameter("dilation radius must be at least 1".into()));
    }
    let geom = &mask.geometry;
    let offsets = connectivity.offsets();
    let mut current = mask.data().to_vec();
    for _ in 0..radius {
        let mut next = current.clone();
        for idx in 0..current.len() {
            if current[idx] == 0 {
                continue;
            }
            let c = geom.coords(idx);
            for o in &offsets {
                let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
                if let Some(ni) = geom.checked_index(n) {
                    next[ni] = 1;
                }
            }
        }
        current = next;
    }
    Mask::new(geom.clone(), current)
}

/// Connected foreground components.
#[derive(Debug, Clone)]
pub struct Components {
    /// Component label per voxel; label `l` has size `sizes[l - 1]`.
    pub labels: Labelmap,
    /// Sizes in descending order.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn largest(&self) -> usize {
        self.sizes.first().copied().unwrap_or(0)
    }
}

/// Labels connected components; label 1 is the largest component.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Components {
    let geom = &mask.geometry;
    let offsets = connectivity.offsets();
    let mut raw = vec![0u32; geom.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();

    for seed in mask.foreground() {
        if raw[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        raw[seed] = label;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let c = geom.coords(idx);
            for o in &offsets {
                let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
                if let Some(ni) = geom.checked_index(n) {
                    if mask.is_set(ni) && raw[ni] == 0 {
                        raw[ni] = label;
                        queue.push_back(ni);
                    }
                }
            }
        }
        sizes.push(size);
    }

    // relabel by descending size, stable on discovery order
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
    let mut remap = vec![0u32; sizes.len() + 1];
    for (new, &old) in order.iter().enumerate() {
        remap[old + 1] = new as u32 + 1;
    }
    let data = raw.iter().map(|&l| remap[l as usize]).collect();
    let sorted = order.iter().map(|&o| sizes[o]).collect();
    Components {
        labels: Labelmap { geometry: geom.clone(), data },
        sizes: sorted,
    }
}
