//! Partition of the myocardium mask into spatially connected clusters:
//! k-means on voxel positions, then a repair pass that moves stray
//! fragments into a touching cluster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::io::Volume;

pub const CLUSTERS: usize = 500;
const MAX_LLOYD: usize = 100;
const MAX_REPAIR_ROUNDS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Centroid in mm, `[z, y, x]`.
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MyoClusterSet {
    pub extents: [usize; 3],
    pub clusters: Vec<Cluster>,
}

impl MyoClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

fn coords(i: usize, e: [usize; 3]) -> [usize; 3] {
    [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]]
}

fn neighbours(i: usize, e: [usize; 3]) -> impl Iterator<Item = usize> {
    let c = coords(i, e);
    (0..27).filter(|&k| k != 13).filter_map(move |k| {
        let d = [k / 9, (k / 3) % 3, k % 3];
        let mut n = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + d[a] as isize - 1;
            if v < 0 || v >= e[a] as isize {
                return None;
            }
            n[a] = v as usize;
        }
        Some((n[0] * e[1] + n[1]) * e[2] + n[2])
    })
}

/// Components of `voxels` under 26-connectivity, each sorted ascending.
pub fn components(voxels: &[usize], e: [usize; 3]) -> Vec<Vec<usize>> {
    use std::collections::HashSet;
    let members: HashSet<usize> = voxels.iter().copied().collect();
    let mut seen = HashSet::with_capacity(voxels.len());
    let mut out = Vec::new();
    for &start in voxels {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for n in neighbours(v, e) {
                if members.contains(&n) && seen.insert(n) {
                    comp.push(n);
                    stack.push(n);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn is_connected(voxels: &[usize], e: [usize; 3]) -> bool {
    !voxels.is_empty() && components(voxels, e).len() == 1
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn centroid(voxels: &[usize], pos: impl Fn(usize) -> [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for &v in voxels {
        let p = pos(v);
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|x| x / voxels.len().max(1) as f64)
}

/// Lloyd iterations from a k-means++ start. Returns one label per point.
fn kmeans(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut centres = Vec::with_capacity(k);
    centres.push(points[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if t < w {
                        break;
                    }
                    t -= w;
                }
            }
            pick.expect("positive total")
        } else {
            rng.gen_range(0..n)
        };
        centres.push(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[next]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, centre) in centres.iter().enumerate() {
                let d = dist2(p, centre);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for a in 0..3 {
                sums[l][a] += p[a];
            }
        }
        // an empty cluster takes over the point farthest from its centre
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        dist2(&points[a], &centres[labels[a]])
                            .total_cmp(&dist2(&points[b], &centres[labels[b]]))
                    })
                    .expect("n >= k");
                let old = labels[far];
                counts[old] -= 1;
                for a in 0..3 {
                    sums[old][a] -= points[far][a];
                }
                labels[far] = c;
                counts[c] = 1;
                sums[c] = points[far];
                changed = true;
            }
        }
        for c in 0..k {
            centres[c] = sums[c].map(|s| s / counts[c] as f64);
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Splits the nonzero voxels of `mask` into [`CLUSTERS`] connected clusters.
pub fn cluster_myocardium(mask: &Volume, seed: u64) -> Result<MyoClusterSet> {
    cluster_mask(mask, CLUSTERS, seed)
}

pub fn cluster_mask(mask: &Volume, k: usize, seed: u64) -> Result<MyoClusterSet> {
    let e: [usize; 3] = match mask.extents.as_slice() {
        &[a, b, c] => [a, b, c],
        other => return Err(invalid(format!("mask must be 3-D, got extents {other:?}"))),
    };
    let sp = [mask.spacing[0], mask.spacing[1], mask.spacing[2]];
    let pos = |i: usize| {
        let c = coords(i, e);
        [c[0] as f64 * sp[0], c[1] as f64 * sp[1], c[2] as f64 * sp[2]]
    };
    let voxels: Vec<usize> = (0..mask.len()).filter(|&i| mask.data[i] > 0.5).collect();
    if voxels.len() < k {
        return Err(invalid(format!(
            "mask has {} voxels, fewer than the {k} clusters required",
            voxels.len()
        )));
    }
    let points: Vec<[f64; 3]> = voxels.iter().map(|&v| pos(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = kmeans(&points, k, &mut rng);

    let mut label_of = vec![usize::MAX; mask.len()];
    for (&v, &l) in voxels.iter().zip(&labels) {
        label_of[v] = l;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (&v, &l) in voxels.iter().zip(&labels) {
        members[l].push(v);
    }

    for _ in 0..MAX_REPAIR_ROUNDS {
        let mut changed = false;
        for c in 0..k {
            let mut comps = components(&members[c], e);
            if comps.len() < 2 {
                continue;
            }
            // keep the largest piece (lowest voxel index breaks ties)
            comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
            for frag in comps.into_iter().skip(1) {
                let fc = centroid(&frag, pos);
                let mut best: Option<(f64, usize)> = None;
                for &v in &frag {
                    for n in neighbours(v, e) {
                        let l = label_of[n];
                        if l == usize::MAX || l == c {
                            continue;
                        }
                        let d = dist2(&fc, &centroid(&members[l], pos));
                        if best.map_or(true, |(bd, bl)| d < bd || (d == bd && l < bl)) {
                            best = Some((d, l));
                        }
                    }
                }
                if let Some((_, target)) = best {
                    for &v in &frag {
                        label_of[v] = target;
                    }
                    members[c].retain(|v| frag.binary_search(v).is_err());
                    members[target].extend_from_slice(&frag);
                    members[target].sort_unstable();
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let clusters: Vec<Cluster> = members
        .into_iter()
        .map(|voxels| Cluster {
            centroid: centroid(&voxels, pos),
            voxels,
        })
        .collect();
    if let Some(i) = clusters.iter().position(|c| !is_connected(&c.voxels, e)) {
        return Err(invalid(format!(
            "cluster {i} could not be made connected; is the mask one connected region?"
        )));
    }
    Ok(MyoClusterSet { extents: e, clusters })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbourhood_has_26_voxels_inside() {
        assert_eq!(neighbours(13, [3, 3, 3]).count(), 26);
        assert_eq!(neighbours(0, [3, 3, 3]).count(), 7);
    }

    #[test]
    fn too_small_mask_rejected() {
        let mut m = Volume::zeros(&[1, 10, 10], &[1.0; 3]);
        m.data.fill(1.0);
        assert!(cluster_myocardium(&m, 0).is_err());
    }
}
