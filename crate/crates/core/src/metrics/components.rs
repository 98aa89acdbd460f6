//! 3D connected-component labeling (two-pass union-find).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Faces, edges and corners.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets that precede the centre voxel in scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if (dz, dy, dx) >= (0, 0, 0) {
                        continue;
                    }
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    if self == Connectivity::Six && manhattan != 1 {
                        continue;
                    }
                    out.push([dz, dy, dx]);
                }
            }
        }
        out
    }

    /// All neighbour offsets.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let back = self.backward_offsets();
        back.iter()
            .copied()
            .chain(back.iter().map(|o| o.map(|v| -v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Per-voxel label: 0 for background, `1..=n` for regions.
    pub labels: Vec<u32>,
    /// Linear voxel indices of region `j + 1`, ascending.
    pub regions: Vec<Vec<usize>>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.regions.len()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Labels are assigned in scan order of each region's first voxel.
pub fn connected_components_3d(mask: &[bool], dims: [usize; 3], connectivity: Connectivity) -> Components {
    let [d, h, w] = dims;
    debug_assert_eq!(mask.len(), d * h * w);
    let offsets = connectivity.backward_offsets();
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                for o in &offsets {
                    let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = (nz as usize * h + ny as usize) * w + nx as usize;
                    if mask[j] {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi] = lo;
                        }
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; mask.len()];
    let mut root_label = vec![0u32; mask.len()];
    let mut regions: Vec<Vec<usize>> = Vec::new();
    for i in 0..mask.len() {
        if !mask[i] {
            continue;
        }
        let r = find(&mut parent, i);
        if root_label[r] == 0 {
            regions.push(Vec::new());
            root_label[r] = regions.len() as u32;
        }
        let l = root_label[r];
        labels[i] = l;
        regions[l as usize - 1].push(i);
    }
    Components { labels, regions }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(dims: [usize; 3], pts: &[[usize; 3]]) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for p in pts {
            m[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = true;
        }
        m
    }

    #[test]
    fn plus_sign_is_one_component() {
        let dims = [3, 3, 3];
        let pts = [[1, 1, 1], [0, 1, 1], [2, 1, 1], [1, 0, 1], [1, 2, 1], [1, 1, 0], [1, 1, 2]];
        let m = mask_of(dims, &pts);
        for c in [Connectivity::Six, Connectivity::TwentySix] {
            let cc = connected_components_3d(&m, dims, c);
            assert_eq!(cc.count(), 1);
            assert_eq!(cc.regions[0].len(), 7);
        }
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let dims = [2, 2, 2];
        let m = mask_of(dims, &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components_3d(&m, dims, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components_3d(&m, dims, Connectivity::Six).count(), 2);
    }

    #[test]
    fn scan_order_labels() {
        let dims = [1, 1, 5];
        let m = mask_of(dims, &[[0, 0, 0], [0, 0, 2], [0, 0, 3]]);
        let cc = connected_components_3d(&m, dims, Connectivity::Six);
        assert_eq!(cc.labels, vec![1, 0, 2, 2, 0]);
        assert_eq!(cc.regions, vec![vec![0], vec![2, 3]]);
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert!(Connectivity::try_from(8).is_err());
    }
}
