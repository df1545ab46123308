use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::tissue::Tissue;

pub const MAX_CHANNELS: usize = 2;

/// Lattice geometry shared by volumes, label maps and bias fields.
/// Storage order is x-fastest, then y, then z; channels are interleaved
/// per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub channels: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize, channels: usize) -> Result<Dims, CoreError> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(CoreError::BadDims(format!("{nx}x{ny}x{nz} has an empty axis")));
        }
        if channels == 0 || channels > MAX_CHANNELS {
            return Err(CoreError::BadDims(format!(
                "{channels} channels (supported: 1 = single echo, 2 = double echo)"
            )));
        }
        // keep nx*ny*nz*channels comfortably inside usize/f64 territory
        let voxels = nx
            .checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| CoreError::BadDims(format!("{nx}x{ny}x{nz} overflows")))?;
        if voxels > (1 << 40) {
            return Err(CoreError::BadDims(format!("{nx}x{ny}x{nz} is implausibly large")));
        }
        Ok(Dims { nx, ny, nz, channels })
    }

    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn values(&self) -> usize {
        self.voxels() * self.channels
    }

    /// Flat index of (ix, iy, iz), x varying fastest.
    pub fn linear_index(&self, ix: usize, iy: usize, iz: usize) -> Result<usize, CoreError> {
        if ix >= self.nx || iy >= self.ny || iz >= self.nz {
            return Err(CoreError::OutOfBounds(ix, iy, iz, self.nx, self.ny, self.nz));
        }
        Ok(self.index_unchecked(ix, iy, iz))
    }

    #[inline]
    pub(crate) fn index_unchecked(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.nx * (iy + self.ny * iz)
    }

    /// Inverse of `linear_index`.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let ix = idx % self.nx;
        let rest = idx / self.nx;
        (ix, rest % self.ny, rest / self.ny)
    }

    /// First-order (face-adjacent) neighbors of a voxel; 6 in the interior,
    /// fewer on faces, edges and corners.
    #[inline]
    pub fn neighbors(&self, idx: usize) -> Neighbors {
        let (ix, iy, iz) = self.coords(idx);
        let mut buf = [0usize; 6];
        let mut n = 0;
        if ix > 0 {
            buf[n] = idx - 1;
            n += 1;
        }
        if ix + 1 < self.nx {
            buf[n] = idx + 1;
            n += 1;
        }
        if iy > 0 {
            buf[n] = idx - self.nx;
            n += 1;
        }
        if iy + 1 < self.ny {
            buf[n] = idx + self.nx;
            n += 1;
        }
        let plane = self.nx * self.ny;
        if iz > 0 {
            buf[n] = idx - plane;
            n += 1;
        }
        if iz + 1 < self.nz {
            buf[n] = idx + plane;
            n += 1;
        }
        Neighbors { buf, n, at: 0 }
    }

    /// Visits every unordered neighbor pair exactly once, as (low, high).
    pub fn for_each_edge(&self, mut f: impl FnMut(usize, usize)) {
        let plane = self.nx * self.ny;
        for iz in 0..self.nz {
            for iy in 0..self.ny {
                for ix in 0..self.nx {
                    let i = self.index_unchecked(ix, iy, iz);
                    if ix + 1 < self.nx {
                        f(i, i + 1);
                    }
                    if iy + 1 < self.ny {
                        f(i, i + self.nx);
                    }
                    if iz + 1 < self.nz {
                        f(i, i + plane);
                    }
                }
            }
        }
    }

    pub fn same_grid(&self, other: &Dims) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.nz == other.nz
    }
}

/// Fixed-capacity iterator over a voxel's face neighbors.
#[derive(Debug, Clone)]
pub struct Neighbors {
    buf: [usize; 6],
    n: usize,
    at: usize,
}

impl Neighbors {
    pub fn count(&self) -> usize {
        self.n
    }
}

impl Iterator for Neighbors {
    type Item = usize;
    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.at < self.n {
            let v = self.buf[self.at];
            self.at += 1;
            Some(v)
        } else {
            None
        }
    }
    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.n - self.at;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Neighbors {}

/// Multi-echo intensity volume. Values are stored interleaved:
/// `data[idx * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub voxel_mm: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: Dims) -> Volume {
        Volume { dims, voxel_mm: [1.0; 3], data: vec![0.0; dims.values()] }
    }

    pub fn from_data(dims: Dims, data: Vec<f64>) -> Result<Volume, CoreError> {
        if data.len() != dims.values() {
            return Err(CoreError::BadDims(format!(
                "data length {} does not match {} voxels x {} channels",
                data.len(),
                dims.voxels(),
                dims.channels
            )));
        }
        Ok(Volume { dims, voxel_mm: [1.0; 3], data })
    }

    #[inline]
    pub fn get(&self, idx: usize, channel: usize) -> f64 {
        self.data[idx * self.dims.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, channel: usize, v: f64) {
        self.data[idx * self.dims.channels + channel] = v;
    }

    /// All channels of one voxel, zero-padded to `MAX_CHANNELS`.
    #[inline]
    pub fn sample(&self, idx: usize) -> [f64; MAX_CHANNELS] {
        let mut out = [0.0; MAX_CHANNELS];
        let base = idx * self.dims.channels;
        for c in 0..self.dims.channels {
            out[c] = self.data[base + c];
        }
        out
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// New single-channel volume holding one echo of this one.
    pub fn select_channel(&self, channel: usize) -> Result<Volume, CoreError> {
        if channel >= self.dims.channels {
            return Err(CoreError::BadParameter(format!(
                "channel {channel} of a {}-channel volume",
                self.dims.channels
            )));
        }
        let dims = Dims { channels: 1, ..self.dims };
        let data = (0..self.dims.voxels()).map(|i| self.get(i, channel)).collect();
        let mut v = Volume::from_data(dims, data).expect("length matches by construction");
        v.voxel_mm = self.voxel_mm;
        Ok(v)
    }
}

/// Per-voxel tissue labels on the same lattice as a `Volume`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: Dims,
    pub voxel_mm: [f64; 3],
    labels: Vec<Tissue>,
}

impl LabelMap {
    pub fn filled(dims: Dims, t: Tissue) -> LabelMap {
        LabelMap { dims, voxel_mm: [1.0; 3], labels: vec![t; dims.voxels()] }
    }

    pub fn from_labels(dims: Dims, labels: Vec<Tissue>) -> Result<LabelMap, CoreError> {
        if labels.len() != dims.voxels() {
            return Err(CoreError::BadDims(format!(
                "label count {} does not match {} voxels",
                labels.len(),
                dims.voxels()
            )));
        }
        Ok(LabelMap { dims, voxel_mm: [1.0; 3], labels })
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Tissue {
        self.labels[idx]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, t: Tissue) {
        self.labels[idx] = t;
    }

    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Tissue] {
        &mut self.labels
    }

    pub fn count(&self, t: Tissue) -> usize {
        self.labels.iter().filter(|&&l| l == t).count()
    }

    /// Tissues that actually occur, in label-code order.
    pub fn present_tissues(&self) -> Vec<Tissue> {
        let mut seen = [false; 6];
        for &l in &self.labels {
            seen[l.slot()] = true;
        }
        (0..6).filter(|&s| seen[s]).map(Tissue::from_slot).collect()
    }
}

/// Additive log-domain bias field: the multiplicative shading factor on
/// channel c of voxel i is `exp(get(i)[c])`. A field of zeros is neutral.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub dims: Dims,
    values: Vec<f64>,
}

impl BiasField {
    pub fn neutral(dims: Dims) -> BiasField {
        BiasField { dims, values: vec![0.0; dims.values()] }
    }

    pub fn from_values(dims: Dims, values: Vec<f64>) -> Result<BiasField, CoreError> {
        if values.len() != dims.values() {
            return Err(CoreError::BadDims(format!(
                "bias value count {} does not match {} voxels x {} channels",
                values.len(),
                dims.voxels(),
                dims.channels
            )));
        }
        Ok(BiasField { dims, values })
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [f64; MAX_CHANNELS] {
        let mut out = [0.0; MAX_CHANNELS];
        let base = idx * self.dims.channels;
        for c in 0..self.dims.channels {
            out[c] = self.values[base + c];
        }
        out
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: [f64; MAX_CHANNELS]) {
        let base = idx * self.dims.channels;
        for c in 0..self.dims.channels {
            self.values[base + c] = v[c];
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_index_x_fastest() {
        let d = Dims::new(4, 5, 6, 1).unwrap();
        assert_eq!(d.linear_index(1, 2, 3).unwrap(), 69, "x-fastest flat index of (1,2,3)");
        assert_eq!(d.coords(69), (1, 2, 3));
        assert_eq!(d.linear_index(0, 0, 0).unwrap(), 0);
        assert!(d.linear_index(4, 0, 0).is_err(), "x out of range must be a bounds error");
    }

    #[test]
    fn empty_and_overwide_dims_rejected() {
        assert!(Dims::new(0, 5, 6, 1).is_err());
        assert!(Dims::new(4, 5, 6, 0).is_err());
        assert!(Dims::new(4, 5, 6, 3).is_err(), "only 1- or 2-echo volumes are supported");
    }

    #[test]
    fn interior_voxel_has_six_neighbors_boundary_fewer() {
        let d = Dims::new(3, 3, 3, 1).unwrap();
        let centre = d.linear_index(1, 1, 1).unwrap();
        assert_eq!(d.neighbors(centre).count(), 6);
        let corner = d.linear_index(0, 0, 0).unwrap();
        assert_eq!(d.neighbors(corner).count(), 3);
        let face = d.linear_index(1, 1, 0).unwrap();
        assert_eq!(d.neighbors(face).count(), 5);
    }

    #[test]
    fn edge_walk_matches_neighbor_counts() {
        // every edge appears once, so 2 * edges == sum of neighbor degrees
        let d = Dims::new(4, 3, 2, 1).unwrap();
        let mut edges = 0usize;
        d.for_each_edge(|a, b| {
            assert!(a < b, "edges are emitted as (low, high)");
            edges += 1;
        });
        let degree_sum: usize = (0..d.voxels()).map(|i| d.neighbors(i).count()).sum();
        assert_eq!(edges * 2, degree_sum);
        // 3*3*2 + 4*2*2 + 4*3*1 horizontal/vertical/through-plane edges
        assert_eq!(edges, 18 + 16 + 12);
    }

    #[test]
    fn channel_selection_keeps_grid() {
        let d = Dims::new(2, 2, 1, 2).unwrap();
        let mut v = Volume::zeros(d);
        for i in 0..4 {
            v.set(i, 0, i as f64);
            v.set(i, 1, 10.0 + i as f64);
        }
        let pd = v.select_channel(0).unwrap();
        assert_eq!(pd.dims.channels, 1);
        assert_eq!(pd.get(3, 0), 3.0);
        let t2 = v.select_channel(1).unwrap();
        assert_eq!(t2.get(0, 0), 10.0);
        assert!(v.select_channel(2).is_err());
    }

    proptest! {
        #[test]
        fn index_coords_roundtrip(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed in 0usize..1000) {
            let d = Dims::new(nx, ny, nz, 1).unwrap();
            let idx = seed % d.voxels();
            let (ix, iy, iz) = d.coords(idx);
            prop_assert_eq!(d.linear_index(ix, iy, iz).unwrap(), idx);
        }

        #[test]
        fn neighbor_relation_is_symmetric(nx in 1usize..7, ny in 1usize..7, nz in 1usize..7) {
            let d = Dims::new(nx, ny, nz, 1).unwrap();
            for i in 0..d.voxels() {
                for j in d.neighbors(i) {
                    prop_assert!(d.neighbors(j).any(|k| k == i),
                        "voxel {} lists {} but not vice versa", i, j);
                }
            }
        }
    }
}
