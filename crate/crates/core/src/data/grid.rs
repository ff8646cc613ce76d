//! Dense 3D grids: intensity volumes and integer label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class indices of a [`LabelMap`].
pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const PORTAL_VEIN: u8 = 2;
pub const HEPATIC_VEIN: u8 = 3;
pub const TUMOR: u8 = 4;
pub const N_CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["background", "liver", "portal_vein", "hepatic_vein", "tumor"];

/// Row-major `(H, W, D)` grid, `D` fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "grid shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let at = self.index(i, j, k);
        self.data[at] = v;
    }

    /// Extracts the `size` window centred on `center` (window start is
    /// `center - size / 2` per axis). The window must lie inside the grid.
    pub fn crop(&self, size: [usize; 3], center: [usize; 3]) -> Result<Self> {
        let mut start = [0usize; 3];
        for a in 0..3 {
            let s = center[a] as isize - (size[a] / 2) as isize;
            if size[a] == 0 || s < 0 || s as usize + size[a] > self.shape[a] {
                return Err(Error::Shape(format!(
                    "crop window {size:?} at centre {center:?} exceeds grid {:?}",
                    self.shape
                )));
            }
            start[a] = s as usize;
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for i in 0..size[0] {
            for j in 0..size[1] {
                let row = self.index(start[0] + i, start[1] + j, start[2]);
                data.extend_from_slice(&self.data[row..row + size[2]]);
            }
        }
        Ok(Self { shape: size, data })
    }
}

/// Clamps `center` so that a `size` window around it fits inside `shape`.
pub fn clamp_center(shape: [usize; 3], size: [usize; 3], center: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if size[a] > shape[a] {
            return Err(Error::Shape(format!("ROI {size:?} larger than grid {shape:?}")));
        }
        let lo = size[a] / 2;
        let hi = shape[a] - (size[a] - size[a] / 2);
        out[a] = center[a].clamp(lo, hi);
    }
    Ok(out)
}

/// Intensity volume with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume(Grid3<f32>);

impl Volume {
    /// Wraps a grid after checking the `[0, 1]` range.
    pub fn new(grid: Grid3<f32>) -> Result<Self> {
        if let Some(bad) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("volume value {bad} outside [0, 1]")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid3<f32> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<f32> {
        self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn crop_roi(&self, size: [usize; 3], center: [usize; 3]) -> Result<Self> {
        Ok(Self(self.0.crop(size, center)?))
    }
}

/// Per-voxel class indices in `0..N_CLASSES`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap(Grid3<u8>);

impl LabelMap {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        if let Some(bad) = grid.data().iter().find(|&&v| v as usize >= N_CLASSES) {
            return Err(Error::Input(format!("label class {bad} out of range 0..{N_CLASSES}")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    pub fn data(&self) -> &[u8] {
        self.0.data()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data().iter().filter(|&&v| v == class).count()
    }

    /// Sorted distinct classes present.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; N_CLASSES];
        for &v in self.data() {
            seen[v as usize] = true;
        }
        (0..N_CLASSES as u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Centroid (rounded) of all non-background voxels; grid centre if empty.
    pub fn foreground_centroid(&self) -> [usize; 3] {
        let [h, w, d] = self.shape();
        let mut sum = [0f64; 3];
        let mut n = 0usize;
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    if self.0.get(i, j, k) != BACKGROUND {
                        sum[0] += i as f64;
                        sum[1] += j as f64;
                        sum[2] += k as f64;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            return [h / 2, w / 2, d / 2];
        }
        sum.map(|s| (s / n as f64).round() as usize)
    }

    pub fn crop_roi(&self, size: [usize; 3], center: [usize; 3]) -> Result<Self> {
        Ok(Self(self.0.crop(size, center)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_crop_at_centre_is_identity() {
        let g = Grid3::new([4, 6, 2], (0..48).collect::<Vec<u32>>()).unwrap();
        assert_eq!(g.crop([4, 6, 2], [2, 3, 1]).unwrap(), g);
    }

    #[test]
    fn centred_crop_offsets_by_half_size() {
        let n = 64usize;
        let g = Grid3::new([n, n, n], (0..n * n * n).map(|i| i as u32).collect()).unwrap();
        let c = g.crop([32, 32, 32], [32, 32, 32]).unwrap();
        assert_eq!(c.shape(), [32, 32, 32]);
        assert_eq!(c.get(0, 0, 0), g.get(16, 16, 16));
        assert_eq!(c.get(31, 5, 7), g.get(47, 21, 23));
    }

    #[test]
    fn crop_out_of_bounds_is_an_error() {
        let g = Grid3::filled([8, 8, 8], 0u8);
        assert!(g.crop([8, 8, 8], [3, 4, 4]).is_err());
        assert!(g.crop([9, 8, 8], [4, 4, 4]).is_err());
        assert!(g.crop([2, 2, 2], [8, 8, 8]).is_err());
        assert!(g.crop([2, 2, 2], [7, 7, 7]).is_ok());
    }

    #[test]
    fn label_crop_preserves_classes() {
        let data: Vec<u8> = (0..512).map(|i| (i % 5) as u8).collect();
        let l = LabelMap::new(Grid3::new([8, 8, 8], data).unwrap()).unwrap();
        let c = l.crop_roi([4, 4, 4], [4, 4, 4]).unwrap();
        assert!(c.classes().iter().all(|&v| v < 5));
        assert!(LabelMap::new(Grid3::filled([2, 2, 2], 5)).is_err());
    }

    #[test]
    fn clamped_centre_keeps_window_inside() {
        let c = clamp_center([40, 40, 20], [32, 32, 16], [2, 39, 10]).unwrap();
        assert_eq!(c, [16, 24, 10]);
        let g = Grid3::filled([40, 40, 20], 1u8);
        assert!(g.crop([32, 32, 16], c).is_ok());
    }
}
