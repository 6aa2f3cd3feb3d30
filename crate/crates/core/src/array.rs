//! Dense row-major 2D and 3D arrays plus the slice/volume sample records.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Row-major `h × w` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2<T> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid2<T> {
    pub fn filled(h: usize, w: usize, v: T) -> Self {
        Grid2 {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    /// # Panics
    /// If `data.len() != h * w`.
    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), h * w, "grid data length");
        Grid2 { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.w + x] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid2<U> {
        Grid2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_rows(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.h {
            let src = &self.data[(self.h - 1 - y) * self.w..(self.h - y) * self.w];
            out.data[y * self.w..(y + 1) * self.w].copy_from_slice(src);
        }
        out
    }

    pub fn flip_cols(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w) {
            row.reverse();
        }
        out
    }

    /// Counter-clockwise rotation by `k · 90°`.
    pub fn rot90(&self, k: usize) -> Self {
        match k % 4 {
            0 => self.clone(),
            1 => {
                // out[y][x] = in[x][w-1-y], out is w × h
                let mut data = Vec::with_capacity(self.data.len());
                for y in 0..self.w {
                    for x in 0..self.h {
                        data.push(self.at(x, self.w - 1 - y));
                    }
                }
                Grid2::from_vec(self.w, self.h, data)
            }
            2 => {
                let mut data = self.data.clone();
                data.reverse();
                Grid2::from_vec(self.h, self.w, data)
            }
            _ => self.rot90(1).rot90(2),
        }
    }
}

/// Row-major `d × h × w` array (slice-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Volume<T> {
    pub fn filled(d: usize, h: usize, w: usize, v: T) -> Self {
        Volume {
            d,
            h,
            w,
            data: vec![v; d * h * w],
        }
    }

    /// # Panics
    /// If `data.len() != d * h * w`.
    pub fn from_vec(d: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), d * h * w, "volume data length");
        Volume { d, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.data[(z * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        self.data[(z * self.h + y) * self.w + x] = v;
    }

    pub fn slice(&self, z: usize) -> Grid2<T> {
        let n = self.h * self.w;
        Grid2::from_vec(self.h, self.w, self.data[z * n..(z + 1) * n].to_vec())
    }

    /// Stacks equally shaped slices in order.
    ///
    /// Returns `None` for an empty list or mismatched slice shapes.
    pub fn stack(slices: &[Grid2<T>]) -> Option<Self> {
        let first = slices.first()?;
        let (h, w) = first.shape();
        if slices.iter().any(|s| s.shape() != (h, w)) {
            return None;
        }
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            data.extend_from_slice(&s.data);
        }
        Some(Volume::from_vec(slices.len(), h, w, data))
    }
}

/// One training slice: normalized intensities and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Grid2<f32>,
    pub label: Grid2<u8>,
    pub case_id: String,
    pub slice_index: usize,
}

/// One evaluation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub image: Volume<f32>,
    pub label: Volume<u8>,
    pub case_id: String,
    /// Voxel spacing `(sx, sy, sz)` when the source records it.
    pub spacing: Option<[f32; 3]>,
}

impl VolumeSample {
    /// Splits a volume into per-slice training samples at native resolution.
    pub fn to_slices(&self) -> Vec<SliceSample> {
        (0..self.image.d)
            .map(|z| SliceSample {
                image: self.image.slice(z),
                label: self.label.slice(z),
                case_id: self.case_id.clone(),
                slice_index: z,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g() -> Grid2<u8> {
        Grid2::from_vec(2, 3, vec![1, 2, 3, 4, 5, 6])
    }

    #[test]
    fn rot90_matches_numpy() {
        // np.rot90([[1,2,3],[4,5,6]]) == [[3,6],[2,5],[1,4]]
        assert_eq!(g().rot90(1).data, vec![3, 6, 2, 5, 1, 4]);
        assert_eq!(g().rot90(2).data, vec![6, 5, 4, 3, 2, 1]);
        assert_eq!(g().rot90(3).data, vec![4, 1, 5, 2, 6, 3]);
        assert_eq!(g().rot90(4), g());
    }

    #[test]
    fn flips() {
        assert_eq!(g().flip_rows().data, vec![4, 5, 6, 1, 2, 3]);
        assert_eq!(g().flip_cols().data, vec![3, 2, 1, 6, 5, 4]);
    }

    #[test]
    fn stack_and_slice() {
        let v = Volume::stack(&[g(), g().flip_cols()]).unwrap();
        assert_eq!(v.shape(), (2, 2, 3));
        assert_eq!(v.slice(1), g().flip_cols());
        assert!(Volume::<u8>::stack(&[]).is_none());
        assert!(Volume::stack(&[g(), g().rot90(1)]).is_none());
    }
}
