//! Separable resampling kernels.
//!
//! All coordinate maps use the half-pixel convention with corners not
//! aligned: output index `i` samples input coordinate
//! `(i + 0.5) · in/out − 0.5`. Weight matrices are dense `out × in`,
//! row-major, so a 2D resize is `A_h · X · A_wᵀ`. The tensor crate applies
//! the same matrices through matmul, which keeps resizes differentiable.

use alloc::vec;
use alloc::vec::Vec;

use crate::array::Grid2;

/// Bicubic convolution coefficient.
pub const CUBIC_A: f64 = -0.75;

fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

/// Linear interpolation weights (`out_len × in_len`).
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == 0 {
        return m;
    }
    for i in 0..out_len {
        let src = source_coord(i, in_len, out_len).max(0.0);
        let i0 = (libm::floor(src) as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let l1 = src - i0 as f64;
        let l1 = if i0 == in_len - 1 { 0.0 } else { l1 };
        m[i * in_len + i0] += 1.0 - l1;
        m[i * in_len + i1] += l1;
    }
    m
}

fn cubic_near(x: f64) -> f64 {
    ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
}

fn cubic_far(x: f64) -> f64 {
    ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
}

/// Keys cubic-convolution weights (`out_len × in_len`) with border replication.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == 0 {
        return m;
    }
    for i in 0..out_len {
        let src = source_coord(i, in_len, out_len);
        let base = libm::floor(src);
        let t = src - base;
        let coeffs = [
            cubic_far(t + 1.0),
            cubic_near(t),
            cubic_near(1.0 - t),
            cubic_far(2.0 - t),
        ];
        for (k, c) in coeffs.iter().enumerate() {
            let idx = (base as i64 - 1 + k as i64).clamp(0, in_len as i64 - 1) as usize;
            m[i * in_len + idx] += c;
        }
    }
    m
}

/// Nearest-neighbour source index for each output position.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| (libm::floor(i as f64 * scale) as usize).min(in_len.saturating_sub(1)))
        .collect()
}

fn separable_apply(
    src: &[f32],
    (h, w): (usize, usize),
    channels: usize,
    mh: &[f64],
    mw: &[f64],
    (oh, ow): (usize, usize),
) -> Vec<f32> {
    // channel-last layout: src[(y * w + x) * channels + c]
    let mut tmp = vec![0.0f64; h * ow * channels];
    for y in 0..h {
        for ox in 0..ow {
            let row = &mw[ox * w..(ox + 1) * w];
            for (x, &wt) in row.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let s = &src[(y * w + x) * channels..(y * w + x + 1) * channels];
                let d = &mut tmp[(y * ow + ox) * channels..(y * ow + ox + 1) * channels];
                for (dv, &sv) in d.iter_mut().zip(s) {
                    *dv += wt * sv as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f64; oh * ow * channels];
    for oy in 0..oh {
        let row = &mh[oy * h..(oy + 1) * h];
        for (y, &wt) in row.iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let s = &tmp[y * ow * channels..(y + 1) * ow * channels];
            let d = &mut out[oy * ow * channels..(oy + 1) * ow * channels];
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv += wt * sv;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Bicubic resize of a channel-last table laid out over an `(h, w)` grid,
/// e.g. a positional-embedding table with one row per grid cell.
///
/// Returns the input unchanged when the grids match.
pub fn resize_table_bicubic(
    table: &[f32],
    grid: (usize, usize),
    dim: usize,
    target: (usize, usize),
) -> Vec<f32> {
    assert_eq!(table.len(), grid.0 * grid.1 * dim, "table size");
    if grid == target {
        return table.to_vec();
    }
    let mh = bicubic_matrix(grid.0, target.0);
    let mw = bicubic_matrix(grid.1, target.1);
    separable_apply(table, grid, dim, &mh, &mw, target)
}

pub fn resize_bilinear(img: &Grid2<f32>, oh: usize, ow: usize) -> Grid2<f32> {
    if img.shape() == (oh, ow) {
        return img.clone();
    }
    let mh = bilinear_matrix(img.h, oh);
    let mw = bilinear_matrix(img.w, ow);
    Grid2::from_vec(oh, ow, separable_apply(&img.data, img.shape(), 1, &mh, &mw, (oh, ow)))
}

pub fn resize_nearest<T: Copy>(img: &Grid2<T>, oh: usize, ow: usize) -> Grid2<T> {
    if img.shape() == (oh, ow) {
        return img.clone();
    }
    let ys = nearest_indices(img.h, oh);
    let xs = nearest_indices(img.w, ow);
    let mut data = Vec::with_capacity(oh * ow);
    for &y in &ys {
        for &x in &xs {
            data.push(img.at(y, x));
        }
    }
    Grid2::from_vec(oh, ow, data)
}

/// Inverse map of a rotation by `angle_deg` (counter-clockwise in image
/// coordinates) about the array centre: output `(y, x)` → input `(sy, sx)`.
fn rotation_source(h: usize, w: usize, angle_deg: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let theta = angle_deg.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    move |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    }
}

/// `Some(k)` when the angle is an exact multiple `k` of 180°.
fn half_turns(angle_deg: f64) -> Option<usize> {
    let r = libm::fmod(angle_deg, 360.0);
    let r = if r < 0.0 { r + 360.0 } else { r };
    if r == 0.0 {
        Some(0)
    } else if r == 180.0 {
        Some(1)
    } else {
        None
    }
}

/// Bilinear rotation; samples outside the input read as 0.
pub fn rotate_bilinear(img: &Grid2<f32>, angle_deg: f64) -> Grid2<f32> {
    if let Some(k) = half_turns(angle_deg) {
        return img.rot90(2 * k);
    }
    let src = rotation_source(img.h, img.w, angle_deg);
    let mut out = Grid2::filled(img.h, img.w, 0.0f32);
    let fetch = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= img.h as i64 || x >= img.w as i64 {
            0.0
        } else {
            img.at(y as usize, x as usize) as f64
        }
    };
    for y in 0..img.h {
        for x in 0..img.w {
            let (sy, sx) = src(y, x);
            let (y0, x0) = (libm::floor(sy), libm::floor(sx));
            let (ty, tx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v = (1.0 - ty) * ((1.0 - tx) * fetch(y0, x0) + tx * fetch(y0, x0 + 1))
                + ty * ((1.0 - tx) * fetch(y0 + 1, x0) + tx * fetch(y0 + 1, x0 + 1));
            out.set(y, x, v as f32);
        }
    }
    out
}

/// Nearest-neighbour rotation; samples outside the input read as `fill`.
pub fn rotate_nearest<T: Copy>(img: &Grid2<T>, angle_deg: f64, fill: T) -> Grid2<T> {
    if let Some(k) = half_turns(angle_deg) {
        return img.rot90(2 * k);
    }
    let src = rotation_source(img.h, img.w, angle_deg);
    let mut out = Grid2::filled(img.h, img.w, fill);
    for y in 0..img.h {
        for x in 0..img.w {
            let (sy, sx) = src(y, x);
            let (ry, rx) = (libm::round(sy), libm::round(sx));
            if ry >= 0.0 && rx >= 0.0 && (ry as usize) < img.h && (rx as usize) < img.w {
                out.set(y, x, img.at(ry as usize, rx as usize));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_sums(m: &[f64], in_len: usize) -> Vec<f64> {
        m.chunks(in_len).map(|r| r.iter().sum()).collect()
    }

    #[test]
    fn matrices_are_partitions_of_unity() {
        for (i, o) in [(16, 22), (22, 16), (5, 5), (1, 4), (37, 16)] {
            for s in row_sums(&bilinear_matrix(i, o), i) {
                assert!((s - 1.0).abs() < 1e-12);
            }
            for s in row_sums(&bicubic_matrix(i, o), i) {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        for m in [bilinear_matrix(6, 6), bicubic_matrix(6, 6)] {
            for i in 0..6 {
                for j in 0..6 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((m[i * 6 + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_2x_upsample_matches_torch() {
        // torch.nn.functional.interpolate([0,1,2,3], size=8, mode="linear")
        let m = bilinear_matrix(4, 8);
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = m
            .chunks(4)
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{y:?}");
        }
    }

    #[test]
    fn table_identity_and_constants() {
        let table: Vec<f32> = (0..16 * 16 * 3).map(|i| i as f32 * 0.01).collect();
        assert_eq!(resize_table_bicubic(&table, (16, 16), 3, (16, 16)), table);
        let out = resize_table_bicubic(&table, (16, 16), 3, (22, 22));
        assert_eq!(out.len(), 484 * 3);
        let constant = vec![0.75f32; 16 * 16 * 2];
        for v in resize_table_bicubic(&constant, (16, 16), 2, (22, 22)) {
            assert!((v - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn nearest_closure_and_identity() {
        let g = Grid2::from_vec(2, 2, vec![0u8, 3, 5, 7]);
        let up = resize_nearest(&g, 4, 4);
        assert_eq!(up.data, vec![0, 0, 3, 3, 0, 0, 3, 3, 5, 5, 7, 7, 5, 5, 7, 7]);
        assert_eq!(resize_nearest(&up, 2, 2), g);
        assert_eq!(resize_nearest(&g, 2, 2), g);
    }

    #[test]
    fn rotation_by_zero_and_half_turn() {
        let g = Grid2::from_vec(3, 4, (0..12).map(|v| v as f32).collect());
        assert_eq!(rotate_bilinear(&g, 0.0), g);
        assert_eq!(rotate_bilinear(&g, 180.0), g.rot90(2));
        let near_half = rotate_bilinear(&g, 179.999);
        for (a, b) in near_half.data.iter().zip(g.rot90(2).data.iter()) {
            assert!((a - b).abs() < 1e-2);
        }
        let l = g.map(|v| v as u8);
        assert_eq!(rotate_nearest(&l, 180.0, 0), l.rot90(2));
    }
}
