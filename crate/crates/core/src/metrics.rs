//! Overlap and boundary-distance metrics on integer label maps.
//!
//! Hausdorff distances are computed between surface voxel sets. A surface
//! voxel is a foreground voxel with at least one face neighbour outside the
//! mask or outside the array (binary erosion with a cross structuring
//! element and a zero border). Distances come from an exact separable
//! squared Euclidean distance transform, so cost is linear in the volume
//! size rather than quadratic in the surface sizes.

use alloc::vec;
use alloc::vec::Vec;

/// Shape of a 2D or 3D label map; 2D maps are stored with `dims[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskShape {
    /// `[d, h, w]`.
    pub dims: [usize; 3],
    pub ndim: usize,
}

impl MaskShape {
    pub fn d2(h: usize, w: usize) -> Self {
        MaskShape {
            dims: [1, h, w],
            ndim: 2,
        }
    }

    pub fn d3(d: usize, h: usize, w: usize) -> Self {
        MaskShape {
            dims: [d, h, w],
            ndim: 3,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn first_axis(&self) -> usize {
        3 - self.ndim
    }
}

/// Borrowed label map.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub data: &'a [u8],
    pub shape: MaskShape,
}

impl<'a> Labels<'a> {
    /// # Panics
    /// If `data.len()` disagrees with `shape`.
    pub fn new(data: &'a [u8], shape: MaskShape) -> Self {
        assert_eq!(data.len(), shape.len(), "label data length");
        Labels { data, shape }
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }

    fn mask(&self, class_id: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class_id).collect()
    }
}

fn overlap(pred: Labels<'_>, gt: Labels<'_>, class_id: u8) -> (usize, usize, usize) {
    assert_eq!(pred.shape, gt.shape, "prediction and ground truth shapes differ");
    let mut p = 0;
    let mut g = 0;
    let mut both = 0;
    for (&a, &b) in pred.data.iter().zip(gt.data) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    (p, g, both)
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice_score(pred: Labels<'_>, gt: Labels<'_>, class_id: u8) -> f64 {
    let (p, g, both) = overlap(pred, gt, class_id);
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn iou(pred: Labels<'_>, gt: Labels<'_>, class_id: u8) -> f64 {
    let (p, g, both) = overlap(pred, gt, class_id);
    let union = p + g - both;
    if union == 0 {
        1.0
    } else {
        both as f64 / union as f64
    }
}

/// Which order statistic of the pooled surface distances to report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HdPercentile {
    /// Maximum of both directed distances.
    Max,
    /// Percentile (0–100) of the pooled directed distances, linear interpolation.
    P(f64),
}

impl HdPercentile {
    pub const HD95: HdPercentile = HdPercentile::P(95.0);
}

/// Surface voxels of a boolean mask.
pub fn surface(mask: &[bool], shape: MaskShape) -> Vec<bool> {
    let [d, h, w] = shape.dims;
    let strides = [h * w, w, 1];
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = z * strides[0] + y * strides[1] + x;
                if !mask[i] {
                    continue;
                }
                let coord = [z, y, x];
                let mut interior = true;
                for axis in shape.first_axis()..3 {
                    let c = coord[axis];
                    let lo = c == 0 || !mask[i - strides[axis]];
                    let hi = c + 1 == shape.dims[axis] || !mask[i + strides[axis]];
                    if lo || hi {
                        interior = false;
                        break;
                    }
                }
                out[i] = !interior;
            }
        }
    }
    out
}

/// Lower-envelope pass of the Felzenszwalb–Huttenlocher transform along one
/// line: `out[q] = min_p f[p] + (step·(q − p))²`.
fn edt_line(f: &[f64], out: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                break;
            };
            let s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    // z[k] is the left boundary of parabola v[k]
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(v[k]);
        *o = dq * dq + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `seed` voxel,
/// in units of `spacing` (`[sz, sy, sx]`). All-infinite when there are no seeds.
pub fn squared_edt(seeds: &[bool], shape: MaskShape, spacing: [f64; 3]) -> Vec<f64> {
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let [d, h, w] = shape.dims;
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in shape.first_axis()..3 {
        let n = shape.dims[axis];
        if n == 0 {
            continue;
        }
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (a0, a1) = (others[0], others[1]);
        for i0 in 0..shape.dims[a0] {
            for i1 in 0..shape.dims[a1] {
                let base = i0 * strides[a0] + i1 * strides[a1];
                line.clear();
                line.extend((0..n).map(|k| dist[base + k * strides[axis]]));
                out.resize(n, 0.0);
                edt_line(&line, &mut out, spacing[axis], &mut v, &mut z);
                for (k, &o) in out.iter().enumerate() {
                    dist[base + k * strides[axis]] = o;
                }
            }
        }
    }
    let _ = d;
    dist
}

/// Percentile with linear interpolation between order statistics.
///
/// # Panics
/// If `values` is empty.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let pos = (values.len() - 1) as f64 * (q / 100.0);
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Directed surface distances in both directions, pooled: first `pred → gt`,
/// then `gt → pred`. `None` when exactly one mask is empty; empty when both are.
pub fn surface_distances(
    pred: Labels<'_>,
    gt: Labels<'_>,
    class_id: u8,
    spacing: [f64; 3],
) -> Option<(Vec<f64>, Vec<f64>)> {
    assert_eq!(pred.shape, gt.shape, "prediction and ground truth shapes differ");
    let shape = pred.shape;
    let pm = pred.mask(class_id);
    let gm = gt.mask(class_id);
    let p_any = pm.iter().any(|&b| b);
    let g_any = gm.iter().any(|&b| b);
    match (p_any, g_any) {
        (false, false) => return Some((Vec::new(), Vec::new())),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let ps = surface(&pm, shape);
    let gs = surface(&gm, shape);
    let to_g = squared_edt(&gs, shape, spacing);
    let to_p = squared_edt(&ps, shape, spacing);
    let fwd = ps
        .iter()
        .zip(&to_g)
        .filter(|(s, _)| **s)
        .map(|(_, d)| libm::sqrt(*d))
        .collect();
    let bwd = gs
        .iter()
        .zip(&to_p)
        .filter(|(s, _)| **s)
        .map(|(_, d)| libm::sqrt(*d))
        .collect();
    Some((fwd, bwd))
}

/// Symmetric Hausdorff statistic between the class surfaces.
///
/// Returns `Some(0.0)` when both masks are empty and `None` (undefined) when
/// exactly one is. `spacing` defaults to unit voxels.
pub fn hausdorff(
    pred: Labels<'_>,
    gt: Labels<'_>,
    class_id: u8,
    which: HdPercentile,
    spacing: Option<[f64; 3]>,
) -> Option<f64> {
    let (fwd, bwd) = surface_distances(pred, gt, class_id, spacing.unwrap_or([1.0; 3]))?;
    if fwd.is_empty() && bwd.is_empty() {
        return Some(0.0);
    }
    Some(match which {
        HdPercentile::Max => fwd.iter().chain(&bwd).copied().fold(0.0, f64::max),
        HdPercentile::P(q) => {
            let mut pooled: Vec<f64> = fwd.into_iter().chain(bwd).collect();
            percentile(&mut pooled, q)
        }
    })
}

/// Per-class metrics for one case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub dsc: f64,
    pub iou: f64,
    /// Voxel units; `None` when exactly one mask is empty.
    pub hd95: Option<f64>,
    pub hd100: Option<f64>,
    /// Physical units when voxel spacing is known.
    pub hd95_mm: Option<f64>,
}

/// Metrics for every foreground class `1..num_classes`.
pub fn case_metrics(
    pred: Labels<'_>,
    gt: Labels<'_>,
    num_classes: usize,
    spacing: Option<[f64; 3]>,
) -> Vec<ClassMetrics> {
    (1..num_classes as u8)
        .map(|c| {
            let (fwd, bwd) = match surface_distances(pred, gt, c, [1.0; 3]) {
                Some(pair) => pair,
                None => {
                    return ClassMetrics {
                        class_id: c,
                        dsc: dice_score(pred, gt, c),
                        iou: iou(pred, gt, c),
                        hd95: None,
                        hd100: None,
                        hd95_mm: None,
                    }
                }
            };
            let (hd95, hd100) = if fwd.is_empty() && bwd.is_empty() {
                (0.0, 0.0)
            } else {
                let mut pooled: Vec<f64> = fwd.into_iter().chain(bwd).collect();
                let max = pooled.iter().copied().fold(0.0, f64::max);
                (percentile(&mut pooled, 95.0), max)
            };
            ClassMetrics {
                class_id: c,
                dsc: dice_score(pred, gt, c),
                iou: iou(pred, gt, c),
                hd95: Some(hd95),
                hd100: Some(hd100),
                hd95_mm: spacing.and_then(|s| hausdorff(pred, gt, c, HdPercentile::HD95, Some(s))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(h: usize, w: usize, data: &[u8]) -> Labels<'_> {
        Labels::new(data, MaskShape::d2(h, w))
    }

    #[test]
    fn dice_cases() {
        let a = [1u8, 1, 0, 0];
        let b = [0u8, 0, 1, 1];
        assert_eq!(dice_score(l2(2, 2, &a), l2(2, 2, &a), 1), 1.0);
        assert_eq!(dice_score(l2(2, 2, &a), l2(2, 2, &b), 1), 0.0);
        assert_eq!(dice_score(l2(2, 2, &[0; 4]), l2(2, 2, &[0; 4]), 1), 1.0);
        assert_eq!(dice_score(l2(2, 2, &a), l2(2, 2, &[0; 4]), 1), 0.0);
        assert_eq!(iou(l2(2, 2, &a), l2(2, 2, &b), 1), 0.0);
        assert_eq!(iou(l2(2, 2, &[0; 4]), l2(2, 2, &[0; 4]), 1), 1.0);
    }

    #[test]
    fn half_overlap_on_4x4() {
        // |P| = 4, |G| = 4, |P∩G| = 2
        let mut p = [0u8; 16];
        let mut g = [0u8; 16];
        for i in [0, 1, 2, 3] {
            p[i] = 1;
        }
        for i in [2, 3, 4, 5] {
            g[i] = 1;
        }
        let (pl, gl) = (l2(4, 4, &p), l2(4, 4, &g));
        assert_eq!(dice_score(pl, gl, 1), 0.5);
        let j = iou(pl, gl, 1);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
        assert!((2.0 * j / (1.0 + j) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_voxels_3_4_5() {
        let mut p = [0u8; 25];
        let mut g = [0u8; 25];
        p[0] = 1;
        g[3 * 5 + 4] = 1;
        for which in [HdPercentile::Max, HdPercentile::HD95] {
            assert_eq!(hausdorff(l2(5, 5, &p), l2(5, 5, &g), 1, which, None), Some(5.0));
        }
    }

    #[test]
    fn empty_conventions() {
        let z = [0u8; 9];
        let mut one = [0u8; 9];
        one[4] = 1;
        assert_eq!(hausdorff(l2(3, 3, &z), l2(3, 3, &z), 1, HdPercentile::Max, None), Some(0.0));
        assert_eq!(hausdorff(l2(3, 3, &one), l2(3, 3, &z), 1, HdPercentile::Max, None), None);
        assert_eq!(hausdorff(l2(3, 3, &one), l2(3, 3, &one), 1, HdPercentile::HD95, None), Some(0.0));
    }

    #[test]
    fn interior_voxels_are_not_surface() {
        let mask = [true; 9];
        let s = surface(&mask, MaskShape::d2(3, 3));
        assert_eq!(s.iter().filter(|&&b| b).count(), 8);
        assert!(!s[4]);
        let s3 = surface(&[true; 27], MaskShape::d3(3, 3, 3));
        assert_eq!(s3.iter().filter(|&&b| b).count(), 26);
        // a single slice treated as 3D erodes to nothing interior
        let flat = surface(&mask, MaskShape::d3(1, 3, 3));
        assert!(flat.iter().all(|&b| b));
    }

    #[test]
    fn anisotropic_spacing_scales_distance() {
        let mut p = [0u8; 10];
        let mut g = [0u8; 10];
        p[0] = 1;
        g[9] = 1;
        let d = hausdorff(
            Labels::new(&p, MaskShape::d3(10, 1, 1)),
            Labels::new(&g, MaskShape::d3(10, 1, 1)),
            1,
            HdPercentile::Max,
            Some([2.5, 1.0, 1.0]),
        );
        assert_eq!(d, Some(22.5));
    }

    #[test]
    fn percentile_matches_numpy_linear() {
        // np.percentile([1, 2, 3, 4, 10], 95) == 8.8
        let mut v = [10.0, 1.0, 3.0, 2.0, 4.0];
        assert!((percentile(&mut v, 95.0) - 8.8).abs() < 1e-12);
        assert_eq!(percentile(&mut [7.0], 95.0), 7.0);
    }

    #[test]
    fn case_metrics_skips_background() {
        let p = [0u8, 1, 2, 2];
        let m = case_metrics(l2(2, 2, &p), l2(2, 2, &p), 3, None);
        assert_eq!(m.len(), 2);
        assert!(m.iter().all(|c| c.dsc == 1.0 && c.hd95 == Some(0.0)));
    }
}
