//! Exhaustive oracles for the overlap and surface-distance metrics.

use proptest::prelude::*;
use udfa_core::metrics::{case_metrics, dice_score, hausdorff, iou, HdPercentile, Labels, MaskShape};

const D: usize = 4;
const H: usize = 6;
const W: usize = 6;

fn coords(i: usize) -> (i64, i64, i64) {
    ((i / (H * W)) as i64, ((i / W) % H) as i64, (i % W) as i64)
}

fn in_mask(mask: &[bool], z: i64, y: i64, x: i64) -> bool {
    if z < 0 || y < 0 || x < 0 || z >= D as i64 || y >= H as i64 || x >= W as i64 {
        return false;
    }
    mask[(z as usize * H + y as usize) * W + x as usize]
}

/// Surface voxels by direct neighbour inspection.
fn oracle_surface(mask: &[bool]) -> Vec<(i64, i64, i64)> {
    (0..mask.len())
        .filter(|&i| mask[i])
        .map(coords)
        .filter(|&(z, y, x)| {
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                .iter()
                .any(|&(dz, dy, dx)| !in_mask(mask, z + dz, y + dy, x + dx))
        })
        .collect()
}

fn directed(a: &[(i64, i64, i64)], b: &[(i64, i64, i64)]) -> Vec<f64> {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let (dz, dy, dx) = (p.0 - q.0, p.1 - q.1, p.2 - q.2);
                    ((dz * dz + dy * dy + dx * dx) as f64).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oracle_hd(pred: &[u8], gt: &[u8], class: u8, q: Option<f64>) -> Option<f64> {
    let pm: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let gm: Vec<bool> = gt.iter().map(|&v| v == class).collect();
    match (pm.contains(&true), gm.contains(&true)) {
        (false, false) => return Some(0.0),
        (true, true) => {}
        _ => return None,
    }
    let (ps, gs) = (oracle_surface(&pm), oracle_surface(&gm));
    let mut all = directed(&ps, &gs);
    all.extend(directed(&gs, &ps));
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(match q {
        None => *all.last().unwrap(),
        Some(q) => {
            let pos = (all.len() - 1) as f64 * q / 100.0;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(all.len() - 1);
            all[lo] + (all[hi] - all[lo]) * (pos - lo as f64)
        }
    })
}

fn oracle_counts(pred: &[u8], gt: &[u8], class: u8) -> (f64, f64) {
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    let mut either = 0usize;
    for i in 0..pred.len() {
        let a = pred[i] == class;
        let b = gt[i] == class;
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
        either += (a || b) as usize;
    }
    let dice = if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 };
    let jac = if either == 0 { 1.0 } else { both as f64 / either as f64 };
    (dice, jac)
}

fn mask_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    let n = D * H * W;
    (
        prop::collection::vec(0u8..3, n),
        prop::collection::vec(0u8..3, n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_brute_force((pred, gt) in mask_pair()) {
        let shape = MaskShape::d3(D, H, W);
        let (pl, gl) = (Labels::new(&pred, shape), Labels::new(&gt, shape));
        for class in 1..3u8 {
            let (d, j) = oracle_counts(&pred, &gt, class);
            prop_assert!((dice_score(pl, gl, class) - d).abs() < 1e-9);
            prop_assert!((iou(pl, gl, class) - j).abs() < 1e-9);
            let got = hausdorff(pl, gl, class, HdPercentile::Max, None);
            let want = oracle_hd(&pred, &gt, class, None);
            prop_assert_eq!(got.is_some(), want.is_some());
            if let (Some(a), Some(b)) = (got, want) {
                prop_assert!((a - b).abs() < 1e-9, "hd100 {} vs {}", a, b);
            }
            let got95 = hausdorff(pl, gl, class, HdPercentile::HD95, None);
            let want95 = oracle_hd(&pred, &gt, class, Some(95.0));
            if let (Some(a), Some(b)) = (got95, want95) {
                prop_assert!((a - b).abs() < 1e-9, "hd95 {} vs {}", a, b);
            }
        }
    }

    #[test]
    fn dice_iou_identity((pred, gt) in mask_pair()) {
        let shape = MaskShape::d3(D, H, W);
        let (pl, gl) = (Labels::new(&pred, shape), Labels::new(&gt, shape));
        for class in 1..3u8 {
            let d = dice_score(pl, gl, class);
            let j = iou(pl, gl, class);
            prop_assert!(j <= d + 1e-15);
            prop_assert!((2.0 * j / (1.0 + j) - d).abs() < 1e-12);
        }
    }

    #[test]
    fn max_hausdorff_is_symmetric((pred, gt) in mask_pair()) {
        let shape = MaskShape::d3(D, H, W);
        let (pl, gl) = (Labels::new(&pred, shape), Labels::new(&gt, shape));
        prop_assert_eq!(
            hausdorff(pl, gl, 1, HdPercentile::Max, None),
            hausdorff(gl, pl, 1, HdPercentile::Max, None)
        );
    }

    #[test]
    fn case_metrics_agree_with_single_calls((pred, gt) in mask_pair()) {
        let shape = MaskShape::d3(D, H, W);
        let (pl, gl) = (Labels::new(&pred, shape), Labels::new(&gt, shape));
        for m in case_metrics(pl, gl, 3, None) {
            prop_assert_eq!(m.dsc, dice_score(pl, gl, m.class_id));
            prop_assert_eq!(m.hd100, hausdorff(pl, gl, m.class_id, HdPercentile::Max, None));
            prop_assert_eq!(m.hd95, hausdorff(pl, gl, m.class_id, HdPercentile::HD95, None));
        }
    }
}

#[test]
fn two_dimensional_maps_use_in_plane_neighbours() {
    // a filled 5x5 square has a 16-voxel ring surface in 2D
    let data = vec![1u8; 25];
    let mut shifted = vec![0u8; 49];
    for y in 0..5 {
        for x in 0..5 {
            shifted[(y + 2) * 7 + x + 2] = 1;
        }
    }
    let mut padded = vec![0u8; 49];
    for y in 0..5 {
        for x in 0..5 {
            padded[y * 7 + x] = data[y * 5 + x];
        }
    }
    let shape = MaskShape::d2(7, 7);
    let hd = hausdorff(
        Labels::new(&padded, shape),
        Labels::new(&shifted, shape),
        1,
        HdPercentile::Max,
        None,
    );
    assert_eq!(hd, Some((8.0f64).sqrt()));
}
