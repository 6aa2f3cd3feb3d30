//! Synthetic volumes with ellipsoidal structures and exact ground truth.

use alloc::format;
use alloc::vec::Vec;

use crate::array::{Volume, VolumeSample};
use crate::rng::{indexed_stream, normal, uniform, StreamRng};
use crate::split::SplitData;

/// Mean intensity of class `c` out of `num_classes`; background is 0.
pub fn class_intensity(c: usize, num_classes: usize) -> f32 {
    if c == 0 {
        0.0
    } else {
        0.25 + 0.7 * (c as f32) / (num_classes.max(2) - 1) as f32
    }
}

fn paint_ellipsoid(label: &mut Volume<u8>, class_id: u8, rng: &mut StreamRng) {
    let (d, h, w) = label.shape();
    let centre = |n: usize, rng: &mut StreamRng| uniform(rng, 0.3 * n as f64, 0.7 * n as f64);
    let (cz, cy, cx) = (centre(d, rng), centre(h, rng), centre(w, rng));
    let rz = uniform(rng, 0.25, 0.5) * d as f64 + 0.5;
    let ry = uniform(rng, 0.1, 0.25) * h as f64 + 0.5;
    let rx = uniform(rng, 0.1, 0.25) * w as f64 + 0.5;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (a, b, c) = ((z as f64 - cz) / rz, (y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let q = a * a + b * b + c * c;
                if q <= 1.0 {
                    label.set(z, y, x, class_id);
                }
            }
        }
    }
    // later classes may paint over earlier ones; keep at least the centre voxel
    let (z, y, x) = (cz as usize, cy as usize, cx as usize);
    label.set(z.min(d - 1), y.min(h - 1), x.min(w - 1), class_id);
}

/// One synthetic case. Every class in `1..num_classes` occupies at least one voxel.
pub fn synth_volume(
    case_id: &str,
    (d, h, w): (usize, usize, usize),
    num_classes: usize,
    rng: &mut StreamRng,
) -> VolumeSample {
    assert!(d > 0 && h > 0 && w > 0, "empty synthetic volume");
    let mut label = Volume::filled(d, h, w, 0u8);
    for c in 1..num_classes {
        paint_ellipsoid(&mut label, c as u8, rng);
    }
    for c in 1..num_classes {
        if !label.data.contains(&(c as u8)) {
            // fully occluded: claim a corner voxel on a distinct slice row
            label.set(0, (c - 1) % h, 0, c as u8);
        }
    }
    let data = label
        .data
        .iter()
        .map(|&c| {
            let v = class_intensity(c as usize, num_classes) + 0.03 * normal(rng) as f32;
            v.clamp(0.0, 1.0)
        })
        .collect();
    VolumeSample {
        image: Volume::from_vec(d, h, w, data),
        label,
        case_id: case_id.into(),
        spacing: Some([1.0, 1.0, 1.0]),
    }
}

/// `num_cases` synthetic volumes split 60/40 into sliced training cases and
/// evaluation volumes (a single case goes to training).
pub fn synth_dataset(
    num_cases: usize,
    shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
) -> SplitData {
    let volumes: Vec<VolumeSample> = (0..num_cases)
        .map(|i| {
            let mut rng = indexed_stream(seed, "synth", i as u64);
            synth_volume(&format!("synth{i:03}"), shape, num_classes, &mut rng)
        })
        .collect();
    let n_eval = if num_cases >= 2 {
        (num_cases * 2 / 5).max(1)
    } else {
        0
    };
    let n_train = num_cases - n_eval;
    let mut split = SplitData::default();
    for (i, v) in volumes.into_iter().enumerate() {
        if i < n_train {
            split.train.extend(v.to_slices());
        } else {
            split.eval.push(v);
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{dice_score, Labels, MaskShape};

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(2, (8, 64, 64), 3, 0);
        let b = synth_dataset(2, (8, 64, 64), 3, 0);
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.eval.len(), 1);
        assert_ne!(a, synth_dataset(2, (8, 64, 64), 3, 1));
    }

    #[test]
    fn every_class_present() {
        for seed in 0..5 {
            let split = synth_dataset(3, (4, 16, 16), 9, seed);
            for v in &split.eval {
                for c in 0..9u8 {
                    assert!(v.label.data.contains(&c), "class {c} missing (seed {seed})");
                }
            }
        }
    }

    #[test]
    fn self_dice_is_one() {
        let split = synth_dataset(2, (8, 64, 64), 3, 0);
        let v = &split.eval[0];
        let l = Labels::new(&v.label.data, MaskShape::d3(8, 64, 64));
        for c in 1..3 {
            assert_eq!(dice_score(l, l, c), 1.0);
        }
    }
}
