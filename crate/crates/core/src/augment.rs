//! Training-slice augmentation: flips with quarter turns, small-angle
//! rotation, intensity jitter, then resampling to the network input size.

use crate::array::{Grid2, SliceSample};
use crate::interp::{resize_bilinear, resize_nearest, rotate_bilinear, rotate_nearest};
use crate::rng::{below, coin, uniform, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOptions {
    /// Random axis flip combined with a random multiple of 90°.
    pub flip: bool,
    /// Random rotation within `±max_angle_deg`.
    pub rotation: bool,
    /// Multiplicative and additive intensity jitter.
    pub intensity: bool,
    pub probability: f64,
    pub max_angle_deg: f64,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            flip: true,
            rotation: true,
            intensity: true,
            probability: 0.5,
            max_angle_deg: 20.0,
            scale_range: (0.9, 1.1),
            shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentOptions {
    pub fn none() -> Self {
        AugmentOptions {
            flip: false,
            rotation: false,
            intensity: false,
            ..AugmentOptions::default()
        }
    }
}

/// Resamples a slice to `(h, w)`: image bilinear, label nearest.
pub fn resize_sample(s: &SliceSample, h: usize, w: usize) -> SliceSample {
    SliceSample {
        image: resize_bilinear(&s.image, h, w),
        label: resize_nearest(&s.label, h, w),
        case_id: s.case_id.clone(),
        slice_index: s.slice_index,
    }
}

pub fn augment(
    s: &SliceSample,
    opts: &AugmentOptions,
    (h, w): (usize, usize),
    rng: &mut StreamRng,
) -> SliceSample {
    let mut image = s.image.clone();
    let mut label = s.label.clone();
    if opts.flip && coin(rng, opts.probability) {
        let k = below(rng, 4);
        image = image.rot90(k);
        label = label.rot90(k);
        if below(rng, 2) == 0 {
            image = image.flip_rows();
            label = label.flip_rows();
        } else {
            image = image.flip_cols();
            label = label.flip_cols();
        }
    }
    if opts.rotation && coin(rng, opts.probability) {
        let angle = uniform(rng, -opts.max_angle_deg, opts.max_angle_deg);
        image = rotate_bilinear(&image, angle);
        label = rotate_nearest(&label, angle, 0);
    }
    if opts.intensity {
        let scale = uniform(rng, opts.scale_range.0, opts.scale_range.1) as f32;
        let shift = uniform(rng, opts.shift_range.0, opts.shift_range.1) as f32;
        image = image.map(|v| v * scale + shift);
    }
    let out = SliceSample {
        image,
        label,
        case_id: s.case_id.clone(),
        slice_index: s.slice_index,
    };
    resize_sample(&out, h, w)
}

/// Class ids present in a label grid, as a 256-bit set.
pub fn label_set(label: &Grid2<u8>) -> [bool; 256] {
    let mut seen = [false; 256];
    for &v in &label.data {
        seen[v as usize] = true;
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::indexed_stream;
    use alloc::string::ToString;
    use alloc::vec::Vec;

    fn sample() -> SliceSample {
        let image = Grid2::from_vec(8, 10, (0..80).map(|v| v as f32 / 80.0).collect());
        let label = Grid2::from_vec(8, 10, (0..80).map(|v| ((v / 7) % 3) as u8).collect());
        SliceSample {
            image,
            label,
            case_id: "case0005".to_string(),
            slice_index: 3,
        }
    }

    #[test]
    fn seeded_runs_match() {
        let s = sample();
        let opts = AugmentOptions::default();
        let a = augment(&s, &opts, (16, 16), &mut indexed_stream(9, "aug", 4));
        let b = augment(&s, &opts, (16, 16), &mut indexed_stream(9, "aug", 4));
        assert_eq!(a, b);
        assert_eq!(a.image.shape(), (16, 16));
    }

    #[test]
    fn labels_stay_within_input_set() {
        let s = sample();
        let before = label_set(&s.label);
        for i in 0..50 {
            let out = augment(&s, &AugmentOptions::default(), (12, 12), &mut indexed_stream(1, "aug", i));
            let after = label_set(&out.label);
            assert!((0..256).all(|c| !after[c] || before[c]));
        }
    }

    #[test]
    fn double_half_turn_is_identity() {
        let s = sample();
        let twice = |g: &Grid2<f32>| rotate_bilinear(&rotate_bilinear(g, 180.0), 180.0);
        assert_eq!(twice(&s.image), s.image);
        let l = rotate_nearest(&rotate_nearest(&s.label, 180.0, 0), 180.0, 0);
        assert_eq!(l, s.label);
    }

    #[test]
    fn disabled_augmentation_only_resizes() {
        let s = sample();
        let out = augment(&s, &AugmentOptions::none(), (8, 10), &mut indexed_stream(0, "aug", 0));
        assert_eq!(out, s);
        let v: Vec<u8> = out.label.data.clone();
        assert_eq!(v, s.label.data);
    }
}
