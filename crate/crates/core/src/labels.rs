//! Class names in report column order, and published full-scale targets.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::DatasetKind;

/// Synapse foreground labels 1..=8.
pub const SYNAPSE_ORGANS: [&str; 8] = [
    "Aorta",
    "Gallbladder",
    "Kidney(L)",
    "Kidney(R)",
    "Liver",
    "Pancreas",
    "Spleen",
    "Stomach",
];

/// ACDC foreground labels 1..=3.
pub const ACDC_STRUCTURES: [&str; 3] = ["RV", "Myo", "LV"];

/// Names of the foreground classes `1..num_classes`.
pub fn foreground_names(dataset: DatasetKind, num_classes: usize) -> Vec<String> {
    let n = num_classes.saturating_sub(1);
    let known: &[&str] = match dataset {
        DatasetKind::Synapse => &SYNAPSE_ORGANS,
        DatasetKind::Acdc => &ACDC_STRUCTURES,
        DatasetKind::Synthetic => &[],
    };
    (0..n)
        .map(|i| match known.get(i) {
            Some(name) => String::from(*name),
            None => format!("class{}", i + 1),
        })
        .collect()
}

/// Full-scale reference results reported for this architecture (percent DSC, HD).
pub mod reference {
    pub const SYNAPSE_DSC: f64 = 82.25;
    pub const SYNAPSE_HD: f64 = 15.27;
    pub const SYNAPSE_ORGAN_DSC: [f64; 8] = [89.85, 69.02, 85.58, 83.11, 95.92, 61.17, 89.99, 83.35];
    pub const ACDC_DSC: f64 = 90.46;
    pub const ACDC_STRUCTURE_DSC: [f64; 3] = [87.85, 87.53, 96.01];
    /// `(input size, fusion stages, DSC, HD)`.
    pub const ABLATION: [(usize, usize, f64, f64); 4] = [
        (224, 2, 82.09, 18.97),
        (224, 3, 82.25, 15.27),
        (224, 6, 82.67, 19.76),
        (308, 3, 82.37, 15.42),
    ];
    /// Expected seed-to-seed spread of mean DSC at full scale.
    pub const DSC_TOLERANCE: f64 = 1.0;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_follow_column_order() {
        let s = foreground_names(DatasetKind::Synapse, 9);
        assert_eq!(s.len(), 8);
        assert_eq!(s[0], "Aorta");
        assert_eq!(s[7], "Stomach");
        assert_eq!(foreground_names(DatasetKind::Acdc, 4), ["RV", "Myo", "LV"]);
        assert_eq!(foreground_names(DatasetKind::Synthetic, 3), ["class1", "class2"]);
    }

    #[test]
    fn reference_means_are_consistent() {
        let mean: f64 = reference::SYNAPSE_ORGAN_DSC.iter().sum::<f64>() / 8.0;
        assert!((mean - reference::SYNAPSE_DSC).abs() < 0.01);
        let acdc: f64 = reference::ACDC_STRUCTURE_DSC.iter().sum::<f64>() / 3.0;
        assert!((acdc - reference::ACDC_DSC).abs() < 0.01);
    }
}
