//! Fixed case lists for the benchmark splits, and the split container.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::array::{SliceSample, VolumeSample};

/// Synapse training cases (18 volumes), as used by the TransUNet line of work.
pub const SYNAPSE_TRAIN_CASES: [&str; 18] = [
    "case0005", "case0006", "case0007", "case0009", "case0010", "case0021", "case0023", "case0024",
    "case0026", "case0027", "case0028", "case0030", "case0031", "case0033", "case0034", "case0037",
    "case0039", "case0040",
];

/// Synapse test cases (12 volumes).
pub const SYNAPSE_TEST_CASES: [&str; 12] = [
    "case0001", "case0002", "case0003", "case0004", "case0008", "case0022", "case0025", "case0029",
    "case0032", "case0035", "case0036", "case0038",
];

pub const ACDC_NUM_PATIENTS: usize = 100;

/// Case-level ACDC partition: every 5th patient tests (20), patients
/// `10k + 3` validate (10), the remaining 70 train.
pub fn acdc_split() -> (Vec<String>, Vec<String>, Vec<String>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for p in 1..=ACDC_NUM_PATIENTS {
        let id = format!("patient{p:03}");
        if p % 5 == 0 {
            test.push(id);
        } else if p % 10 == 3 {
            val.push(id);
        } else {
            train.push(id);
        }
    }
    (train, val, test)
}

/// Output of a dataset loader or the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitData {
    pub train: Vec<SliceSample>,
    pub eval: Vec<VolumeSample>,
    pub val: Vec<VolumeSample>,
}

impl SplitData {
    /// Distinct training case ids in sorted order.
    pub fn train_cases(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.train.iter().map(|s| s.case_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Case ids present in training and in either held-out split.
    pub fn leaked_cases(&self) -> Vec<String> {
        let train: BTreeSet<&str> = self.train.iter().map(|s| s.case_id.as_str()).collect();
        let held: BTreeSet<&str> = self
            .eval
            .iter()
            .chain(&self.val)
            .map(|v| v.case_id.as_str())
            .collect();
        train.intersection(&held).map(|s| String::from(*s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synapse_lists_are_disjoint() {
        let train: BTreeSet<_> = SYNAPSE_TRAIN_CASES.iter().collect();
        let test: BTreeSet<_> = SYNAPSE_TEST_CASES.iter().collect();
        assert_eq!(train.len(), 18);
        assert_eq!(test.len(), 12);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn acdc_proportions() {
        let (train, val, test) = acdc_split();
        assert_eq!((train.len(), val.len(), test.len()), (70, 10, 20));
        let all: BTreeSet<_> = train.iter().chain(&val).chain(&test).collect();
        assert_eq!(all.len(), 100);
    }
}
