//! Volume-wise evaluation reports: per-case, per-class metrics and their
//! aggregates, written as CSV, a text table, and JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udfa_core::labels::foreground_names;
use udfa_core::metrics::ClassMetrics;
use udfa_core::DatasetKind;

use crate::{Result, UdfaError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: u8,
    pub name: String,
    pub dsc: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub hd100: Option<f64>,
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub classes: Vec<ClassRow>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    /// Mean over classes with a defined distance.
    pub mean_hd95: Option<f64>,
    pub mean_hd100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEvalReport {
    pub dataset: String,
    /// Foreground class names in column order.
    pub class_names: Vec<String>,
    pub cases: Vec<CaseReport>,
    pub class_mean_dsc: Vec<f64>,
    pub class_mean_iou: Vec<f64>,
    pub class_mean_hd95: Vec<Option<f64>>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
    pub mean_hd100: Option<f64>,
    /// Class/case pairs whose distance was undefined (exactly one mask empty).
    pub undefined_hd: usize,
    /// Directory holding per-case prediction volumes, if saved.
    pub prediction_dir: Option<String>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl CaseReport {
    pub fn new(case_id: &str, metrics: &[ClassMetrics], names: &[String]) -> Self {
        let classes: Vec<ClassRow> = metrics
            .iter()
            .map(|m| ClassRow {
                class_id: m.class_id,
                name: names
                    .get(m.class_id as usize - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("class{}", m.class_id)),
                dsc: m.dsc,
                iou: m.iou,
                hd95: m.hd95,
                hd100: m.hd100,
                hd95_mm: m.hd95_mm,
            })
            .collect();
        CaseReport {
            case_id: case_id.to_owned(),
            mean_dsc: mean(classes.iter().map(|c| c.dsc)).unwrap_or(0.0),
            mean_iou: mean(classes.iter().map(|c| c.iou)).unwrap_or(0.0),
            mean_hd95: mean(classes.iter().filter_map(|c| c.hd95)),
            mean_hd100: mean(classes.iter().filter_map(|c| c.hd100)),
            classes,
        }
    }
}

impl VolumeEvalReport {
    /// Aggregates cases. Class means run over cases; overall means over classes.
    pub fn aggregate(dataset: DatasetKind, num_classes: usize, cases: Vec<CaseReport>) -> Self {
        let class_names = foreground_names(dataset, num_classes);
        let nc = class_names.len();
        let column = |k: usize| cases.iter().filter_map(move |c| c.classes.get(k));
        let class_mean_dsc: Vec<f64> =
            (0..nc).map(|k| mean(column(k).map(|r| r.dsc)).unwrap_or(0.0)).collect();
        let class_mean_iou: Vec<f64> =
            (0..nc).map(|k| mean(column(k).map(|r| r.iou)).unwrap_or(0.0)).collect();
        let class_mean_hd95: Vec<Option<f64>> =
            (0..nc).map(|k| mean(column(k).filter_map(|r| r.hd95))).collect();
        let class_mean_hd100: Vec<Option<f64>> =
            (0..nc).map(|k| mean(column(k).filter_map(|r| r.hd100))).collect();
        let undefined_hd = cases
            .iter()
            .flat_map(|c| &c.classes)
            .filter(|r| r.hd95.is_none())
            .count();
        if undefined_hd > 0 {
            log::info!("{undefined_hd} class/case pairs have an undefined distance and are excluded from HD means");
        }
        let has_cases = !cases.is_empty();
        VolumeEvalReport {
            dataset: dataset.as_str().to_owned(),
            mean_dsc: if has_cases { mean(class_mean_dsc.iter().copied()).unwrap_or(0.0) } else { 0.0 },
            mean_iou: if has_cases { mean(class_mean_iou.iter().copied()).unwrap_or(0.0) } else { 0.0 },
            mean_hd95: mean(class_mean_hd95.iter().flatten().copied()),
            mean_hd100: mean(class_mean_hd100.iter().flatten().copied()),
            class_names,
            cases,
            class_mean_dsc,
            class_mean_iou,
            class_mean_hd95,
            undefined_hd,
            prediction_dir: None,
        }
    }

    /// Whether the main table carries a distance column (the ACDC table does not).
    fn has_hd_column(&self) -> bool {
        self.dataset != DatasetKind::Acdc.as_str()
    }

    /// Header of the main table: case, DSC, (HD,) then one DSC column per class.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["case".to_owned(), "DSC".to_owned()];
        if self.has_hd_column() {
            h.push("HD".to_owned());
        }
        h.extend(self.class_names.iter().cloned());
        h
    }

    fn main_rows(&self, digits: usize, missing: &str) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map_or(missing.to_owned(), |x| format!("{x:.digits$}"));
        let pct = |x: f64| format!("{:.digits$}", 100.0 * x);
        let mut rows: Vec<Vec<String>> = self
            .cases
            .iter()
            .map(|c| {
                let mut r = vec![c.case_id.clone(), pct(c.mean_dsc)];
                if self.has_hd_column() {
                    r.push(opt(c.mean_hd95));
                }
                r.extend(c.classes.iter().map(|x| pct(x.dsc)));
                r
            })
            .collect();
        let mut m = vec!["mean".to_owned(), pct(self.mean_dsc)];
        if self.has_hd_column() {
            m.push(opt(self.mean_hd95));
        }
        m.extend(self.class_mean_dsc.iter().map(|&d| pct(d)));
        rows.push(m);
        rows
    }

    /// DSC in percent, HD (95th percentile) in voxels; empty cells for undefined values.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header().join(",");
        out.push('\n');
        for r in self.main_rows(4, "") {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    /// Secondary per-case measures: IoU (percent), HD95, HD100 and HD95 in mm.
    pub fn to_extra_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        let mut out = String::from("case,IoU,HD95,HD100,HD95_mm\n");
        for c in &self.cases {
            let mm = mean(c.classes.iter().filter_map(|r| r.hd95_mm));
            let _ = writeln!(
                out,
                "{},{:.4},{},{},{}",
                c.case_id,
                100.0 * c.mean_iou,
                opt(c.mean_hd95),
                opt(c.mean_hd100),
                opt(mm)
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.4},{},{},",
            100.0 * self.mean_iou,
            opt(self.mean_hd95),
            opt(self.mean_hd100)
        );
        out
    }

    pub fn to_text_table(&self) -> String {
        let header = self.csv_header();
        let widths: Vec<usize> = header.iter().map(|h| h.len().max(8)).collect();
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            for (i, c) in cells.iter().enumerate() {
                let _ = write!(out, "{:>w$}  ", c, w = widths[i]);
            }
            out.push('\n');
        };
        line(&header);
        for r in self.main_rows(2, "-") {
            line(&r);
        }
        out
    }

    /// Writes `report.json`, `report.csv`, `report_extra.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| UdfaError::io(dir, e))?;
        let json = dir.join("report.json");
        let put = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| UdfaError::io(&p, e));
        put(json.clone(), serde_json::to_string_pretty(self)?)?;
        put(dir.join("report.csv"), self.to_csv())?;
        put(dir.join("report_extra.csv"), self.to_extra_csv())?;
        put(dir.join("report.txt"), self.to_text_table())?;
        Ok(json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UdfaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metric(c: u8, dsc: f64, hd: Option<f64>) -> ClassMetrics {
        ClassMetrics {
            class_id: c,
            dsc,
            iou: dsc / (2.0 - dsc),
            hd95: hd,
            hd100: hd,
            hd95_mm: None,
        }
    }

    #[test]
    fn synapse_columns_follow_organ_order() {
        let r = VolumeEvalReport::aggregate(DatasetKind::Synapse, 9, Vec::new());
        assert_eq!(
            r.csv_header()[1..],
            ["DSC", "HD", "Aorta", "Gallbladder", "Kidney(L)", "Kidney(R)", "Liver", "Pancreas", "Spleen", "Stomach"]
        );
    }

    #[test]
    fn aggregates_skip_undefined_distances() {
        let names = foreground_names(DatasetKind::Acdc, 4);
        let a = CaseReport::new("a", &[metric(1, 1.0, Some(0.0)), metric(2, 0.5, Some(4.0)), metric(3, 0.0, None)], &names);
        let b = CaseReport::new("b", &[metric(1, 0.5, Some(2.0)), metric(2, 0.5, None), metric(3, 1.0, Some(0.0))], &names);
        let r = VolumeEvalReport::aggregate(DatasetKind::Acdc, 4, vec![a, b]);
        assert_eq!(r.class_mean_dsc, [0.75, 0.5, 0.5]);
        assert_eq!(r.class_mean_hd95, [Some(1.0), Some(4.0), Some(0.0)]);
        assert_eq!(r.undefined_hd, 2);
        assert!((r.mean_dsc - 1.75 / 3.0).abs() < 1e-12);
        assert!((r.mean_hd95.unwrap() - 5.0 / 3.0).abs() < 1e-12);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), "case,DSC,RV,Myo,LV");
        assert_eq!(r.to_extra_csv().lines().count(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = r.write(dir.path()).unwrap();
        assert_eq!(VolumeEvalReport::read(&p).unwrap(), r);
    }
}
