//! Dataset roots on disk, checksummed manifests, batching, and volume
//! slicing/reassembly.
//!
//! Root layouts (every file is `.npz` with arrays `image` and `label`,
//! volumes optionally `spacing`):
//!
//! ```text
//! synapse/ and synthetic/          acdc/
//!   manifest.json                    manifest.json
//!   train_npz/<case>_slice<k>.npz    volumes/patient<nnn>.npz
//!   test_vol_npz/<case>.npz
//! ```
//!
//! Slices are `(H, W)`, volumes `(D, H, W)`. Labels may be stored as any
//! numeric dtype holding integral class ids. `manifest.json` lists every file
//! with its SHA-256; loading verifies it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use udfa_core::array::{Grid2, SliceSample, Volume, VolumeSample};
use udfa_core::augment::resize_sample;
use udfa_core::interp::{resize_bilinear, resize_nearest};
use udfa_core::split::{acdc_split, SYNAPSE_TEST_CASES, SYNAPSE_TRAIN_CASES};
use udfa_core::synth::synth_dataset;
use udfa_core::{DatasetKind, SplitData};

use crate::config_io::sha256_hex;
use crate::{Result, UdfaError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_DIR: &str = "train_npz";
pub const TEST_DIR: &str = "test_vol_npz";
pub const VOLUME_DIR: &str = "volumes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub dataset: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub verify_checksums: bool,
    /// Resample training slices to this size at load time.
    pub train_resize: Option<(usize, usize)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            verify_checksums: true,
            train_resize: None,
        }
    }
}

fn data_err(msg: impl Into<String>) -> UdfaError {
    UdfaError::Data(msg.into())
}

fn read_npz(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let arrays = Tensor::read_npz(path)
        .map_err(|e| data_err(format!("cannot read {}: {e}", path.display())))?;
    Ok(arrays.into_iter().collect())
}

fn array<'a>(arrays: &'a BTreeMap<String, Tensor>, key: &str, path: &Path) -> Result<&'a Tensor> {
    arrays
        .get(key)
        .ok_or_else(|| data_err(format!("{} has no array {key:?}", path.display())))
}

fn to_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

fn to_labels(t: &Tensor, path: &Path) -> Result<Vec<u8>> {
    if t.dtype() == DType::U8 {
        return Ok(t.flatten_all()?.to_vec1::<u8>()?);
    }
    to_f32(t)?
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(data_err(format!("{}: label value {v} is not a class id", path.display())))
            }
        })
        .collect()
}

pub fn read_slice(path: &Path, case_id: &str, slice_index: usize) -> Result<SliceSample> {
    let arrays = read_npz(path)?;
    let image = array(&arrays, "image", path)?;
    let label = array(&arrays, "label", path)?;
    let (h, w) = image
        .dims2()
        .map_err(|_| data_err(format!("{}: slice image must be 2D, got {:?}", path.display(), image.dims())))?;
    if label.dims() != [h, w] {
        return Err(data_err(format!(
            "{}: label {:?} differs from image {:?}",
            path.display(),
            label.dims(),
            image.dims()
        )));
    }
    Ok(SliceSample {
        image: Grid2::from_vec(h, w, to_f32(image)?),
        label: Grid2::from_vec(h, w, to_labels(label, path)?),
        case_id: case_id.to_owned(),
        slice_index,
    })
}

pub fn read_volume(path: &Path, case_id: &str) -> Result<VolumeSample> {
    let arrays = read_npz(path)?;
    let image = array(&arrays, "image", path)?;
    let label = array(&arrays, "label", path)?;
    let (d, h, w) = image.dims3().map_err(|_| {
        data_err(format!("{}: volume image must be 3D, got {:?}", path.display(), image.dims()))
    })?;
    if label.dims() != [d, h, w] {
        return Err(data_err(format!(
            "{}: label {:?} differs from image {:?}",
            path.display(),
            label.dims(),
            image.dims()
        )));
    }
    if d == 0 {
        return Err(data_err(format!("{}: volume has no slices", path.display())));
    }
    let spacing = match arrays.get("spacing") {
        Some(s) => {
            let v = to_f32(s)?;
            if v.len() != 3 {
                return Err(data_err(format!("{}: spacing must have 3 entries", path.display())));
            }
            Some([v[0], v[1], v[2]])
        }
        None => None,
    };
    Ok(VolumeSample {
        image: Volume::from_vec(d, h, w, to_f32(image)?),
        label: Volume::from_vec(d, h, w, to_labels(label, path)?),
        case_id: case_id.to_owned(),
        spacing,
    })
}

pub fn write_slice(path: &Path, s: &SliceSample) -> Result<()> {
    let (h, w) = s.image.shape();
    let dev = Device::Cpu;
    let image = Tensor::from_slice(&s.image.data, (h, w), &dev)?;
    let label = Tensor::from_slice(&s.label.data, (h, w), &dev)?;
    Tensor::write_npz(&[("image", &image), ("label", &label)], path)?;
    Ok(())
}

pub fn write_volume(path: &Path, v: &VolumeSample) -> Result<()> {
    let (d, h, w) = v.image.shape();
    let dev = Device::Cpu;
    let image = Tensor::from_slice(&v.image.data, (d, h, w), &dev)?;
    let label = Tensor::from_slice(&v.label.data, (d, h, w), &dev)?;
    match v.spacing {
        Some(s) => {
            let spacing = Tensor::from_slice(&s, 3, &dev)?;
            Tensor::write_npz(
                &[("image", &image), ("label", &label), ("spacing", &spacing)],
                path,
            )?
        }
        None => Tensor::write_npz(&[("image", &image), ("label", &label)], path)?,
    }
    Ok(())
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| UdfaError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_manifest(root: &Path) -> Result<DataManifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(data_err(format!("manifest not found: {}", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| UdfaError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("bad manifest {}: {e}", path.display())))
}

/// Hashes every `.npz` under the layout directories and writes `manifest.json`.
pub fn write_manifest(root: &Path, dataset: DatasetKind) -> Result<DataManifest> {
    let mut files = Vec::new();
    for dir in [TRAIN_DIR, TEST_DIR, VOLUME_DIR] {
        let d = root.join(dir);
        if !d.is_dir() {
            continue;
        }
        for name in sorted_npz(&d)? {
            let rel = format!("{dir}/{name}");
            files.push(ManifestEntry {
                sha256: file_sha(&root.join(&rel))?,
                path: rel,
            });
        }
    }
    let manifest = DataManifest {
        dataset: dataset.as_str().to_owned(),
        files,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| UdfaError::io(&path, e))?;
    Ok(manifest)
}

fn sorted_npz(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| UdfaError::io(dir, e))? {
        let entry = entry.map_err(|e| UdfaError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".npz") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// `case0005_slice012.npz` → `("case0005", 12)`.
pub fn parse_slice_name(name: &str) -> Option<(String, usize)> {
    let stem = name.strip_suffix(".npz")?;
    let (case, idx) = stem.rsplit_once("_slice")?;
    Some((case.to_owned(), idx.parse().ok()?))
}

/// Files of the manifest, grouped and checked.
struct Catalog {
    root: PathBuf,
    entries: BTreeMap<String, String>,
    verify: bool,
}

impl Catalog {
    fn open(root: &Path, verify: bool) -> Result<Self> {
        let manifest = read_manifest(root)?;
        let entries = manifest
            .files
            .into_iter()
            .map(|e| (e.path, e.sha256))
            .collect();
        Ok(Catalog {
            root: root.to_owned(),
            entries,
            verify,
        })
    }

    /// Resolves a manifest-relative path, checking its checksum.
    fn file(&self, rel: &str) -> Result<PathBuf> {
        let expected = self
            .entries
            .get(rel)
            .ok_or_else(|| data_err(format!("{rel} is not listed in the manifest")))?;
        let path = self.root.join(rel);
        if !path.is_file() {
            return Err(data_err(format!("missing file {}", path.display())));
        }
        if self.verify {
            let got = file_sha(&path)?;
            if &got != expected {
                return Err(data_err(format!(
                    "checksum mismatch for {rel}: manifest {expected}, file {got}"
                )));
            }
        }
        Ok(path)
    }

    fn in_dir<'a>(&'a self, dir: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .keys()
            .filter_map(move |p| p.strip_prefix(dir).and_then(|r| r.strip_prefix('/')))
    }

    /// Slice files per case id.
    fn train_slices(&self) -> BTreeMap<String, Vec<(usize, String)>> {
        let mut by_case: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for name in self.in_dir(TRAIN_DIR) {
            if let Some((case, idx)) = parse_slice_name(name) {
                by_case
                    .entry(case)
                    .or_default()
                    .push((idx, format!("{TRAIN_DIR}/{name}")));
            }
        }
        for v in by_case.values_mut() {
            v.sort();
        }
        by_case
    }

    fn volume_ids(&self, dir: &str) -> BTreeSet<String> {
        self.in_dir(dir)
            .filter_map(|n| n.strip_suffix(".npz").map(String::from))
            .collect()
    }
}

fn require(have: &BTreeSet<String>, want: &[String], what: &str) -> Result<()> {
    let missing: Vec<&String> = want.iter().filter(|c| !have.contains(*c)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(data_err(format!("missing {what} cases: {missing:?}")))
    }
}

fn load_train_cases(cat: &Catalog, cases: &[String], opts: &LoadOptions) -> Result<Vec<SliceSample>> {
    let slices = cat.train_slices();
    let have: BTreeSet<String> = slices.keys().cloned().collect();
    require(&have, cases, "training")?;
    let mut out = Vec::new();
    for case in cases {
        for (idx, rel) in &slices[case] {
            let s = read_slice(&cat.file(rel)?, case, *idx)?;
            out.push(match opts.train_resize {
                Some((h, w)) => resize_sample(&s, h, w),
                None => s,
            });
        }
    }
    Ok(out)
}

fn load_volumes(cat: &Catalog, dir: &str, cases: &[String]) -> Result<Vec<VolumeSample>> {
    require(&cat.volume_ids(dir), cases, "volume")?;
    cases
        .iter()
        .map(|c| read_volume(&cat.file(&format!("{dir}/{c}.npz"))?, c))
        .collect()
}

fn slices_of(v: &VolumeSample, resize: Option<(usize, usize)>) -> Vec<SliceSample> {
    v.to_slices()
        .into_iter()
        .map(|s| match resize {
            Some((h, w)) => resize_sample(&s, h, w),
            None => s,
        })
        .collect()
}

/// Loads the benchmark split for `dataset` from `root`, verifying the manifest
/// and rejecting any case that appears in both training and held-out data.
pub fn load_split(dataset: DatasetKind, root: &Path, opts: &LoadOptions) -> Result<SplitData> {
    let cat = Catalog::open(root, opts.verify_checksums)?;
    let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let split = match dataset {
        DatasetKind::Synapse => SplitData {
            train: load_train_cases(&cat, &owned(&SYNAPSE_TRAIN_CASES), opts)?,
            eval: load_volumes(&cat, TEST_DIR, &owned(&SYNAPSE_TEST_CASES))?,
            val: Vec::new(),
        },
        DatasetKind::Acdc => {
            let (train, val, test) = acdc_split();
            let mut slices = Vec::new();
            for v in load_volumes(&cat, VOLUME_DIR, &train)? {
                slices.extend(slices_of(&v, opts.train_resize));
            }
            SplitData {
                train: slices,
                eval: load_volumes(&cat, VOLUME_DIR, &test)?,
                val: load_volumes(&cat, VOLUME_DIR, &val)?,
            }
        }
        DatasetKind::Synthetic => {
            let train: Vec<String> = cat.train_slices().keys().cloned().collect();
            let eval: Vec<String> = cat.volume_ids(TEST_DIR).into_iter().collect();
            SplitData {
                train: load_train_cases(&cat, &train, opts)?,
                eval: load_volumes(&cat, TEST_DIR, &eval)?,
                val: Vec::new(),
            }
        }
    };
    let leaked = split.leaked_cases();
    if !leaked.is_empty() {
        return Err(data_err(format!("held-out cases also in training: {leaked:?}")));
    }
    Ok(split)
}

/// Options for generating a synthetic root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub num_cases: usize,
    pub shape: (usize, usize, usize),
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            num_cases: 5,
            shape: (8, 64, 64),
            num_classes: 3,
            seed: 0,
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| UdfaError::io(p, e))
}

/// Writes a synthetic dataset root in the Synapse layout.
pub fn write_synthetic_root(root: &Path, opts: &SynthOptions) -> Result<DataManifest> {
    let split = synth_dataset(opts.num_cases, opts.shape, opts.num_classes, opts.seed);
    mkdir(&root.join(TRAIN_DIR))?;
    mkdir(&root.join(TEST_DIR))?;
    for s in &split.train {
        let name = format!("{}_slice{:03}.npz", s.case_id, s.slice_index);
        write_slice(&root.join(TRAIN_DIR).join(name), s)?;
    }
    for v in &split.eval {
        write_volume(&root.join(TEST_DIR).join(format!("{}.npz", v.case_id)), v)?;
    }
    write_manifest(root, DatasetKind::Synthetic)
}

/// `prepare-data`: generates synthetic data, or checks a benchmark root's
/// layout and writes its manifest.
pub fn prepare_data(dataset: DatasetKind, root: &Path, synth: &SynthOptions) -> Result<DataManifest> {
    match dataset {
        DatasetKind::Synthetic => write_synthetic_root(root, synth),
        DatasetKind::Synapse | DatasetKind::Acdc => {
            if !root.is_dir() {
                return Err(data_err(format!("dataset root {} does not exist", root.display())));
            }
            let manifest = write_manifest(root, dataset)?;
            // a full load validates case lists and array shapes
            load_split(dataset, root, &LoadOptions::default())?;
            Ok(manifest)
        }
    }
}

/// Every slice of `v`, resampled to the network input size.
pub fn volume_to_model_slices(v: &VolumeSample, (h, w): (usize, usize)) -> Vec<SliceSample> {
    slices_of(v, Some((h, w)))
}

/// Stacks per-slice predictions and resamples them (nearest) to the volume's grid.
pub fn reassemble(preds: &[Grid2<u8>], v: &VolumeSample) -> Result<Volume<u8>> {
    let (d, h, w) = v.label.shape();
    if preds.len() != d {
        return Err(UdfaError::Shape(format!(
            "{} predicted slices for a volume of {d}",
            preds.len()
        )));
    }
    let resized: Vec<Grid2<u8>> = preds.iter().map(|p| resize_nearest(p, h, w)).collect();
    Volume::stack(&resized).ok_or_else(|| UdfaError::Shape("cannot stack predictions".into()))
}

/// Single-channel slices replicated to 3 channels: `(B, 3, H, W)` images and
/// `(B, H, W)` u32 labels. All samples must share one size.
pub fn batch_tensors(samples: &[SliceSample], device: &Device) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| data_err("empty batch"))?;
    let (h, w) = first.image.shape();
    let mut img = Vec::with_capacity(samples.len() * h * w);
    let mut lab = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != (h, w) || s.label.shape() != (h, w) {
            return Err(UdfaError::Shape(format!(
                "batch mixes sizes {:?} and {:?}",
                (h, w),
                s.image.shape()
            )));
        }
        img.extend_from_slice(&s.image.data);
        lab.extend(s.label.data.iter().map(|&v| v as u32));
    }
    let b = samples.len();
    let images = Tensor::from_vec(img, (b, 1, h, w), device)?.repeat((1, 3, 1, 1))?;
    let labels = Tensor::from_vec(lab, (b, h, w), device)?;
    Ok((images, labels))
}

/// Resamples an image grid for display or inference.
pub fn resize_image(img: &Grid2<f32>, h: usize, w: usize) -> Grid2<f32> {
    resize_bilinear(img, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_names() {
        assert_eq!(parse_slice_name("case0005_slice012.npz"), Some(("case0005".into(), 12)));
        assert_eq!(parse_slice_name("case0005.npz"), None);
    }

    #[test]
    fn empty_root_reports_missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(DatasetKind::Synapse, dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("manifest not found"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn synthetic_root_round_trip_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            num_cases: 3,
            shape: (4, 16, 16),
            num_classes: 3,
            seed: 5,
        };
        write_synthetic_root(dir.path(), &opts).unwrap();
        let split = load_split(DatasetKind::Synthetic, dir.path(), &LoadOptions::default()).unwrap();
        let direct = synth_dataset(3, (4, 16, 16), 3, 5);
        assert_eq!(split.train, direct.train);
        assert_eq!(split.eval, direct.eval);
        // corrupt one file
        let victim = dir.path().join(TEST_DIR).join(format!("{}.npz", direct.eval[0].case_id));
        let mut bytes = fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n - 30] ^= 0xff;
        fs::write(&victim, bytes).unwrap();
        let err = load_split(DatasetKind::Synthetic, dir.path(), &LoadOptions::default()).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn slicing_round_trip() {
        let split = synth_dataset(2, (3, 20, 24), 3, 1);
        let v = &split.eval[0];
        let slices = volume_to_model_slices(v, (20, 24));
        assert_eq!(slices.len(), 3);
        let preds: Vec<Grid2<u8>> = slices.iter().map(|s| s.label.clone()).collect();
        assert_eq!(reassemble(&preds, v).unwrap(), v.label);
        let small = volume_to_model_slices(v, (10, 12));
        let up: Vec<Grid2<u8>> = small.iter().map(|s| s.label.clone()).collect();
        assert_eq!(reassemble(&up, v).unwrap().shape(), (3, 20, 24));
        assert!(reassemble(&preds[..2], v).is_err());
    }

    #[test]
    fn batches_replicate_channels() {
        let split = synth_dataset(2, (2, 8, 8), 3, 0);
        let (x, y) = batch_tensors(&split.train, &Device::Cpu).unwrap();
        assert_eq!(x.dims(), &[2, 3, 8, 8]);
        assert_eq!(y.dims(), &[2, 8, 8]);
        let c0 = x.narrow(1, 0, 1).unwrap();
        let c2 = x.narrow(1, 2, 1).unwrap();
        let d = (c0 - c2).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }
}
