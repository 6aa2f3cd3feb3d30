//! Training, volume-wise evaluation, and the ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use udfa_core::array::{Grid2, SliceSample, VolumeSample};
use udfa_core::augment::{augment, AugmentOptions};
use udfa_core::labels::foreground_names;
use udfa_core::metrics::{case_metrics, dice_score, Labels, MaskShape};
use udfa_core::rng::{below, indexed_stream, stream};
use udfa_core::{DatasetKind, ModelConfig, RunConfig, SplitData};

use crate::checkpoint;
use crate::config_io::{config_hash, write_resolved};
use crate::data::{batch_tensors, reassemble, volume_to_model_slices};
use crate::loss::{dice_ce_loss, LossValue};
use crate::model::UDfa;
use crate::optim::{poly_lr, Adam};
use crate::report::{CaseReport, VolumeEvalReport};
use crate::{Result, UdfaError};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Write `checkpoints/epoch_XXX` after every epoch.
    pub checkpoint_every_epoch: bool,
    /// Write checkpoints and logs at all.
    pub write_outputs: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            checkpoint_every_epoch: true,
            write_outputs: true,
        }
    }
}

pub struct TrainOutcome {
    pub model: UDfa,
    pub history: Vec<LogRow>,
    pub epochs: usize,
    /// Checkpoint stem chosen for evaluation: `best` when a validation split
    /// exists, else `last`.
    pub selected_checkpoint: Option<PathBuf>,
    pub best_val_dsc: Option<f64>,
}

impl TrainOutcome {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

pub fn augment_options(cfg: &RunConfig) -> AugmentOptions {
    AugmentOptions {
        flip: cfg.train.aug_flip,
        rotation: cfg.train.aug_rotation,
        intensity: cfg.train.aug_intensity,
        ..AugmentOptions::default()
    }
}

/// Total optimizer steps: `max_iterations` if set, else epochs × batches per epoch.
pub fn planned_iterations(cfg: &RunConfig, num_slices: usize) -> usize {
    let per_epoch = num_slices.div_ceil(cfg.train.batch_size.max(1));
    cfg.train
        .max_iterations
        .unwrap_or(cfg.train.max_epochs * per_epoch)
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(seed, &format!("shuffle.{epoch}"));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, below(&mut rng, i + 1));
    }
    idx
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut s = String::from("iteration,epoch,lr,total,dice,ce\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6e},{:.6},{:.6},{:.6}",
            r.iteration, r.epoch, r.lr, r.loss.total, r.loss.dice_term, r.loss.ce_term
        );
    }
    fs::write(path, s).map_err(|e| UdfaError::io(path, e))
}

/// Trains a freshly initialized model on `split.train`.
pub fn train(cfg: &RunConfig, split: &SplitData, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let model = UDfa::new(&cfg.model, cfg.train.seed, &Device::Cpu)?;
    train_model(model, cfg, split, out_dir, opts)
}

/// Trains `model` in place. Slices are augmented from per-sample streams,
/// so a given iteration sees the same batch regardless of history.
pub fn train_model(
    model: UDfa,
    cfg: &RunConfig,
    split: &SplitData,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let slices = &split.train;
    if slices.is_empty() {
        return Err(UdfaError::Data("no training slices".into()));
    }
    let hash = config_hash(cfg);
    let ck_dir = out_dir.join(CHECKPOINT_DIR);
    if opts.write_outputs {
        write_resolved(cfg, out_dir)?;
    }
    let report = model.parameter_report();
    log::info!(
        "trainable {} / frozen {} parameters ({:.2}%)",
        report.trainable_count,
        report.frozen_count,
        100.0 * report.trainable_fraction
    );
    let aug = augment_options(cfg);
    let size = (cfg.model.height(), cfg.model.width());
    let max_it = planned_iterations(cfg, slices.len());
    let bs = cfg.train.batch_size;
    let mut adam = Adam::new(model.trainable_vars(), cfg.train.weight_decay)?;
    let mut history = Vec::with_capacity(max_it);
    let mut best: Option<f64> = None;
    let mut selected = None;
    let mut epoch = 0;
    while history.len() < max_it {
        let order = shuffled(slices.len(), cfg.train.seed, epoch);
        for chunk in order.chunks(bs) {
            let it = history.len();
            if it >= max_it {
                break;
            }
            let batch: Vec<SliceSample> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = indexed_stream(cfg.train.seed, "augment", (it * bs + k) as u64);
                    augment(&slices[i], &aug, size, &mut rng)
                })
                .collect();
            let (x, y) = batch_tensors(&batch, model.device())?;
            let logits = model.forward(&x, true)?;
            let loss = match dice_ce_loss(&logits, &y, cfg.train.w_dice, cfg.train.w_ce) {
                Ok(l) => l,
                Err(UdfaError::NonFinite(_)) => {
                    let value = dice_ce_loss(&logits.detach(), &y, cfg.train.w_dice, cfg.train.w_ce)
                        .map(|l| l.value.total)
                        .unwrap_or(f64::NAN);
                    let ids: Vec<String> =
                        batch.iter().map(|s| format!("{}#{}", s.case_id, s.slice_index)).collect();
                    return Err(UdfaError::NonFiniteLoss {
                        value,
                        iteration: it,
                        batch: ids.join(", "),
                    });
                }
                Err(e) => return Err(e),
            };
            let lr = poly_lr(cfg.train.base_lr, it, max_it, cfg.train.lr_power);
            let grads = loss.total.backward()?;
            adam.step(&grads, lr)?;
            history.push(LogRow {
                iteration: it,
                epoch,
                lr,
                loss: loss.value,
            });
            if it % 50 == 0 {
                log::info!(
                    "it {it} epoch {epoch} lr {lr:.3e} loss {:.4} (dice {:.4}, ce {:.4})",
                    loss.value.total,
                    loss.value.dice_term,
                    loss.value.ce_term
                );
            }
        }
        if opts.write_outputs {
            write_log(&out_dir.join(TRAIN_LOG_FILE), &history)?;
            if opts.checkpoint_every_epoch {
                checkpoint::save(&model, &ck_dir.join(format!("epoch_{epoch:03}")), &hash, history.len(), epoch)?;
            }
            checkpoint::save(&model, &ck_dir.join("last"), &hash, history.len(), epoch)?;
            if !split.val.is_empty() {
                let dsc = validation_dsc(&model, &split.val, cfg.model.num_classes)?;
                log::info!("epoch {epoch}: validation DSC {:.4}", dsc);
                if best.is_none_or(|b| dsc > b) {
                    best = Some(dsc);
                    checkpoint::save(&model, &ck_dir.join("best"), &hash, history.len(), epoch)?;
                }
            }
        }
        epoch += 1;
    }
    if opts.write_outputs {
        selected = Some(ck_dir.join(if best.is_some() { "best" } else { "last" }));
    }
    Ok(TrainOutcome {
        model,
        history,
        epochs: epoch,
        selected_checkpoint: selected,
        best_val_dsc: best,
    })
}

/// Argmax label map per slice of a `(B, 3, H, W)` batch.
pub fn predict_batch(model: &UDfa, images: &Tensor) -> Result<Vec<Grid2<u8>>> {
    let (b, _, h, w) = images.dims4()?;
    let logits = model.forward(images, false)?;
    let am = logits.argmax(1)?.to_dtype(DType::U32)?.flatten_all()?.to_vec1::<u32>()?;
    Ok((0..b)
        .map(|i| Grid2::from_vec(h, w, am[i * h * w..(i + 1) * h * w].iter().map(|&v| v as u8).collect()))
        .collect())
}

/// Slice-wise inference at the model input size, reassembled to the volume grid.
pub fn predict_volume(model: &UDfa, v: &VolumeSample, batch_size: usize) -> Result<udfa_core::array::Volume<u8>> {
    let slices = volume_to_model_slices(v, (model.cfg.height(), model.cfg.width()));
    let mut preds = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let (x, _) = batch_tensors(chunk, model.device())?;
        preds.extend(predict_batch(model, &x)?);
    }
    reassemble(&preds, v)
}

fn validation_dsc(model: &UDfa, val: &[VolumeSample], num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for v in val {
        let pred = predict_volume(model, v, 8)?;
        let (d, h, w) = v.label.shape();
        let shape = MaskShape::d3(d, h, w);
        for c in 1..num_classes as u8 {
            total += dice_score(Labels::new(&pred.data, shape), Labels::new(&v.label.data, shape), c);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Save `image`, `label`, `pred` per case as `<case>.npz` here.
    pub prediction_dir: Option<PathBuf>,
    /// Dump attention maps of the middle slice of the first case here.
    pub attention_dump: Option<PathBuf>,
    pub batch_size: usize,
}

/// Volume-wise evaluation of `model` on `volumes`.
pub fn evaluate(
    model: &UDfa,
    volumes: &[VolumeSample],
    dataset: DatasetKind,
    opts: &EvalOptions,
) -> Result<VolumeEvalReport> {
    let nc = model.cfg.num_classes;
    let names = foreground_names(dataset, nc);
    let mut cases = Vec::with_capacity(volumes.len());
    if let Some(dir) = &opts.prediction_dir {
        fs::create_dir_all(dir).map_err(|e| UdfaError::io(dir, e))?;
    }
    for v in volumes {
        let pred = predict_volume(model, v, opts.batch_size.max(1))?;
        let (d, h, w) = v.label.shape();
        let shape = MaskShape::d3(d, h, w);
        let spacing = v.spacing.map(|s| [s[0] as f64, s[1] as f64, s[2] as f64]);
        let m = case_metrics(
            Labels::new(&pred.data, shape),
            Labels::new(&v.label.data, shape),
            nc,
            spacing,
        );
        let case = CaseReport::new(&v.case_id, &m, &names);
        log::info!("{}: mean DSC {:.4}", v.case_id, case.mean_dsc);
        cases.push(case);
        if let Some(dir) = &opts.prediction_dir {
            let dev = Device::Cpu;
            let image = Tensor::from_slice(&v.image.data, (d, h, w), &dev)?;
            let label = Tensor::from_slice(&v.label.data, (d, h, w), &dev)?;
            let p = Tensor::from_slice(&pred.data, (d, h, w), &dev)?;
            let path = dir.join(format!("{}.npz", v.case_id));
            Tensor::write_npz(&[("image", &image), ("label", &label), ("pred", &p)], &path)?;
        }
    }
    if let (Some(path), Some(v)) = (&opts.attention_dump, volumes.first()) {
        dump_attention(model, v, path)?;
    }
    let mut report = VolumeEvalReport::aggregate(dataset, nc, cases);
    report.prediction_dir = opts.prediction_dir.as_ref().map(|p| p.display().to_string());
    Ok(report)
}

/// Writes `inject_<i>` `(heads, K, M)` and `refresh_<i>` `(heads, M, K)`
/// attention weights for the middle slice of `v`.
pub fn dump_attention(model: &UDfa, v: &VolumeSample, path: &Path) -> Result<()> {
    let slices = volume_to_model_slices(v, (model.cfg.height(), model.cfg.width()));
    let mid = &slices[slices.len() / 2];
    let (x, _) = batch_tensors(std::slice::from_ref(mid), model.device())?;
    let state = model.encode_with_attention(&x)?;
    let mut named = Vec::new();
    for (i, a) in state.attention.iter().enumerate() {
        named.push((format!("inject_{i}"), a.inject.squeeze(0)?));
        named.push((format!("refresh_{i}"), a.refresh.squeeze(0)?));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| UdfaError::io(dir, e))?;
    }
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    Tensor::write_npz(&refs, path)?;
    Ok(())
}

/// Loads the checkpoint stem into a model built from `cfg`.
pub fn load_model(cfg: &RunConfig, stem: &Path) -> Result<UDfa> {
    let model = UDfa::new(&cfg.model, cfg.train.seed, &Device::Cpu)?;
    checkpoint::load(&model, stem, Some(&config_hash(cfg)))?;
    Ok(model)
}

/// Ablation grid: every combination of stage count and input side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationGrid {
    pub n_lgfa: Vec<usize>,
    pub input: Vec<usize>,
}

impl AblationGrid {
    /// Parses entries like `n_lgfa=2,3,6` and `input=224,308`. Axes not
    /// given keep the base config value.
    pub fn parse(entries: &[String], base: &ModelConfig) -> Result<Self> {
        let mut grid = AblationGrid {
            n_lgfa: vec![base.num_stages],
            input: vec![base.height()],
        };
        for e in entries {
            for part in e.split(';').filter(|p| !p.trim().is_empty()) {
                let (k, v) = part.split_once('=').ok_or_else(|| {
                    UdfaError::Config(udfa_core::ConfigError::InvalidValue {
                        key: "grid".into(),
                        value: part.into(),
                        reason: "expected axis=v1,v2,...".into(),
                    })
                })?;
                let values = v
                    .split(',')
                    .map(|x| x.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| {
                        UdfaError::Config(udfa_core::ConfigError::InvalidValue {
                            key: k.trim().into(),
                            value: v.into(),
                            reason: "expected comma-separated integers".into(),
                        })
                    })?;
                match k.trim() {
                    "n_lgfa" | "num_stages" => grid.n_lgfa = values,
                    "input" | "input_size" => grid.input = values,
                    other => {
                        return Err(UdfaError::Config(udfa_core::ConfigError::UnknownKey(other.into())))
                    }
                }
            }
        }
        Ok(grid)
    }

    pub fn variants(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &n in &self.n_lgfa {
            for &s in &self.input {
                let mut m = base.clone().with_input_size(s, s);
                m.num_stages = n;
                out.push(m);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub n_lgfa: usize,
    pub input: usize,
    pub blocks_per_stage: usize,
    pub tokens: usize,
    pub spa_tokens: usize,
    pub trainable_params: usize,
    /// Structural check result: `ok` or the failure.
    pub status: String,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
    /// Per foreground class, empty in structure-only runs.
    pub class_dsc: Vec<f64>,
}

/// Builds each variant, checks module count, token counts and output shape,
/// and, unless `structure_only`, trains and evaluates it on `split`.
pub fn ablate(
    base: &RunConfig,
    grid: &AblationGrid,
    split: Option<&SplitData>,
    structure_only: bool,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for m in grid.variants(&base.model) {
        let mut row = AblationRow {
            n_lgfa: m.num_stages,
            input: m.height(),
            blocks_per_stage: m.blocks_per_stage(),
            tokens: m.num_tokens(),
            spa_tokens: m.spa_token_count(),
            trainable_params: 0,
            status: String::new(),
            mean_dsc: None,
            mean_hd95: None,
            class_dsc: Vec::new(),
        };
        match check_structure(&m, base.train.seed) {
            Ok(model) => {
                row.trainable_params = model.parameter_report().trainable_count;
                row.status = "ok".into();
                if let (false, Some(split)) = (structure_only, split) {
                    let mut cfg = base.clone();
                    cfg.model = m.clone();
                    let dir = out_dir.join(format!("n{}_s{}", row.n_lgfa, row.input));
                    let outcome = train_model(model, &cfg, split, &dir, &TrainOptions::default())?;
                    let report = evaluate(&outcome.model, &split.eval, cfg.train.dataset, &EvalOptions::default())?;
                    report.write(&dir)?;
                    row.mean_dsc = Some(report.mean_dsc);
                    row.mean_hd95 = report.mean_hd95;
                    row.class_dsc = report.class_mean_dsc.clone();
                }
            }
            Err(e) => row.status = e.to_string(),
        }
        rows.push(row);
    }
    fs::create_dir_all(out_dir).map_err(|e| UdfaError::io(out_dir, e))?;
    let names = foreground_names(base.train.dataset, base.model.num_classes);
    let csv = ablation_csv(&rows, &names);
    let p = out_dir.join("ablation.csv");
    fs::write(&p, csv).map_err(|e| UdfaError::io(&p, e))?;
    let p = out_dir.join("ablation.txt");
    fs::write(&p, ablation_table(&rows)).map_err(|e| UdfaError::io(&p, e))?;
    Ok(rows)
}

fn check_structure(m: &ModelConfig, seed: u64) -> Result<UDfa> {
    let model = UDfa::new(m, seed, &Device::Cpu)?;
    if model.lgfa.len() != m.num_stages || model.backbone.num_stages() != m.num_stages {
        return Err(UdfaError::Shape(format!(
            "{} fusion modules and {} backbone stages for n_lgfa = {}",
            model.lgfa.len(),
            model.backbone.num_stages(),
            m.num_stages
        )));
    }
    let x = Tensor::zeros((1, 3, m.height(), m.width()), DType::F32, model.device())?;
    let state = model.encode(&x, false)?;
    if state.f_dino.len() != m.num_tokens() || state.f_spa.len() != m.spa_token_count() {
        return Err(UdfaError::Shape(format!(
            "token counts {} / {}, expected {} / {}",
            state.f_dino.len(),
            state.f_spa.len(),
            m.num_tokens(),
            m.spa_token_count()
        )));
    }
    let logits = model.decode(&model.bottleneck(&state)?, &state.skips, (m.height(), m.width()), false)?;
    if logits.dims() != [1, m.num_classes, m.height(), m.width()] {
        return Err(UdfaError::Shape(format!("logits {:?}", logits.dims())));
    }
    Ok(model)
}

fn opt(v: Option<f64>, scale: f64) -> String {
    v.map_or(String::new(), |x| format!("{:.2}", x * scale))
}

/// Input size, stage count, DSC, HD, then per-class DSC (percent).
pub fn ablation_csv(rows: &[AblationRow], class_names: &[String]) -> String {
    let mut s = String::from("Input Size,No. of LGFA,DSC,HD");
    for n in class_names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{},{}", r.input, r.n_lgfa, opt(r.mean_dsc, 100.0), opt(r.mean_hd95, 1.0));
        for k in 0..class_names.len() {
            s.push(',');
            s.push_str(&opt(r.class_dsc.get(k).copied(), 100.0));
        }
        s.push('\n');
    }
    s
}

/// Structural columns and status per variant, for humans.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:>6} {:>6} {:>6} {:>7} {:>9} {:>10} {:>7} {:>7}  status\n",
        "n_lgfa", "input", "L/N", "tokens", "spa_tok", "params", "DSC", "HD95"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>7} {:>9} {:>10} {:>7} {:>7}  {}",
            r.n_lgfa,
            r.input,
            r.blocks_per_stage,
            r.tokens,
            r.spa_tokens,
            r.trainable_params,
            opt(r.mean_dsc, 100.0),
            opt(r.mean_hd95, 1.0),
            r.status
        );
    }
    s
}
