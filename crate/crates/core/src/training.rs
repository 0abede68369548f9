//! Dataset construction, subject-level splits, the SSIM-loss training loop,
//! evaluation and the ablation runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, checkpoint, lr_schedule, AdamState, BnState, Graph, Mode, NamedTensors, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, MetricsReport, ReportRow, SsimParams};
use crate::model::{init_params, CbamPlacement, Model, NetConfig, PriorSet};
use crate::motion::{corrupt_subject, MotionTrajectory, Severity, SimConfig};
use crate::phantom::make_contrast_variant;
use crate::seed;
use crate::volume::{extract_triplet, normalize_volume, Slice, SliceTriplet, Volume};

/// Stream indices under the run seed.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_EXTRA: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Every subject is corrupted once under each preset.
    pub presets: Vec<Severity>,
    pub pe_only: bool,
    /// Attach a synthetic contrast variant of each clean volume as the extra
    /// prior.
    pub extra_prior: bool,
    pub p_lo: f64,
    pub p_hi: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            presets: Severity::ALL.to_vec(),
            pe_only: false,
            extra_prior: false,
            p_lo: 0.5,
            p_hi: 99.5,
            test_fraction: 0.2,
            val_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub seed: u64,
    /// Adds `0.5 * loss(pred1)` to the stage-2 loss.
    pub deep_supervision: bool,
    pub ssim: SsimParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::paper(),
            data: DataConfig::default(),
            batch_size: 10,
            epochs: 50,
            lr0: 1e-3,
            seed: 0,
            deep_supervision: false,
            ssim: SsimParams::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: toy network, batch 4, 15 epochs.
    pub fn toy() -> Self {
        TrainConfig {
            net: NetConfig::toy(),
            batch_size: 4,
            epochs: 15,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.ssim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0", "must be positive"));
        }
        if self.data.presets.is_empty() {
            return Err(Error::config("data.presets", "needs at least one preset"));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) || !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("data.test_fraction", "fractions must lie in [0, 1)"));
        }
        if self.net.priors.uses_extra() && !self.data.extra_prior {
            return Err(Error::config("data.extra_prior", "network uses the extra prior but the dataset has none"));
        }
        Ok(())
    }
}

/// One training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    /// Corrupted center slice and corrupted neighbours.
    pub input: SliceTriplet,
    /// Clean center slice.
    pub target: Slice,
    pub severity: Severity,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
    pub subjects: Vec<String>,
    /// Per subject: the per-slice trajectories of each preset in order.
    pub trajectories: BTreeMap<String, Vec<MotionTrajectory>>,
}

/// Normalizes, corrupts and slices every subject. Subject `k` is corrupted
/// once per preset `j` in `data.presets`, with simulation seed
/// `mix(mix(seed, k), j)`; each corrupted copy contributes one pair per slice.
pub fn build_dataset(volumes: &[(String, Volume)], seed_v: u64, data: &DataConfig) -> Result<Dataset> {
    if volumes.len() < 2 {
        return Err(Error::config("subjects", format!("need at least 2 subjects, got {}", volumes.len())));
    }
    if data.presets.is_empty() {
        return Err(Error::config("data.presets", "needs at least one preset"));
    }
    let mut ids = BTreeSet::new();
    for (id, _) in volumes {
        if !ids.insert(id) {
            return Err(Error::config("subjects", format!("duplicate subject id {id:?}")));
        }
    }
    let data_seed = seed::mix(seed_v, STREAM_DATA);
    let sim = SimConfig { pe_only: data.pe_only };
    let mut pairs = Vec::new();
    let mut trajectories = BTreeMap::new();
    for (k, (id, raw)) in volumes.iter().enumerate() {
        let clean = normalize_volume(raw, data.p_lo, data.p_hi)?;
        let targets = (0..clean.dims()[2]).map(|z| clean.slice(z)).collect::<Result<Vec<_>>>()?;
        let extra = if data.extra_prior {
            Some(make_contrast_variant(&clean, seed::mix(seed::mix(seed_v, STREAM_EXTRA), k as u64))?)
        } else {
            None
        };
        let mut subject_trajs = Vec::new();
        for (j, &severity) in data.presets.iter().enumerate() {
            let sim_seed = seed::mix(seed::mix(data_seed, k as u64), j as u64);
            let (corrupted, trajs) = corrupt_subject(&clean, sim_seed, &severity.preset(), &sim)?;
            let corrupted = corrupted.map(|v| v.clamp(0.0, 1.0))?;
            for (z, target) in targets.iter().enumerate() {
                pairs.push(Pair {
                    input: extract_triplet(&corrupted, z, extra.as_ref(), id)?,
                    target: target.clone(),
                    severity,
                });
            }
            subject_trajs.extend(trajs);
        }
        trajectories.insert(id.clone(), subject_trajs);
    }
    Ok(Dataset {
        pairs,
        subjects: volumes.iter().map(|(id, _)| id.clone()).collect(),
        trajectories,
    })
}

/// Subject-level split. Validation images are drawn from the training
/// subjects' images when the dataset is partitioned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub val_fraction: f64,
}

/// Shuffles `ids` with `seed` and sends `floor(test_fraction * n)` (at least
/// one) subjects to test.
pub fn split_subjects(ids: &[String], seed_v: u64, test_fraction: f64, val_fraction: f64) -> Result<DatasetSplit> {
    if ids.len() < 2 {
        return Err(Error::config("subjects", "need at least 2 subjects to split"));
    }
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::config("subjects", "subject ids must be unique"));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.shuffle(&mut seed::child_rng(seed_v, STREAM_SPLIT));
    let n_test = ((test_fraction * ids.len() as f64).floor() as usize).max(1);
    let test_subjects = order[..n_test].to_vec();
    let train_subjects = order[n_test..].to_vec();
    Ok(DatasetSplit { seed: seed_v, train_subjects, test_subjects, val_fraction })
}

/// Pair indices per role.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Assigns pairs by subject; `max(1, floor(val_fraction * n))` of the
    /// training-subject images go to validation.
    pub fn partition(&self, ds: &Dataset) -> Result<Partition> {
        let train_set: BTreeSet<&str> = self.train_subjects.iter().map(String::as_str).collect();
        let test_set: BTreeSet<&str> = self.test_subjects.iter().map(String::as_str).collect();
        let mut pool = Vec::new();
        let mut test = Vec::new();
        for (i, p) in ds.pairs.iter().enumerate() {
            let id = p.input.subject_id.as_str();
            if test_set.contains(id) {
                test.push(i);
            } else if train_set.contains(id) {
                pool.push(i);
            } else {
                return Err(Error::config("split", format!("subject {id:?} is in neither split")));
            }
        }
        if pool.is_empty() {
            return Err(Error::config("split", "no training images"));
        }
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut seed::child_rng(self.seed, STREAM_SPLIT ^ 0xFF));
        let n_val = ((self.val_fraction * pool.len() as f64).floor() as usize).max(1).min(pool.len() - 1);
        let mut val: Vec<usize> = shuffled[..n_val].to_vec();
        val.sort_unstable();
        let val_set: BTreeSet<usize> = val.iter().copied().collect();
        let train = pool.into_iter().filter(|i| !val_set.contains(i)).collect();
        Ok(Partition { train, val, test })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Subjects and slices seen by one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub phase: String,
    pub batch: usize,
    pub items: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_config: TrainConfig,
    pub split: DatasetSplit,
}

impl Checkpoint {
    fn tensors(&self) -> NamedTensors<f32> {
        let mut t = NamedTensors::new();
        for (k, v) in &self.model.params {
            t.insert(format!("param.{k}"), v.clone());
        }
        for (k, s) in &self.model.bn {
            let c = s.running_mean.len();
            t.insert(format!("bn.{k}.running_mean"), Tensor { shape: vec![c], data: s.running_mean.clone() });
            t.insert(format!("bn.{k}.running_var"), Tensor { shape: vec![c], data: s.running_var.clone() });
        }
        for (k, v) in &self.adam.m {
            t.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in &self.adam.v {
            t.insert(format!("adam.v.{k}"), v.clone());
        }
        t
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "net_config": self.model.cfg,
            "arch_hash": self.model.cfg.arch_hash(),
            "adam_t": self.adam.t,
            "history": self.history,
            "train_config": self.train_config,
            "split": self.split,
        });
        checkpoint::encode(&self.tensors(), meta)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut tensors, meta) = checkpoint::decode(bytes)?;
        let field = |name: &str| meta.get(name).cloned().ok_or_else(|| Error::format(12, format!("manifest lacks {name}")));
        let cfg: NetConfig = serde_json::from_value(field("net_config")?)?;
        let hash: String = serde_json::from_value(field("arch_hash")?)?;
        if hash != cfg.arch_hash() {
            return Err(Error::config("checkpoint", "architecture hash does not match the stored network config"));
        }
        let mut model: Model<f32> = init_params(&cfg, 0)?;
        for (k, v) in model.params.iter_mut() {
            let t = tensors
                .remove(&format!("param.{k}"))
                .ok_or_else(|| Error::config("checkpoint", format!("missing parameter {k}")))?;
            if t.shape != v.shape {
                return Err(Error::config("checkpoint", format!("parameter {k} has shape {:?}, expected {:?}", t.shape, v.shape)));
            }
            *v = t;
        }
        for (k, s) in model.bn.iter_mut() {
            let mut take = |suffix: &str| {
                tensors
                    .remove(&format!("bn.{k}.{suffix}"))
                    .filter(|t| t.len() == s.running_mean.len())
                    .ok_or_else(|| Error::config("checkpoint", format!("missing or malformed batch-norm state {k}")))
            };
            let mean = take("running_mean")?;
            let var = take("running_var")?;
            *s = BnState { running_mean: mean.data, running_var: var.data };
        }
        let mut adam = AdamState::new(&model.params);
        adam.t = serde_json::from_value(field("adam_t")?)?;
        for (k, m) in adam.m.iter_mut() {
            *m = tensors
                .remove(&format!("adam.m.{k}"))
                .ok_or_else(|| Error::config("checkpoint", format!("missing optimizer state {k}")))?;
        }
        for (k, v) in adam.v.iter_mut() {
            *v = tensors
                .remove(&format!("adam.v.{k}"))
                .ok_or_else(|| Error::config("checkpoint", format!("missing optimizer state {k}")))?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::config("checkpoint", format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            model,
            adam,
            epoch: serde_json::from_value(field("epoch")?)?,
            history: serde_json::from_value(field("history")?)?,
            train_config: serde_json::from_value(field("train_config")?)?,
            split: serde_json::from_value(field("split")?)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }
}

/// `epoch,lr,train_loss,val_loss` rows.
pub fn curves_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", r.epoch, r.lr, r.train_loss, r.val_loss);
    }
    out
}

pub struct TrainOutcome {
    /// Lowest validation loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub batch_log: Vec<BatchRecord>,
}

fn batch_target(batch: &[&Pair]) -> Tensor<f32> {
    let (nx, ny) = batch[0].target.dims();
    let mut data = Vec::with_capacity(batch.len() * nx * ny);
    for p in batch {
        data.extend_from_slice(&p.target.data);
    }
    Tensor { shape: vec![batch.len(), 1, ny, nx], data }
}

fn record(epoch: usize, phase: &str, batch: usize, items: &[&Pair]) -> BatchRecord {
    BatchRecord {
        epoch,
        phase: phase.to_string(),
        batch,
        items: items.iter().map(|p| (p.input.subject_id.clone(), p.input.slice_index)).collect(),
    }
}

fn stage_loss(
    g: &mut Graph<f32>,
    model: &mut Model<f32>,
    params: &crate::model::ParamVars,
    batch: &[&Pair],
    mode: Mode,
    cfg: &TrainConfig,
) -> Result<crate::autodiff::Var> {
    let inputs: Vec<&SliceTriplet> = batch.iter().map(|p| &p.input).collect();
    let (pred1, pred2) = model.forward(g, params, &inputs, mode)?;
    let target = g.constant(batch_target(batch));
    let loss = g.ssim_loss(pred2, target, &cfg.ssim)?;
    if cfg.deep_supervision && cfg.net.stacked {
        let l1 = g.ssim_loss(pred1, target, &cfg.ssim)?;
        let l1 = g.scale(l1, 0.5);
        return g.add(loss, l1);
    }
    Ok(loss)
}

/// Mean stage-2 SSIM loss over `idx` in eval mode.
pub fn validation_loss(model: &mut Model<f32>, ds: &Dataset, idx: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let batch: Vec<&Pair> = chunk.iter().map(|&i| &ds.pairs[i]).collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let eval_cfg = TrainConfig { deep_supervision: false, ..cfg.clone() };
        let l = stage_loss(&mut g, model, &p, &batch, Mode::Eval, &eval_cfg)?;
        total += g.value(l).data[0] as f64 * batch.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains from scratch, or continues `resume` up to `cfg.epochs`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, split: &DatasetSplit, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let part = split.partition(ds)?;
    if part.train.is_empty() {
        return Err(Error::config("split", "empty training split"));
    }
    let mut state = match resume {
        Some(c) => {
            if c.model.cfg != cfg.net {
                return Err(Error::config("net", "resume checkpoint was trained with a different network"));
            }
            c
        }
        None => {
            let model = init_params(&cfg.net, seed::mix(cfg.seed, STREAM_INIT))?;
            let adam = AdamState::new(&model.params);
            Checkpoint { model, adam, epoch: 0, history: Vec::new(), train_config: cfg.clone(), split: split.clone() }
        }
    };
    state.train_config = cfg.clone();
    let mut best: Option<Checkpoint> = None;
    let mut best_val = state.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch as f64, cfg.lr0, cfg.epochs);
        let mut order = part.train.clone();
        order.shuffle(&mut seed::child_rng(seed::mix(cfg.seed, STREAM_SHUFFLE), epoch as u64));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &ds.pairs[i]).collect();
            log.push(record(epoch, "train", b, &batch));
            let mut g = Graph::new();
            let p = state.model.bind(&mut g, true);
            let loss = stage_loss(&mut g, &mut state.model, &p, &batch, Mode::Train, cfg)?;
            let lv = g.value(loss).data[0];
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            g.backward(loss)?;
            let mut grads = NamedTensors::new();
            for (name, v) in &p {
                if let Some(d) = g.grad(*v) {
                    if d.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numerical(format!("non-finite gradient for {name} at epoch {epoch}, batch {b}")));
                    }
                    grads.insert(name.clone(), Tensor { shape: g.shape(*v).to_vec(), data: d.to_vec() });
                }
            }
            adam_step(&mut state.model.params, &grads, &mut state.adam, lr)?;
            total += lv as f64 * batch.len() as f64;
            log::debug!("epoch {epoch} batch {b} loss {lv:.5}");
        }
        let train_loss = total / part.train.len() as f64;
        for (b, chunk) in part.val.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &ds.pairs[i]).collect();
            log.push(record(epoch, "val", b, &batch));
        }
        let val_loss = validation_loss(&mut state.model, ds, &part.val, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        log::info!("epoch {epoch} lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}");
        state.history.push(EpochRecord { epoch, lr, train_loss, val_loss });
        state.epoch += 1;
        if val_loss < best_val {
            best_val = val_loss;
            best = Some(state.clone());
        }
    }
    Ok(TrainOutcome { best: best.unwrap_or_else(|| state.clone()), last: state, batch_log: log })
}

/// Anything that maps corrupted inputs to corrected center slices.
pub trait Corrector {
    fn correct(&mut self, batch: &[&SliceTriplet]) -> Result<Vec<Slice>>;
}

impl Corrector for Model<f32> {
    fn correct(&mut self, batch: &[&SliceTriplet]) -> Result<Vec<Slice>> {
        let out = self.predict(batch)?;
        let (nx, ny) = batch[0].center.dims();
        out.data
            .chunks(nx * ny)
            .map(|c| Slice::new(nx, ny, c.to_vec()))
            .collect()
    }
}

/// Returns the corrupted center slice unchanged.
pub struct IdentityCorrector;

impl Corrector for IdentityCorrector {
    fn correct(&mut self, batch: &[&SliceTriplet]) -> Result<Vec<Slice>> {
        Ok(batch.iter().map(|t| t.center.clone()).collect())
    }
}

pub struct Evaluation {
    pub report: MetricsReport,
    /// Clipped predictions, one per evaluated pair.
    pub predictions: Vec<Slice>,
}

/// Before (corrupted vs clean) and after (prediction clipped to [0, 1] vs
/// clean) metrics for every pair.
pub fn evaluate(c: &mut dyn Corrector, pairs: &[&Pair], p: &SsimParams, batch_size: usize) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::config("test", "no pairs to evaluate"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut predictions = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let inputs: Vec<&SliceTriplet> = chunk.iter().map(|p| &p.input).collect();
        let preds = c.correct(&inputs)?;
        if preds.len() != chunk.len() {
            return Err(Error::shape(format!("{} predictions for {} inputs", preds.len(), chunk.len())));
        }
        for (pair, pred) in chunk.iter().zip(preds) {
            let pred = pred.clipped(0.0, 1.0);
            rows.push(ReportRow {
                subject_id: pair.input.subject_id.clone(),
                slice_index: pair.input.slice_index,
                condition: pair.severity.as_str().to_string(),
                before: ImageMetrics::measure(&pair.input.center, &pair.target, p)?,
                after: ImageMetrics::measure(&pred, &pair.target, p)?,
            });
            predictions.push(pred);
        }
    }
    Ok(Evaluation { report: MetricsReport::from_rows(rows, p.dynamic_range), predictions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableValues {
    pub ssim_percent: f64,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: u8,
    pub experiment: String,
    pub measured: TableValues,
    /// Published clinical-data figures, printed for orientation only.
    pub reference: TableValues,
}

const fn tv(ssim_percent: f64, mse: f64, psnr: f64) -> TableValues {
    TableValues { ssim_percent, mse, psnr }
}

pub const CORRUPTED_EXPERIMENT: &str = "corrupted input";

/// `(experiment, stacked, priors, cbam, reference)` in published row order.
type RowSpec = (&'static str, bool, PriorSet, CbamPlacement, TableValues);

pub const TABLE1_CORRUPTED: TableValues = tv(71.66, 99.25, 28.83);
pub const TABLE2_CORRUPTED: TableValues = tv(68.54, 123.23, 27.48);

pub const TABLE1_ROWS: [RowSpec; 4] = [
    ("single U-Net, center slice only", false, PriorSet::None, CbamPlacement::None, tv(94.20, 37.06, 32.87)),
    ("single U-Net + adjacent priors", false, PriorSet::Adjacent, CbamPlacement::None, tv(94.44, 33.87, 33.27)),
    ("single U-Net + adjacent priors + CBAM", false, PriorSet::Adjacent, CbamPlacement::Both, tv(94.64, 33.85, 33.25)),
    ("stacked U-Nets + adjacent priors + CBAM", true, PriorSet::Adjacent, CbamPlacement::Both, tv(95.03, 29.76, 33.81)),
];

pub const TABLE2_ROWS: [RowSpec; 4] = [
    ("stacked U-Nets, no priors", true, PriorSet::None, CbamPlacement::Both, tv(91.77, 62.96, 30.43)),
    ("stacked U-Nets + adjacent priors", true, PriorSet::Adjacent, CbamPlacement::Both, tv(92.10, 53.55, 31.06)),
    ("stacked U-Nets + extra prior", true, PriorSet::Extra, CbamPlacement::Both, tv(93.03, 59.62, 30.68)),
    ("stacked U-Nets + adjacent and extra priors", true, PriorSet::AdjacentAndExtra, CbamPlacement::Both, tv(93.04, 54.06, 31.04)),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Shared settings; the network variant of each row overrides
    /// `stacked`, `priors` and `cbam`.
    pub base: TrainConfig,
    pub table2: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec { base: TrainConfig::toy(), table2: false }
    }
}

/// One published table: the corrupted-input baseline plus four trained rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub table: u8,
    pub corrupted: AblationRow,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub tables: Vec<AblationTable>,
    /// Shared by every row.
    pub split: DatasetSplit,
}

fn values(report: &MetricsReport, after: bool) -> TableValues {
    let a = if after { &report.after } else { &report.before };
    tv(100.0 * a.ssim.mean, a.mse.mean, a.psnr.mean)
}

/// Trains and evaluates every row on one dataset and one split.
pub fn run_ablation(spec: &AblationSpec, volumes: &[(String, Volume)]) -> Result<AblationResult> {
    let mut base = spec.base.clone();
    base.data.extra_prior = base.data.extra_prior || spec.table2;
    let ds = build_dataset(volumes, base.seed, &base.data)?;
    let split = split_subjects(&ds.subjects, base.seed, base.data.test_fraction, base.data.val_fraction)?;
    let part = split.partition(&ds)?;
    let test: Vec<&Pair> = part.test.iter().map(|&i| &ds.pairs[i]).collect();
    let before = evaluate(&mut IdentityCorrector, &test, &base.ssim, base.batch_size)?;
    let mut specs: Vec<(u8, TableValues, &[RowSpec])> = vec![(1, TABLE1_CORRUPTED, &TABLE1_ROWS)];
    if spec.table2 {
        specs.push((2, TABLE2_CORRUPTED, &TABLE2_ROWS));
    }
    let mut tables = Vec::new();
    for (table, corrupted_ref, row_specs) in specs {
        let corrupted = AblationRow {
            table,
            experiment: CORRUPTED_EXPERIMENT.to_string(),
            measured: values(&before.report, false),
            reference: corrupted_ref,
        };
        let mut rows = Vec::new();
        for &(name, stacked, priors, cbam, reference) in row_specs {
            let mut cfg = base.clone();
            cfg.net.stacked = stacked;
            cfg.net.priors = priors;
            cfg.net.cbam = cbam;
            log::info!("ablation table {table}: {name}");
            let mut out = train(&cfg, &ds, &split, None)?;
            let ev = evaluate(&mut out.best.model, &test, &cfg.ssim, cfg.batch_size)?;
            rows.push(AblationRow { table, experiment: name.to_string(), measured: values(&ev.report, true), reference });
        }
        tables.push(AblationTable { table, corrupted, rows });
    }
    Ok(AblationResult { tables, split })
}

impl AblationResult {
    /// Measured values beside the published ones; the corrupted baseline
    /// leads each table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,experiment,ssim_percent,mse,psnr,ref_ssim_percent,ref_mse,ref_psnr\n");
        for t in &self.tables {
            for r in std::iter::once(&t.corrupted).chain(&t.rows) {
                let _ = writeln!(
                    out,
                    "{},{},{:.4},{:.6},{:.4},{:.2},{:.2},{:.2}",
                    r.table,
                    r.experiment,
                    r.measured.ssim_percent,
                    r.measured.mse,
                    r.measured.psnr,
                    r.reference.ssim_percent,
                    r.reference.mse,
                    r.reference.psnr
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomSpec};

    fn subjects(n: usize, dims: [usize; 3]) -> Vec<(String, Volume)> {
        (0..n)
            .map(|k| {
                // Phantoms need 16 slices; keep the central `dims[2]`.
                let spec = PhantomSpec { seed: 100 + k as u64, dims: [dims[0], dims[1], 16], ..PhantomSpec::default() };
                let v = make_phantom(&spec).unwrap();
                let z0 = (16 - dims[2]) / 2;
                let slices: Vec<Slice> = (z0..z0 + dims[2]).map(|z| v.slice(z).unwrap()).collect();
                (format!("sub{k:02}"), Volume::from_slices(&slices, v.spacing()).unwrap())
            })
            .collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("sub{k:02}")).collect()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = split_subjects(&ids(10), 3, 0.2, 0.05).unwrap();
        assert_eq!(s.test_subjects.len(), 2);
        assert_eq!(s.train_subjects.len(), 8);
        let all: BTreeSet<_> = s.train_subjects.iter().chain(&s.test_subjects).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, split_subjects(&ids(10), 3, 0.2, 0.05).unwrap());
        assert_eq!(split_subjects(&ids(3), 3, 0.2, 0.05).unwrap().test_subjects.len(), 1);
        assert!(split_subjects(&ids(1), 3, 0.2, 0.05).is_err());
    }

    #[test]
    fn dataset_one_pair_per_slice_with_clean_targets() {
        let vols = subjects(2, [16, 16, 8]);
        let single = DataConfig { presets: vec![Severity::Moderate], ..DataConfig::default() };
        assert_eq!(build_dataset(&vols, 1, &single).unwrap().pairs.len(), 16);
        let ds = build_dataset(&vols, 1, &DataConfig::default()).unwrap();
        assert_eq!(ds.pairs.len(), 48);
        let first = &ds.pairs[0];
        assert_eq!(first.input.slice_index, 0);
        assert_eq!(first.input.prev, first.input.center);
        let clean = normalize_volume(&vols[0].1, 0.5, 99.5).unwrap();
        for (z, p) in ds.pairs[..8].iter().enumerate() {
            let (s, _) = crate::metrics::ssim(&p.target, &clean.slice(z).unwrap(), &SsimParams::default()).unwrap();
            assert_eq!(s, 1.0);
            assert!(p.input.center.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let sev: Vec<Severity> = ds.pairs.iter().step_by(8).map(|p| p.severity).collect();
        assert_eq!(sev, [Severity::Mild, Severity::Moderate, Severity::Severe].repeat(2));
        assert_eq!(ds.trajectories["sub00"].len(), 24);
        assert!(build_dataset(&vols[..1], 1, &DataConfig::default()).is_err());
    }

    #[test]
    fn partition_keeps_test_subjects_out() {
        let vols = subjects(5, [16, 16, 8]);
        let ds = build_dataset(&vols, 1, &DataConfig::default()).unwrap();
        let split = split_subjects(&ds.subjects, 9, 0.2, 0.05).unwrap();
        let part = split.partition(&ds).unwrap();
        let test: BTreeSet<&str> = split.test_subjects.iter().map(String::as_str).collect();
        for &i in part.train.iter().chain(&part.val) {
            assert!(!test.contains(ds.pairs[i].input.subject_id.as_str()));
        }
        for &i in &part.test {
            assert!(test.contains(ds.pairs[i].input.subject_id.as_str()));
        }
        assert_eq!(part.val.len(), 4); // floor(0.05 * 96)
        assert_eq!(part.train.len() + part.val.len() + part.test.len(), 120);
    }

    #[test]
    fn identity_and_oracle_evaluation() {
        let vols = subjects(2, [16, 16, 4]);
        let ds = build_dataset(&vols, 1, &DataConfig::default()).unwrap();
        let pairs: Vec<&Pair> = ds.pairs.iter().collect();
        let p = SsimParams::default();
        let ev = evaluate(&mut IdentityCorrector, &pairs, &p, 3).unwrap();
        for r in &ev.report.rows {
            assert!((r.before.ssim - r.after.ssim).abs() < 1e-6);
            assert!((r.before.mse - r.after.mse).abs() < 1e-6);
        }

        struct Oracle(BTreeMap<(String, usize), Slice>);
        impl Corrector for Oracle {
            fn correct(&mut self, batch: &[&SliceTriplet]) -> Result<Vec<Slice>> {
                Ok(batch.iter().map(|t| self.0[&(t.subject_id.clone(), t.slice_index)].clone()).collect())
            }
        }
        let mut oracle = Oracle(
            ds.pairs
                .iter()
                .map(|p| ((p.input.subject_id.clone(), p.input.slice_index), p.target.clone()))
                .collect(),
        );
        let ev = evaluate(&mut oracle, &pairs, &p, 3).unwrap();
        assert!(ev.report.rows.iter().all(|r| r.after.ssim == 1.0 && r.after.psnr.is_infinite()));
    }

    #[test]
    fn lr_hits_endpoints_over_training() {
        let total = 15;
        assert_eq!(lr_schedule(0.0, 1e-3, total), 1e-3);
        assert!((lr_schedule((total - 1) as f64, 1e-3, total) - 1e-4).abs() < 1e-15);
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                levels: 2,
                stem_channels: 2,
                encoder_channels: vec![2, 4],
                cbam_reduction: 2,
                cbam: CbamPlacement::Both,
                priors: PriorSet::Adjacent,
                stacked: true,
                input_size: [16, 16],
            },
            batch_size: 3,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_and_resume_match() {
        let vols = subjects(3, [16, 16, 4]);
        let cfg = tiny_cfg();
        let ds = build_dataset(&vols, cfg.seed, &cfg.data).unwrap();
        let split = split_subjects(&ds.subjects, 5, 0.2, 0.05).unwrap();
        let full = train(&cfg, &ds, &split, None).unwrap();
        let bytes = full.last.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, full.last);

        let first = train(&TrainConfig { epochs: 1, ..cfg.clone() }, &ds, &split, None).unwrap();
        let mid = Checkpoint::from_bytes(&first.last.to_bytes().unwrap()).unwrap();
        let resumed = train(&cfg, &ds, &split, Some(mid)).unwrap();
        assert_eq!(resumed.last.model, full.last.model);
        assert_eq!(resumed.last.adam, full.last.adam);
        assert_eq!(full.last.history.len(), 2);
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let vols = subjects(2, [16, 16, 2]);
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let ds = build_dataset(&vols, cfg.seed, &cfg.data).unwrap();
        let split = split_subjects(&ds.subjects, 5, 0.2, 0.05).unwrap();
        let out = train(&cfg, &ds, &split, None).unwrap();
        let bytes = out.last.to_bytes().unwrap();
        // Flip the stored config without touching the hash.
        let (tensors, mut meta) = checkpoint::decode(&bytes).unwrap();
        meta["net_config"]["stacked"] = serde_json::Value::Bool(false);
        let tampered = checkpoint::encode(&tensors, meta).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Config { .. })));
        let other = TrainConfig { net: NetConfig { stacked: false, ..cfg.net.clone() }, ..cfg };
        assert!(train(&other, &ds, &split, Some(out.last)).is_err());
    }

    #[test]
    fn reference_columns() {
        assert_eq!(TABLE1_CORRUPTED, tv(71.66, 99.25, 28.83));
        assert_eq!(TABLE1_ROWS[3].4, tv(95.03, 29.76, 33.81));
        assert_eq!(TABLE2_ROWS.len(), 4);
        assert_eq!(TABLE2_ROWS[3].4, tv(93.04, 54.06, 31.04));
    }
}
