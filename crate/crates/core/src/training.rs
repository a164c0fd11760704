//! Mini-batch training with early stopping, resumable checkpoints and the
//! reverse-validation search for λ.

use std::path::Path;
use std::time::Duration;

use crate::adversarial::{
    objective_backward, total_objective, AdversarialConfig, BackwardSpec, ClassifierHead, Fusion,
    HeadRole, LossBreakdown, Optimizer, OptimizerKind,
};
use crate::codec::{decode, Reader, Writer};
use crate::data::{encode_dataset, CrossViewDataset, SequencePair};
use crate::error::{Error, Result};
use crate::eval::{cross_view_kl, evaluate_model};
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    argmax, softmax_cross_entropy, softmax_cross_entropy_grad, ParamStore, Rng, RngState, Tensor,
};
use crate::vrnn::{FrameSequence, SequenceEmbedding, VrnnConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VACK";
pub const CHECKPOINT_VERSION: u8 = 1;

const SALT_TRAIN: u64 = 11;
const SALT_VAL: u64 = 12;
const SALT_MODEL: u64 = 13;
const SALT_REVERSE: u64 = 14;

/// Size of the held-out identity set used to track retrieval during
/// training and for evaluation when no test file is given.
pub const HELD_OUT_IDENTITIES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub fusion: Fusion,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            patience: 10,
            batch_size: 8,
            lambda: 0.6,
            fusion: Fusion::Early,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            train_fraction: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn adversarial(&self) -> AdversarialConfig {
        AdversarialConfig {
            lambda: self.lambda,
            fusion: self.fusion,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adversarial().validate()?;
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and patience must be positive".into(),
            ));
        }
        if self.epochs > 0 && self.patience > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Retrieval quality of a set of held-out pairs after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewMetrics {
    pub kl: f64,
    pub rank1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub val_metrics: Option<ViewMetrics>,
    pub monitor: Option<ViewMetrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch after which patience ran out, if it did.
    pub stopped_epoch: Option<usize>,
    pub best_epoch: Option<usize>,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub since_best: usize,
    pub stopped: bool,
    pub best: Option<BestParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestParams {
    pub epoch: usize,
    pub val_total: f64,
    pub values: Vec<Tensor>,
}

/// Identities held out from both training and validation, seen through the
/// same views.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub probe: Vec<FrameSequence>,
    pub gallery: Vec<FrameSequence>,
}

impl EvalSet {
    pub fn from_dataset(ds: &CrossViewDataset) -> Self {
        Self {
            probe: ds.probe.clone(),
            gallery: ds.gallery.clone(),
        }
    }

    pub fn from_pairs(pairs: &[SequencePair]) -> Self {
        Self {
            probe: pairs.iter().map(|p| p.probe.clone()).collect(),
            gallery: pairs.iter().map(|p| p.gallery.clone()).collect(),
        }
    }

    pub fn metrics(&self, model: &Model) -> Result<ViewMetrics> {
        let e = evaluate_model(model, &self.probe, &self.gallery)?;
        Ok(ViewMetrics {
            kl: e.kl,
            rank1: e.rank1(),
        })
    }
}

/// Default model dimensions for a dataset.
pub fn model_config_for(ds: &CrossViewDataset) -> ModelConfig {
    ModelConfig::new(
        VrnnConfig {
            frame_dim: ds.frame_dim(),
            ..VrnnConfig::default()
        },
        ds.len(),
    )
}

pub struct Trainer {
    config: TrainConfig,
    model: Model,
    optimizer: Optimizer,
    rng: Rng,
    train: Vec<SequencePair>,
    val: Vec<SequencePair>,
    monitor: Option<EvalSet>,
    progress: Progress,
    records: Vec<EpochRecord>,
    dataset_crc: u32,
    elapsed: Duration,
}

impl Trainer {
    /// Splits `dataset` by identity and initialises a fresh model.
    pub fn new(
        dataset: &CrossViewDataset,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (train, val) =
            crate::data::split_train_val(dataset, config.train_fraction, config.seed)?;
        let mut t = Self::from_pairs(model_config, train, val, config)?;
        t.dataset_crc = dataset_crc(dataset);
        Ok(t)
    }

    /// Trains on explicit pairs. With no validation pairs every epoch runs
    /// and the final parameters are kept.
    pub fn from_pairs(
        model_config: ModelConfig,
        train: Vec<SequencePair>,
        val: Vec<SequencePair>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let model = Model::new(
            model_config,
            crate::numerics::mix_seed(config.seed, SALT_MODEL),
        )?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.store);
        Ok(Self {
            config,
            model,
            optimizer,
            rng: Rng::derive(config.seed, SALT_TRAIN),
            train,
            val,
            monitor: None,
            progress: Progress {
                epoch: 0,
                since_best: 0,
                stopped: false,
                best: None,
            },
            records: Vec::new(),
            dataset_crc: 0,
            elapsed: Duration::ZERO,
        })
    }

    /// Also records retrieval metrics on `set` after every epoch.
    pub fn with_monitor(mut self, set: EvalSet) -> Self {
        self.monitor = Some(set);
        self
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(dataset: &CrossViewDataset, ckpt: &Checkpoint) -> Result<Self> {
        let crc = dataset_crc(dataset);
        if crc != ckpt.dataset_crc {
            return Err(Error::StateMismatch(format!(
                "checkpoint was written for dataset {:08x}, got {crc:08x}",
                ckpt.dataset_crc
            )));
        }
        let mut t = Self::new(dataset, ckpt.model_config, ckpt.train_config)?;
        t.model = ckpt.model()?;
        t.optimizer = ckpt.optimizer.clone();
        t.rng = Rng::from_state(&ckpt.rng);
        t.progress = ckpt.progress.clone();
        t.records = ckpt.records.clone();
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn train_pairs(&self) -> &[SequencePair] {
        &self.train
    }

    pub fn val_pairs(&self) -> &[SequencePair] {
        &self.val
    }

    pub fn is_finished(&self) -> bool {
        self.progress.stopped || self.progress.epoch >= self.config.epochs
    }

    /// Runs one epoch; `None` once training is over.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let elapsed = stopwatch();
        let adv = self.config.adversarial();
        let spec = BackwardSpec::training(self.config.lambda);
        let epoch = self.progress.epoch + 1;

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut sums = LossBreakdown::default();
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<SequencePair> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            self.model.store.zero_grads();
            let l = objective_backward(&mut self.model, &batch, &adv, spec, &mut self.rng)
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} in epoch {epoch}, batch {bi}"))
                    }
                    other => other,
                })?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss in epoch {epoch}, batch {bi}"
                )));
            }
            self.optimizer
                .update_step(&mut self.model.store)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {bi}: {e}")))?;
            let w = batch.len() as f64;
            sums.l_v += w * l.l_v;
            sums.l_y += w * l.l_y;
            sums.l_d += w * l.l_d;
            sums.l_c += w * l.l_c;
            sums.l_r += w * l.l_r;
            sums.total += w * l.total;
        }
        let n = self.train.len() as f64;
        let train = LossBreakdown {
            l_v: sums.l_v / n,
            l_y: sums.l_y / n,
            l_d: sums.l_d / n,
            l_c: sums.l_c / n,
            l_r: sums.l_r / n,
            total: sums.total / n,
        };

        let (val, val_metrics) = if self.val.is_empty() {
            (None, None)
        } else {
            let l = total_objective(
                &self.model,
                &self.val,
                &adv,
                &mut Rng::derive(self.config.seed, SALT_VAL),
            )?;
            let metrics = if self.val.len() >= 2 {
                let set = EvalSet::from_pairs(&self.val);
                let probes = self.model.embed_all(&set.probe)?;
                let gallery = self.model.embed_all(&set.gallery)?;
                let kl = cross_view_kl(&probes, &gallery)?.kl;
                let rank1 = crate::eval::evaluate_embeddings(&probes, &gallery)?.rank1();
                Some(ViewMetrics { kl, rank1 })
            } else {
                None
            };
            (Some(l), metrics)
        };
        let monitor = match &self.monitor {
            Some(set) => Some(set.metrics(&self.model)?),
            None => None,
        };

        if let Some(v) = &val {
            let improved = self
                .progress
                .best
                .as_ref()
                .is_none_or(|b| v.total < b.val_total);
            if improved {
                self.progress.best = Some(BestParams {
                    epoch,
                    val_total: v.total,
                    values: self.model.store.values_snapshot(),
                });
                self.progress.since_best = 0;
            } else {
                self.progress.since_best += 1;
                if self.progress.since_best >= self.config.patience {
                    self.progress.stopped = true;
                }
            }
        }
        self.progress.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train,
            val,
            val_metrics,
            monitor,
        };
        self.records.push(record);
        self.elapsed += elapsed();
        Ok(Some(record))
    }

    /// Runs until the epoch budget or patience is exhausted.
    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()?.is_some() {}
        Ok(())
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            epochs: self.records.clone(),
            stopped_epoch: self.progress.stopped.then_some(self.progress.epoch),
            best_epoch: self.progress.best.as_ref().map(|b| b.epoch),
            wall_time: self.elapsed,
        }
    }

    /// The model with the best validation parameters (or the current ones
    /// when nothing was validated) and the report.
    pub fn finish(self) -> Result<(Model, TrainReport)> {
        let report = self.report();
        let mut model = self.model;
        if let Some(best) = &self.progress.best {
            model.store.load_values(&best.values)?;
        }
        Ok((model, report))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: *self.model.config(),
            train_config: self.config,
            params: named_values(&self.model.store),
            optimizer: self.optimizer.clone(),
            rng: self.rng.state(),
            progress: self.progress.clone(),
            records: self.records.clone(),
            dataset_crc: self.dataset_crc,
        }
    }
}

// wasm32-unknown-unknown has no clock
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl FnOnce() -> Duration {
    let start = std::time::Instant::now();
    move || start.elapsed()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl FnOnce() -> Duration {
    || Duration::ZERO
}

/// Trains with default model dimensions.
pub fn train(dataset: &CrossViewDataset, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut t = Trainer::new(dataset, model_config_for(dataset), *config)?;
    t.run()?;
    t.finish()
}

pub const REPORT_HEADER: &str = "epoch,L_V,L_y,L_d,L_C,L_R,E_train,E_val,kl_val";

/// Per-epoch losses as CSV under [`REPORT_HEADER`]. `kl_val` comes from the
/// held-out identities when they were tracked, else from the validation
/// pairs; missing values are empty fields. Floats use the shortest
/// round-trip form, so equal runs give equal bytes.
pub fn report_csv(records: &[EpochRecord]) -> String {
    use std::fmt::Write;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{REPORT_HEADER}\n");
    for r in records {
        let t = &r.train;
        let kl = r.monitor.or(r.val_metrics).map(|m| m.kl);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            t.l_v,
            t.l_y,
            t.l_d,
            t.l_c,
            t.l_r,
            t.total,
            opt(r.val.map(|v| v.total)),
            opt(kl)
        );
    }
    out
}

fn dataset_crc(ds: &CrossViewDataset) -> u32 {
    crc32fast::hash(&encode_dataset(ds))
}

fn named_values(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .ids()
        .map(|id| (store.name(id).to_string(), store.value(id).clone()))
        .collect()
}

/// Everything needed to continue a training run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Optimizer,
    pub rng: RngState,
    pub progress: Progress,
    pub records: Vec<EpochRecord>,
    pub dataset_crc: u32,
}

impl Checkpoint {
    /// Rebuilds the model with the saved parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config, 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::StateMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (id, (name, _)) in model.store.ids().zip(&self.params) {
            if model.store.name(id) != name {
                return Err(Error::StateMismatch(format!(
                    "tensor {name} where {} was expected",
                    model.store.name(id)
                )));
            }
        }
        let values: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        model.store.load_values(&values)?;
        Ok(model)
    }

    /// The model training would return: best validation parameters when
    /// there are any.
    pub fn best_model(&self) -> Result<Model> {
        let mut model = self.model()?;
        if let Some(best) = &self.progress.best {
            model.store.load_values(&best.values)?;
        }
        Ok(model)
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.len(t.shape().len());
    for &d in t.shape() {
        w.len(d);
    }
    w.f64s(t.data());
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let rank = r.len()?;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Truncated)?;
    Tensor::from_vec(&shape, r.f64s(n)?)
}

fn write_tensors(w: &mut Writer, ts: &[Tensor]) {
    w.len(ts.len());
    for t in ts {
        write_tensor(w, t);
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<Tensor>> {
    let n = r.len()?;
    (0..n).map(|_| read_tensor(r)).collect()
}

fn write_losses(w: &mut Writer, l: &LossBreakdown) {
    w.f64s(&[l.l_v, l.l_y, l.l_d, l.l_c, l.l_r, l.total]);
}

fn read_losses(r: &mut Reader<'_>) -> Result<LossBreakdown> {
    let v = r.f64s(6)?;
    Ok(LossBreakdown {
        l_v: v[0],
        l_y: v[1],
        l_d: v[2],
        l_c: v[3],
        l_r: v[4],
        total: v[5],
    })
}

fn write_opt<T>(w: &mut Writer, v: &Option<T>, f: impl Fn(&mut Writer, &T)) {
    match v {
        Some(x) => {
            w.u8(1);
            f(w, x);
        }
        None => w.u8(0),
    }
}

fn read_opt<T>(r: &mut Reader<'_>, f: impl Fn(&mut Reader<'_>) -> Result<T>) -> Result<Option<T>> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(f(r)?)),
        b => Err(Error::Format(format!("bad option tag {b}"))),
    }
}

fn write_metrics(w: &mut Writer, m: &ViewMetrics) {
    w.f64(m.kl);
    w.f64(m.rank1);
}

fn read_metrics(r: &mut Reader<'_>) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        kl: r.f64()?,
        rank1: r.f64()?,
    })
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    let m = &c.model_config;
    let v = &m.vrnn;
    for d in [
        v.frame_dim,
        v.feat_dim,
        v.hidden_dim,
        v.cell_dim,
        v.proj_dim,
        v.latent_dim,
        v.num_layers,
        m.head_hidden,
        m.num_classes,
    ] {
        w.len(d);
    }
    let t = &c.train_config;
    w.len(t.epochs);
    w.f64(t.learning_rate);
    w.len(t.patience);
    w.len(t.batch_size);
    w.f64(t.lambda);
    w.u8(matches!(t.fusion, Fusion::Late) as u8);
    w.u64(t.seed);
    w.u8(matches!(t.optimizer, OptimizerKind::Sgd) as u8);
    w.f64(t.train_fraction);
    w.u32(c.dataset_crc);

    w.len(c.params.len());
    for (name, tensor) in &c.params {
        w.str(name);
        write_tensor(&mut w, tensor);
    }

    let o = &c.optimizer;
    w.u8(matches!(o.kind(), OptimizerKind::Sgd) as u8);
    w.f64(o.learning_rate());
    w.u64(o.step());
    write_tensors(&mut w, o.first_moments());
    write_tensors(&mut w, o.second_moments());

    w.bytes(&c.rng.seed);
    w.u64(c.rng.stream);
    w.u128(c.rng.word_pos);

    let p = &c.progress;
    w.len(p.epoch);
    w.len(p.since_best);
    w.u8(p.stopped as u8);
    write_opt(&mut w, &p.best, |w, b| {
        w.len(b.epoch);
        w.f64(b.val_total);
        write_tensors(w, &b.values);
    });

    w.len(c.records.len());
    for rec in &c.records {
        w.len(rec.epoch);
        write_losses(&mut w, &rec.train);
        write_opt(&mut w, &rec.val, write_losses);
        write_opt(&mut w, &rec.val_metrics, write_metrics);
        write_opt(&mut w, &rec.monitor, write_metrics);
    }
    w.finish(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
}

fn kind_from(b: u8) -> Result<OptimizerKind> {
    match b {
        0 => Ok(OptimizerKind::Adam),
        1 => Ok(OptimizerKind::Sgd),
        _ => Err(Error::Format(format!("bad optimizer tag {b}"))),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, |r| {
        let mut dims = [0usize; 9];
        for d in &mut dims {
            *d = r.len()?;
        }
        let model_config = ModelConfig {
            vrnn: VrnnConfig {
                frame_dim: dims[0],
                feat_dim: dims[1],
                hidden_dim: dims[2],
                cell_dim: dims[3],
                proj_dim: dims[4],
                latent_dim: dims[5],
                num_layers: dims[6],
            },
            head_hidden: dims[7],
            num_classes: dims[8],
        };
        let train_config = TrainConfig {
            epochs: r.len()?,
            learning_rate: r.f64()?,
            patience: r.len()?,
            batch_size: r.len()?,
            lambda: r.f64()?,
            fusion: if r.u8()? == 1 {
                Fusion::Late
            } else {
                Fusion::Early
            },
            seed: r.u64()?,
            optimizer: kind_from(r.u8()?)?,
            train_fraction: r.f64()?,
        };
        let dataset_crc = r.u32()?;
        let n = r.len()?;
        let params = (0..n)
            .map(|_| Ok((r.str()?, read_tensor(r)?)))
            .collect::<Result<Vec<_>>>()?;
        let kind = kind_from(r.u8()?)?;
        let lr = r.f64()?;
        let step = r.u64()?;
        let first = read_tensors(r)?;
        let second = read_tensors(r)?;
        let optimizer = Optimizer::from_parts(kind, lr, step, first, second)?;
        let rng = RngState {
            seed: r.bytes(32)?.try_into().expect("32 bytes"),
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let progress = Progress {
            epoch: r.len()?,
            since_best: r.len()?,
            stopped: r.u8()? != 0,
            best: read_opt(r, |r| {
                Ok(BestParams {
                    epoch: r.len()?,
                    val_total: r.f64()?,
                    values: read_tensors(r)?,
                })
            })?,
        };
        let n = r.len()?;
        let records = (0..n)
            .map(|_| {
                Ok(EpochRecord {
                    epoch: r.len()?,
                    train: read_losses(r)?,
                    val: read_opt(r, read_losses)?,
                    val_metrics: read_opt(r, read_metrics)?,
                    monitor: read_opt(r, read_metrics)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            model_config,
            train_config,
            params,
            optimizer,
            rng,
            progress,
            records,
            dataset_crc,
        })
    })
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(c))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// `10^(−2 + k/4)` for `k = 0..=8`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=8).map(|k| 10f64.powf(-2.0 + k as f64 / 4.0)).collect()
}

pub const REVERSE_EPOCHS: usize = 20;
const REVERSE_LR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSelection {
    pub best: f64,
    /// `(λ, reverse-validation risk)` in grid order.
    pub risks: Vec<(f64, f64)>,
}

/// Splits every sequence in time: the first `⌈fraction·T⌉` frames for
/// training, the remaining (at least one) for validation.
fn temporal_split(seq: &FrameSequence, fraction: f64) -> Result<(FrameSequence, FrameSequence)> {
    let t = seq.len();
    let cut = ((fraction * t as f64).ceil() as usize).min(t.saturating_sub(1));
    if cut == 0 {
        return Err(Error::InvalidConfig(format!(
            "sequence of length {t} is too short to split for validation"
        )));
    }
    Ok((
        FrameSequence::new(seq.frames[..cut].to_vec(), seq.label, seq.view)?,
        FrameSequence::new(seq.frames[cut..].to_vec(), seq.label, seq.view)?,
    ))
}

fn train_reverse_head(
    embeddings: &[(Vec<f64>, usize)],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ParamStore, ClassifierHead)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(config.seed, SALT_REVERSE);
    let head = ClassifierHead::new(
        &mut store,
        HeadRole::Probe,
        (
            model_config.vrnn.latent_dim,
            model_config.head_hidden,
            model_config.num_classes,
        ),
        &mut rng,
    );
    let mut opt = Optimizer::new(OptimizerKind::Adam, REVERSE_LR, &store);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for _ in 0..REVERSE_EPOCHS {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            store.zero_grads();
            for &i in chunk {
                let (z, label) = &embeddings[i];
                let (logits, cache) = head.mlp.forward(&store, z)?;
                let d: Vec<f64> = softmax_cross_entropy_grad(&logits, *label)
                    .into_iter()
                    .map(|g| g / chunk.len() as f64)
                    .collect();
                head.mlp.backward(&mut store, &cache, &d, 1.0);
            }
            opt.update_step(&mut store)?;
        }
    }
    Ok((store, head))
}

/// Reverse-validation risk of one λ.
///
/// A model is trained on the leading 90% of every sequence. Its probe head
/// labels the gallery and probe training crops; a fresh head is fitted to
/// those pseudo-labels on the frozen embeddings, and the risk is that head's
/// error on the held-out probe crops.
pub fn reverse_validation_risk(
    dataset: &CrossViewDataset,
    lambda: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let mut train_pairs = Vec::with_capacity(dataset.len());
    let mut probe_val = Vec::with_capacity(dataset.len());
    for pair in dataset.pairs() {
        let (p_train, p_val) = temporal_split(&pair.probe, config.train_fraction)?;
        let (g_train, _) = temporal_split(&pair.gallery, config.train_fraction)?;
        train_pairs.push(SequencePair {
            probe: p_train,
            gallery: g_train,
            label: pair.label,
        });
        probe_val.push(p_val);
    }
    let cfg = TrainConfig { lambda, ..*config };
    let model_config = model_config_for(dataset);
    let mut trainer = Trainer::from_pairs(model_config, train_pairs.clone(), Vec::new(), cfg)?;
    trainer.run()?;
    let (model, _) = trainer.finish()?;

    let pseudo = |e: &SequenceEmbedding| -> Result<(Vec<f64>, usize)> {
        Ok((
            e.vector.clone(),
            argmax(&model.head_y.logits(&model.store, &e.vector)?),
        ))
    };
    let mut reverse_set = Vec::with_capacity(2 * train_pairs.len());
    for pair in &train_pairs {
        reverse_set.push(pseudo(&model.embed(&pair.gallery)?)?);
        reverse_set.push(pseudo(&model.embed(&pair.probe)?)?);
    }
    let (store, head) = train_reverse_head(&reverse_set, &model_config, &cfg)?;
    let mut errors = 0usize;
    for seq in &probe_val {
        let z = model.embed(seq)?;
        if argmax(&head.logits(&store, &z.vector)?) != seq.label {
            errors += 1;
        }
    }
    Ok(errors as f64 / probe_val.len() as f64)
}

/// Evaluates every candidate and returns the one with the lowest risk
/// (the first on ties).
pub fn select_lambda(
    dataset: &CrossViewDataset,
    grid: &[f64],
    config: &TrainConfig,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    let risks = grid
        .iter()
        .map(|&l| Ok((l, reverse_validation_risk(dataset, l, config)?)))
        .collect::<Result<Vec<_>>>()?;
    let best = risks
        .iter()
        .fold(None::<(f64, f64)>, |acc, &(l, r)| match acc {
            Some((_, br)) if br <= r => acc,
            _ => Some((l, r)),
        })
        .expect("non-empty")
        .0;
    Ok(LambdaSelection { best, risks })
}

/// Loss of the cross-entropy on one embedding; used by tests and tools.
pub fn head_loss(
    store: &ParamStore,
    head: &ClassifierHead,
    z: &[f64],
    label: usize,
) -> Result<f64> {
    softmax_cross_entropy(&head.logits(store, z)?, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenerationParams};

    fn tiny(identities: usize) -> CrossViewDataset {
        let params = GenerationParams {
            identities,
            min_len: 8,
            max_len: 8,
            frame_dim: 8,
            ..GenerationParams::default()
        };
        generate_dataset(&params, 3).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            patience: epochs.max(1),
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn trainer(ds: &CrossViewDataset, cfg: TrainConfig) -> Trainer {
        Trainer::new(ds, ModelConfig::toy(ds.len()), cfg).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                patience: 60,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lambda: -0.1,
                ..TrainConfig::default()
            },
            TrainConfig {
                train_fraction: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(
                matches!(c.validate(), Err(Error::InvalidConfig(_))),
                "{c:?}"
            );
        }
    }

    #[test]
    fn zero_epochs_keeps_initial_parameters() {
        let ds = tiny(4);
        let t = trainer(&ds, quick(0));
        let initial = t.model().store.values_snapshot();
        let (model, report) = t.finish().unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(model.store.values_snapshot(), initial);
    }

    #[test]
    fn training_lowers_objective() {
        let ds = tiny(4);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..quick(50)
        };
        let mut t = Trainer::from_pairs(ModelConfig::toy(4), ds.pairs(), Vec::new(), cfg).unwrap();
        let adv = cfg.adversarial();
        let before = total_objective(t.model(), &ds.pairs(), &adv, &mut Rng::new(1))
            .unwrap()
            .total;
        t.run().unwrap();
        assert_eq!(t.records().len(), 50);
        let after = total_objective(t.model(), &ds.pairs(), &adv, &mut Rng::new(1))
            .unwrap()
            .total;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn early_stopping_returns_best_parameters() {
        let ds = tiny(10);
        let cfg = TrainConfig {
            patience: 2,
            learning_rate: 0.05,
            ..quick(30)
        };
        let mut t = trainer(&ds, cfg);
        t.run().unwrap();
        let report = t.report();
        assert!(report.epochs.len() <= 30);
        let best = report
            .epochs
            .iter()
            .map(|r| r.val.unwrap().total)
            .fold(f64::INFINITY, f64::min);
        let val = t.val_pairs().to_vec();
        let (model, report) = t.finish().unwrap();
        let best_rec = &report.epochs[report.best_epoch.unwrap() - 1];
        assert_eq!(best_rec.val.unwrap().total, best);
        let again = total_objective(
            &model,
            &val,
            &cfg.adversarial(),
            &mut Rng::derive(cfg.seed, SALT_VAL),
        )
        .unwrap();
        assert_eq!(again.total, best);
        if let Some(stop) = report.stopped_epoch {
            assert_eq!(stop, report.epochs.len());
            assert_eq!(stop - report.best_epoch.unwrap(), 2);
        }
    }

    #[test]
    fn validation_metrics_are_recorded() {
        let ds = tiny(20);
        let mon = EvalSet::from_dataset(&crate::data::held_out(&ds, 4).unwrap());
        let mut t = trainer(&ds, quick(2)).with_monitor(mon.clone());
        let rec = t.run_epoch().unwrap().unwrap();
        let expected = mon.metrics(t.model()).unwrap();
        assert_eq!(rec.monitor, Some(expected));
        assert!(rec.val_metrics.unwrap().kl >= 0.0);
    }

    #[test]
    fn non_finite_input_aborts_with_batch_index() {
        let ds = tiny(4);
        let mut pairs = ds.pairs();
        pairs[0].probe.frames[3][1] = f64::NAN;
        let mut t = Trainer::from_pairs(ModelConfig::toy(4), pairs, Vec::new(), quick(1)).unwrap();
        match t.run() {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("batch"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn same_seed_same_run() {
        let ds = tiny(6);
        let run = || {
            let mut t = trainer(&ds, quick(3));
            t.run().unwrap();
            t.records().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let ds = tiny(6);
        let cfg = quick(4);
        let mut full = trainer(&ds, cfg);
        full.run().unwrap();

        let mut first = trainer(&ds, cfg);
        first.run_epoch().unwrap();
        first.run_epoch().unwrap();
        let bytes = encode_checkpoint(&first.checkpoint());
        let ckpt = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ckpt, first.checkpoint());
        let mut resumed = Trainer::resume(&ds, &ckpt).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.records(), full.records());
        assert_eq!(
            resumed.model().store.values_snapshot(),
            full.model().store.values_snapshot()
        );
    }

    #[test]
    fn checkpoint_errors() {
        let ds = tiny(4);
        let t = trainer(&ds, quick(1));
        let bytes = encode_checkpoint(&t.checkpoint());
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() / 2]),
            Err(Error::Truncated)
        ));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            decode_checkpoint(b"VADS\x01"),
            Err(Error::BadMagic { .. })
        ));

        let other = tiny(5);
        assert!(matches!(
            Trainer::resume(&other, &t.checkpoint()),
            Err(Error::StateMismatch(_))
        ));
    }

    #[test]
    fn lambda_grid() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 9);
        assert!((g[0] - 0.01).abs() < 1e-15 && (g[8] - 1.0).abs() < 1e-15);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_split_sizes() {
        let seq = FrameSequence::new(vec![vec![0.0]; 10], 0, crate::vrnn::View::Probe).unwrap();
        let (a, b) = temporal_split(&seq, 0.9).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        let seq = FrameSequence::new(vec![vec![0.0]; 3], 0, crate::vrnn::View::Probe).unwrap();
        let (a, b) = temporal_split(&seq, 0.9).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
        let one = FrameSequence::new(vec![vec![0.0]], 0, crate::vrnn::View::Probe).unwrap();
        assert!(temporal_split(&one, 0.9).is_err());
    }

    #[test]
    fn select_lambda_picks_minimum_risk() {
        let ds = tiny(4);
        let cfg = quick(1);
        let grid = [0.01, 0.1];
        let sel = select_lambda(&ds, &grid, &cfg).unwrap();
        assert_eq!(sel.risks.len(), 2);
        let min = sel.risks.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let first_min = sel.risks.iter().find(|r| r.1 == min).unwrap().0;
        assert_eq!(sel.best, first_min);
        for (_, r) in &sel.risks {
            assert!((0.0..=1.0).contains(r));
        }
        assert!(select_lambda(&ds, &[], &cfg).is_err());
        let short = generate_dataset(
            &GenerationParams {
                identities: 3,
                min_len: 1,
                max_len: 1,
                frame_dim: 8,
                ..GenerationParams::default()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            select_lambda(&short, &grid, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }
}
