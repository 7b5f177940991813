use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{instance_loss_var, AnyModel, GistModel, Objective};
use crate::numerics::Graph;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::SplitMix64;
use crate::synth::{read_dataset, Instance};
use crate::Scalar;

use super::checkpoint::Checkpoint;
use super::config::{AlignSetting, TrainConfig};
use super::eval::{evaluate, EvalMetrics};

/// Batch-mean loss components of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub qa: f64,
    pub qar: f64,
    /// Zero when the alignment term is off.
    pub align: f64,
}

/// One Adam update on the mean loss of `batch`. Per-instance gradients are
/// summed in batch order.
pub fn training_step<S: Scalar, M: GistModel<S> + ?Sized>(
    model: &mut M,
    batch: &[&Instance],
    objective: &Objective,
    adam: &mut AdamState<S>,
    learning_rate: f64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut grads = model.params().zeros_like();
    let mut sums = StepLosses::default();
    for inst in batch {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g)?;
        let loss = instance_loss_var(&*model, &mut g, &p, inst, objective)?;
        let total = g.item(loss.total)?;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        sums.total += total.as_f64();
        sums.qa += g.item(loss.qa)?.as_f64();
        sums.qar += g.item(loss.qar)?.as_f64();
        if let Some(a) = loss.align {
            sums.align += g.item(a)?.as_f64();
        }
        p.accumulate(&g.backward(loss.total)?, &mut grads)?;
    }
    let b = S::from_usize_lossy(batch.len());
    for (_, t) in grads.iter_mut() {
        for x in t.data_mut() {
            *x /= b;
        }
    }
    adam.update(model.params_mut(), &grads, learning_rate)?;
    let n = batch.len() as f64;
    Ok(StepLosses { total: sums.total / n, qa: sums.qa / n, qar: sums.qar / n, align: sums.align / n })
}

/// One row per evaluated epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_qa: f64,
    pub l_qar: f64,
    pub l_align: f64,
    pub acc_q2a: f64,
    pub acc_qa2r: f64,
    pub acc_q2ar: f64,
    pub gold_similarity: f64,
    pub evidence_mass_qa: f64,
    pub evidence_mass_qar: f64,
    pub seconds: f64,
}

impl EpochRecord {
    fn new(epoch: usize, losses: StepLosses, m: EvalMetrics, seconds: f64) -> Self {
        EpochRecord {
            epoch,
            l_qa: losses.qa,
            l_qar: losses.qar,
            l_align: losses.align,
            acc_q2a: m.acc_q2a,
            acc_qa2r: m.acc_qa2r,
            acc_q2ar: m.acc_q2ar,
            gold_similarity: m.gold_similarity,
            evidence_mass_qa: m.evidence_mass_qa,
            evidence_mass_qar: m.evidence_mass_qar,
            seconds,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

pub(crate) fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&self.records)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let records = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() }))
            .collect::<Result<_>>()?;
        Ok(TrainReport { records })
    }
}

pub struct TrainOutcome<S> {
    pub report: TrainReport,
    pub model: AnyModel<S>,
    pub adam: AdamState<S>,
}

/// Reads the configured datasets and trains.
pub fn train<S: Scalar>(config: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome<S>> {
    config.validate()?;
    let train_set = read_dataset(&config.train_path)?;
    let val_set = read_dataset(&config.val_path)?;
    train_on(config, &train_set, &val_set, on_epoch)
}

/// Seeded loop: the seed's first child stream initializes the model, the
/// second shuffles each epoch.
pub fn train_on<S: Scalar>(
    config: &TrainConfig,
    train_set: &[Instance],
    val_set: &[Instance],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    let mut master = SplitMix64::new(config.seed);
    let mut init_rng = master.fork();
    let mut shuffle_rng = master.fork();
    let mut model = AnyModel::<S>::new(config.variant, config.vanilla, config.transformer, &mut init_rng)?;
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    let objective = config.objective();
    let mut report = TrainReport::default();
    let checkpoint = config.checkpoint_path.as_deref();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut sums = StepLosses::default();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let losses = match training_step(&mut model, &batch, &objective, &mut adam, config.learning_rate) {
                Ok(l) => l,
                Err(e) => {
                    let e = match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, step: step + 1 },
                        other => other,
                    };
                    if e.is_numeric() {
                        if let Some(path) = checkpoint {
                            Checkpoint::capture(config, epoch - 1, &model, &adam)?.save(path)?;
                        }
                    }
                    return Err(e);
                }
            };
            let w = batch.len() as f64;
            sums.qa += losses.qa * w;
            sums.qar += losses.qar * w;
            sums.align += losses.align * w;
        }
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let n = train_set.len() as f64;
            let losses = StepLosses { total: 0.0, qa: sums.qa / n, qar: sums.qar / n, align: sums.align / n };
            let metrics = evaluate(&model, val_set)?;
            let record = EpochRecord::new(epoch, losses, metrics, started.elapsed().as_secs_f64());
            on_epoch(&record);
            report.records.push(record);
        }
        if let Some(path) = checkpoint {
            Checkpoint::capture(config, epoch, &model, &adam)?.save(path)?;
        }
    }
    Ok(TrainOutcome { report, model, adam })
}

/// Final-epoch summary of one sweep run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub l_qa: f64,
    pub l_qar: f64,
    pub l_align: f64,
    pub acc_q2a: f64,
    pub acc_qa2r: f64,
    pub acc_q2ar: f64,
    pub gold_similarity: f64,
    pub evidence_mass_qa: f64,
    pub evidence_mass_qar: f64,
}

impl SweepRow {
    fn new(lambda: f64, r: &EpochRecord) -> Self {
        SweepRow {
            lambda,
            l_qa: r.l_qa,
            l_qar: r.l_qar,
            l_align: r.l_align,
            acc_q2a: r.acc_q2a,
            acc_qa2r: r.acc_qa2r,
            acc_q2ar: r.acc_q2ar,
            gold_similarity: r.gold_similarity,
            evidence_mass_qa: r.evidence_mass_qa,
            evidence_mass_qar: r.evidence_mass_qar,
        }
    }
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    to_csv(rows)
}

/// Trains once per lambda with everything else from `config`; no
/// checkpoints or per-epoch reports are written.
pub fn sweep<S: Scalar>(
    config: &TrainConfig,
    lambdas: &[f64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if config.align_mode == AlignSetting::None {
        return Err(Error::Config("a lambda sweep needs align_mode dot or rank".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::Config("no lambdas given".into()));
    }
    let train_set = read_dataset(&config.train_path)?;
    let val_set = read_dataset(&config.val_path)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig { lambda, checkpoint_path: None, report_path: None, ..config.clone() };
        let outcome = train_on::<S>(&cfg, &train_set, &val_set, |_| {})?;
        let last = outcome.report.last().ok_or_else(|| Error::Contract("training produced no records".into()))?;
        let row = SweepRow::new(lambda, last);
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a checkpoint's model.
pub fn load_model<S: Scalar>(path: &Path) -> Result<AnyModel<S>> {
    Ok(Checkpoint::load(path)?.restore::<S>()?.0)
}
