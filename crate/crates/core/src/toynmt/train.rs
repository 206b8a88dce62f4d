use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{lr_at, TrainSchedule};
use super::data::SyntheticTask;
use super::model::ToyModel;
use super::tape::Mat;
use crate::bcq::QuantizedTensor;
use crate::container::Checkpoint;
use crate::error::{Error, Result};
use crate::planner::{FrequencyTable, Group, Precision, PrecisionPlan};
use crate::tensor::DenseTensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-9;

/// Adam over the f32 parameters, moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &[DenseTensor]) -> Self {
        let zeros = |p: &DenseTensor| vec![0.0; p.numel()];
        Self { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }

    pub fn step(&mut self, params: &mut [DenseTensor], grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in params[i].data.iter_mut().enumerate() {
                let gj = g.data[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

/// Mini-batch size and data seed of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { batch_size: 8, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub projected: bool,
}

/// One row per update, `projected` set when a projection preceded it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
}

impl LossHistory {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Mean loss of the last `n` updates.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn sgd_step(
    model: &mut ToyModel,
    adam: &mut Adam,
    task: &SyntheticTask,
    rng: &mut ChaCha8Rng,
    opts: &TrainOptions,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let snap = model.snapshot();
    let mut acc: Vec<Option<Mat>> = vec![None; snap.len()];
    let mut loss = 0.0;
    let inv = 1.0 / opts.batch_size as f64;
    for ex in task.batch(rng, opts.batch_size) {
        let (l, grads) = model.loss_and_grads(&snap, &ex)?;
        loss += l * inv;
        for (a, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match a {
                Some(a) => a.data.iter_mut().zip(&g.data).for_each(|(x, y)| *x += y * inv),
                None => *a = Some(Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * inv).collect())),
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged { step, loss });
    }
    adam.step(model.params_mut(), &acc, lr);
    if model.params().iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged { step, loss: f64::NAN });
    }
    Ok(loss)
}

fn check_run(sched: &TrainSchedule, opts: &TrainOptions, task: &SyntheticTask, model: &ToyModel) -> Result<()> {
    sched.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if task.vocab != model.config().vocab || task.max_len + 1 > model.config().max_len || task.min_len == 0 {
        return Err(Error::InvalidInput(format!(
            "task (vocab {}, lengths {}..={}) does not fit the model (vocab {}, max_len {})",
            task.vocab,
            task.min_len,
            task.max_len,
            model.config().vocab,
            model.config().max_len
        )));
    }
    Ok(())
}

/// Ordinary full-precision training.
pub fn train_dense(
    model: &mut ToyModel,
    task: &SyntheticTask,
    sched: &TrainSchedule,
    opts: &TrainOptions,
) -> Result<LossHistory> {
    check_run(sched, opts, task, model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(model.params());
    let d = model.config().d_model;
    let mut history = LossHistory::default();
    for s in 0..sched.total_steps {
        let lr = lr_at(s + 1, sched, d)?;
        let loss = sgd_step(model, &mut adam, task, &mut rng, opts, lr, s + 1)?;
        history.rows.push(HistoryRow { step: s + 1, loss, lr, projected: false });
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    /// Weights at the end of training.
    pub model: ToyModel,
    /// Quantized tensors of the last projection.
    pub quantized: Vec<QuantizedTensor>,
    /// 0-based update indices at which projections happened.
    pub projections: Vec<usize>,
    pub history: LossHistory,
}

impl RetrainOutcome {
    /// The model at the last projection: final weights with every planned
    /// matrix replaced by its quantized reconstruction.
    pub fn quantized_model(&self) -> ToyModel {
        let ck = self.model.to_checkpoint(&self.quantized);
        ToyModel::from_checkpoint(&ck).expect("own checkpoint is consistent")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(&self.quantized)
    }
}

/// Retraining with periodic projection onto the quantized grid.
///
/// Before update `s` (0-based) with `s % pnr == 0`, planned weights are
/// replaced by their greedy reconstruction and training continues from
/// there. A projection is also made after the last update when
/// `total_steps % pnr == 0`.
pub fn pnr_retrain(
    model: &ToyModel,
    plan: &PrecisionPlan,
    sched: &TrainSchedule,
    task: &SyntheticTask,
    opts: &TrainOptions,
    freq: Option<&FrequencyTable>,
) -> Result<RetrainOutcome> {
    check_run(sched, opts, task, model)?;
    model.check_plan(plan)?;
    plan.validate()?;
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(model.params());
    let d = model.config().d_model;
    let mut history = LossHistory::default();
    let mut projections = Vec::new();
    let mut quantized = Vec::new();
    for s in 0..=sched.total_steps {
        let project = s % sched.pnr == 0;
        if project {
            quantized = model.project(plan, freq)?;
            projections.push(s);
        }
        if s == sched.total_steps {
            break;
        }
        let lr = lr_at(s + 1, sched, d)?;
        let loss = sgd_step(&mut model, &mut adam, task, &mut rng, opts, lr, s + 1)?;
        history.rows.push(HistoryRow { step: s + 1, loss, lr, projected: project });
    }
    Ok(RetrainOutcome { model, quantized, projections, history })
}

/// Phase plans for `target`: embedding only, then embedding and decoder,
/// then everything. `phases` keeps the last `phases` of those three.
pub fn phase_plans(target: &PrecisionPlan, phases: usize) -> Result<Vec<PrecisionPlan>> {
    if !(1..=3).contains(&phases) {
        return Err(Error::InvalidInput(format!("phase count {phases} outside 1..=3")));
    }
    let upto = |keep: &[Group]| {
        let mut p = target.clone();
        for g in Group::ALL {
            if !keep.contains(&g) {
                p.groups.insert(g, Precision::Full);
            }
        }
        p.overrides.retain(|name, _| crate::planner::group_of(name).is_some_and(|g| keep.contains(&g)));
        p
    };
    let all = vec![
        upto(&[Group::Embedding]),
        upto(&[Group::Embedding, Group::DecDd, Group::DecEd, Group::DecFfn]),
        target.clone(),
    ];
    Ok(all[3 - phases..].to_vec())
}

/// Runs [`pnr_retrain`] per phase, each warm-started from the previous
/// phase's final weights. Plans must target a growing set of groups.
pub fn multiphase_retrain(
    model: &ToyModel,
    plans: &[PrecisionPlan],
    sched: &TrainSchedule,
    task: &SyntheticTask,
    opts: &TrainOptions,
    freq: Option<&FrequencyTable>,
) -> Result<Vec<RetrainOutcome>> {
    if plans.is_empty() {
        return Err(Error::InvalidInput("no phases given".into()));
    }
    for (i, w) in plans.windows(2).enumerate() {
        let (a, b) = (w[0].quantized_groups(), w[1].quantized_groups());
        if !a.is_subset(&b) {
            let dropped: Vec<String> = a.difference(&b).map(|g| g.to_string()).collect();
            return Err(Error::InvalidInput(format!(
                "phase {} stops quantizing {}; phase plans must be cumulative",
                i + 2,
                dropped.join(", ")
            )));
        }
    }
    let mut outcomes: Vec<RetrainOutcome> = Vec::with_capacity(plans.len());
    for plan in plans {
        let start = outcomes.last().map_or(model, |o| &o.model);
        outcomes.push(pnr_retrain(start, plan, sched, task, opts, freq)?);
    }
    Ok(outcomes)
}
