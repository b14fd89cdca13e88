//! The optimization loop: bank initialization, one-off clustering,
//! centroid-initialized classifiers, then epochs of paired mini-batches with
//! plain SGD on encoder and classifiers followed by momentum updates of the
//! memory banks.

use std::fmt::Write as _;

use crate::clustering::{build_cluster_runs, ClusterRun, KMeansOptions};
use crate::dataset::{Domain, DomainDataset, UnlabeledView};
use crate::encoder::{Activation, Encoder, EncoderGrads, ForwardTape};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::numerics::{Matrix, Rng};
use crate::objective::{init_classifiers, joint_loss, BatchView, ClassifierPair, CrossReduction, LossReport, LossVariant, ObjectiveConfig};
use crate::retrieval::evaluate_cross_domain;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Memory momentum η.
    pub momentum: f64,
    /// Samples drawn from each domain per mini-batch.
    pub batch_size: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub tau: f64,
    pub lr: f64,
    /// Base cluster count; run `r` uses `r · base_k` clusters.
    pub base_k: usize,
    pub runs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub reduction: CrossReduction,
    pub variant: LossVariant,
    pub kmeans: KMeansOptions,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_every: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            momentum: 0.95,
            batch_size: 16,
            lambda: 0.01,
            epochs: 20,
            tau: 0.01,
            lr: 0.003,
            base_k: 10,
            runs: 4,
            seed: 0,
            hidden: vec![128],
            embed_dim: 64,
            activation: Activation::Tanh,
            reduction: CrossReduction::Mean,
            variant: LossVariant::Full,
            kmeans: KMeansOptions::default(),
            eval_every: 1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.runs == 0 || self.base_k == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs, runs, n_k and eval_every must be ≥ 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be ≥ 0", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be > 0", self.tau));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be ≥ 0", self.lr));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            tau: self.tau,
            reduction: self.reduction,
            variant: self.variant,
        }
    }
}

/// Everything that evolves during training: `Θ`, the classifier pairs, and
/// both memory banks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Encoder,
    pub classifiers: Vec<ClassifierPair>,
    pub bank_a: MemoryBank,
    pub bank_b: MemoryBank,
    pub epoch: usize,
}

impl TrainState {
    pub fn bank(&self, domain: Domain) -> &MemoryBank {
        match domain {
            Domain::A => &self.bank_a,
            Domain::B => &self.bank_b,
        }
    }
}

fn check_views(train_a: &UnlabeledView, train_b: &UnlabeledView) -> Result<()> {
    if train_a.domain() != Domain::A || train_b.domain() != Domain::B {
        return Err(Error::invalid("training views must be domain A then domain B"));
    }
    if train_a.is_empty() || train_b.is_empty() {
        return Err(Error::invalid("both training domains need samples"));
    }
    if train_a.dim() != train_b.dim() {
        return Err(Error::invalid(format!(
            "domains have different input dims ({} vs {})",
            train_a.dim(),
            train_b.dim()
        )));
    }
    Ok(())
}

/// Initial encoder, banks filled with its features, clustering at every
/// granularity, and centroid-initialized classifiers.
pub fn initialize(train_a: &UnlabeledView, train_b: &UnlabeledView, hp: &Hyperparams) -> Result<(TrainState, Vec<ClusterRun>)> {
    hp.validate()?;
    check_views(train_a, train_b)?;
    let encoder = Encoder::init(train_a.dim(), &hp.hidden, hp.embed_dim, hp.activation, hp.seed)?;
    let bank_a = MemoryBank::init(train_a, &encoder, hp.momentum)?;
    let bank_b = MemoryBank::init(train_b, &encoder, hp.momentum)?;
    let runs = build_cluster_runs(&bank_a, &bank_b, hp.base_k, hp.runs, &hp.kmeans, hp.seed)?;
    let classifiers = init_classifiers(&runs, hp.embed_dim)?;
    Ok((
        TrainState {
            encoder,
            classifiers,
            bank_a,
            bank_b,
            epoch: 0,
        },
        runs,
    ))
}

/// What one optimization step saw and did.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub report: LossReport,
    /// Memory rows read for the loss (before this step's bank update).
    pub memory_a: Matrix,
    pub memory_b: Matrix,
    pub features_a: Vec<Vec<f64>>,
    pub features_b: Vec<Vec<f64>>,
    pub encoder_grads: EncoderGrads,
}

/// One mini-batch: forward, joint loss, SGD on all parameters, then momentum
/// updates of the batch's memory slots with the features computed here.
pub fn train_step(state: &mut TrainState, batch_a: (&[u64], &[&[f64]]), batch_b: (&[u64], &[&[f64]]), hp: &Hyperparams) -> Result<StepTrace> {
    let forward = |xs: &[&[f64]]| xs.iter().map(|x| state.encoder.forward(x)).collect::<Result<Vec<ForwardTape>>>();
    let tapes_a = forward(batch_a.1)?;
    let tapes_b = forward(batch_b.1)?;
    let features_a: Vec<Vec<f64>> = tapes_a.iter().map(|t| t.v.clone()).collect();
    let features_b: Vec<Vec<f64>> = tapes_b.iter().map(|t| t.v.clone()).collect();
    let memory_a = state.bank_a.snapshot(batch_a.0)?;
    let memory_b = state.bank_b.snapshot(batch_b.0)?;

    let report = joint_loss(
        &state.classifiers,
        BatchView {
            features_a: &features_a,
            features_b: &features_b,
            memory_a: &memory_a,
            memory_b: &memory_b,
        },
        &hp.objective(),
    )?;

    let mut encoder_grads = EncoderGrads::zeros_like(&state.encoder);
    for (tape, g) in tapes_a.iter().zip(&report.grad_v_a).chain(tapes_b.iter().zip(&report.grad_v_b)) {
        state.encoder.backward_into(tape, g, &mut encoder_grads)?;
    }

    state.encoder.sgd_step(&encoder_grads, hp.lr);
    for (pair, (ga, gb)) in state.classifiers.iter_mut().zip(&report.grad_w) {
        for (w, g) in pair.w_a.as_mut_slice().iter_mut().zip(ga.as_slice()) {
            *w -= hp.lr * g;
        }
        for (w, g) in pair.w_b.as_mut_slice().iter_mut().zip(gb.as_slice()) {
            *w -= hp.lr * g;
        }
    }

    for (&id, v) in batch_a.0.iter().zip(&features_a) {
        state.bank_a.momentum_update(id, v)?;
    }
    for (&id, v) in batch_b.0.iter().zip(&features_b) {
        state.bank_b.momentum_update(id, v)?;
    }

    Ok(StepTrace {
        report,
        memory_a,
        memory_b,
        features_a,
        features_b,
        encoder_grads,
    })
}

/// Index pairs for one epoch. Both domains are reshuffled; the larger one is
/// walked once in chunks of `batch_size` (last chunk may be shorter), and the
/// smaller one supplies the same number of samples per batch from a stream
/// that reshuffles whenever it runs out.
pub fn epoch_batches(n_a: usize, n_b: usize, batch_size: usize, rng: &mut Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut order_a: Vec<usize> = (0..n_a).collect();
    let mut order_b: Vec<usize> = (0..n_b).collect();
    rng.shuffle(&mut order_a);
    rng.shuffle(&mut order_b);
    let a_is_long = n_a >= n_b;
    let (long, mut short) = if a_is_long { (order_a, order_b) } else { (order_b, order_a) };
    let n_short = short.len();
    let mut cursor = 0;
    let mut batches = Vec::with_capacity(long.len().div_ceil(batch_size));
    for chunk in long.chunks(batch_size) {
        let mut partner = Vec::with_capacity(chunk.len());
        while partner.len() < chunk.len() {
            if cursor == n_short {
                rng.shuffle(&mut short);
                cursor = 0;
            }
            partner.push(short[cursor]);
            cursor += 1;
        }
        batches.push(if a_is_long { (chunk.to_vec(), partner) } else { (partner, chunk.to_vec()) });
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub batch: usize,
    pub l_in: f64,
    pub l_cross: f64,
    pub weighted_cross: f64,
    pub total: f64,
}

/// Runs one epoch and returns the per-batch losses.
pub fn run_epoch(state: &mut TrainState, train_a: &UnlabeledView, train_b: &UnlabeledView, hp: &Hyperparams) -> Result<Vec<BatchLog>> {
    check_views(train_a, train_b)?;
    let epoch = state.epoch + 1;
    let mut rng = Rng::new(hp.seed).derive(0x6570_0000 + epoch as u64);
    let plan = epoch_batches(train_a.len(), train_b.len(), hp.batch_size, &mut rng);
    let mut logs = Vec::with_capacity(plan.len());
    for (j, (ia, ib)) in plan.iter().enumerate() {
        let ids_a: Vec<u64> = ia.iter().map(|&i| train_a.ids()[i]).collect();
        let ids_b: Vec<u64> = ib.iter().map(|&i| train_b.ids()[i]).collect();
        let xs_a: Vec<&[f64]> = ia.iter().map(|&i| train_a.inputs()[i].as_slice()).collect();
        let xs_b: Vec<&[f64]> = ib.iter().map(|&i| train_b.inputs()[i].as_slice()).collect();
        let trace = train_step(state, (&ids_a, &xs_a), (&ids_b, &xs_b), hp)?;
        let r = &trace.report;
        if !r.total.is_finite() {
            return Err(Error::invalid(format!("loss diverged at epoch {epoch}, batch {j}")));
        }
        logs.push(BatchLog {
            epoch,
            batch: j,
            l_in: r.l_in,
            l_cross: r.l_cross,
            weighted_cross: r.weighted_cross,
            total: r.total,
        });
    }
    state.epoch = epoch;
    Ok(logs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub direction: (Domain, Domain),
    pub map: f64,
}

/// Per-epoch cross-domain mAP@All, append-only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    rows: Vec<MetricRow>,
}

pub const DIRECTIONS: [(Domain, Domain); 2] = [(Domain::A, Domain::B), (Domain::B, Domain::A)];

fn direction_name((q, g): (Domain, Domain)) -> String {
    format!("{q}->{g}")
}

impl MetricLog {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn series(&self, direction: (Domain, Domain)) -> Vec<f64> {
        self.rows.iter().filter(|r| r.direction == direction).map(|r| r.map).collect()
    }

    /// Maximum over epochs, per direction independently.
    pub fn best(&self, direction: (Domain, Domain)) -> Option<f64> {
        self.series(direction).into_iter().reduce(f64::max)
    }

    pub fn last(&self, direction: (Domain, Domain)) -> Option<f64> {
        self.series(direction).last().copied()
    }

    /// Mean over both directions of the per-direction Best.
    pub fn mean_best(&self) -> Option<f64> {
        let a = self.best(DIRECTIONS[0])?;
        let b = self.best(DIRECTIONS[1])?;
        Some(0.5 * (a + b))
    }

    pub fn mean_last(&self) -> Option<f64> {
        let a = self.last(DIRECTIONS[0])?;
        let b = self.last(DIRECTIONS[1])?;
        Some(0.5 * (a + b))
    }

    /// `epoch,direction,mAP` rows followed by `best` and `last` summaries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,direction,mAP\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.epoch, direction_name(r.direction), r.map).unwrap();
        }
        for d in DIRECTIONS {
            if let Some(b) = self.best(d) {
                writeln!(out, "best,{},{b}", direction_name(d)).unwrap();
            }
        }
        for d in DIRECTIONS {
            if let Some(l) = self.last(d) {
                writeln!(out, "last,{},{l}", direction_name(d)).unwrap();
            }
        }
        out
    }
}

pub fn batch_log_csv(logs: &[BatchLog]) -> String {
    let mut out = String::from("epoch,batch,l_in,l_cross,weighted_cross,total\n");
    for b in logs {
        writeln!(out, "{},{},{},{},{},{}", b.epoch, b.batch, b.l_in, b.l_cross, b.weighted_cross, b.total).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: MetricLog,
    pub batches: Vec<BatchLog>,
    /// `[A→B, B→A]` mAP of the untrained encoder.
    pub baseline: [f64; 2],
}

impl TrainOutcome {
    pub fn baseline_mean(&self) -> f64 {
        0.5 * (self.baseline[0] + self.baseline[1])
    }
}

/// Full run: initialize, then `hp.epochs` epochs, evaluating both retrieval
/// directions on the labelled test sets every `hp.eval_every` epochs and
/// after the last one.
pub fn train(train_a: &UnlabeledView, train_b: &UnlabeledView, test_a: &DomainDataset, test_b: &DomainDataset, hp: &Hyperparams) -> Result<TrainOutcome> {
    train_with(train_a, train_b, test_a, test_b, hp, |_, _| {})
}

/// [`train`] with a callback after each epoch's evaluation.
pub fn train_with<F>(train_a: &UnlabeledView, train_b: &UnlabeledView, test_a: &DomainDataset, test_b: &DomainDataset, hp: &Hyperparams, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &[MetricRow]),
{
    let (mut state, _) = initialize(train_a, train_b, hp)?;
    let initial = evaluate_cross_domain(&state.encoder, test_a, test_b)?;
    let baseline = [initial[0].map, initial[1].map];
    let mut metrics = MetricLog::default();
    let mut batches = Vec::new();
    for _ in 0..hp.epochs {
        batches.extend(run_epoch(&mut state, train_a, train_b, hp)?);
        if state.epoch % hp.eval_every != 0 && state.epoch != hp.epochs {
            continue;
        }
        let reports = evaluate_cross_domain(&state.encoder, test_a, test_b)?;
        let start = metrics.rows().len();
        for r in &reports {
            metrics.push(MetricRow {
                epoch: state.epoch,
                direction: (r.query_domain, r.gallery_domain),
                map: r.map,
            });
        }
        on_epoch(state.epoch, &metrics.rows()[start..]);
    }
    Ok(TrainOutcome {
        state,
        metrics,
        batches,
        baseline,
    })
}
