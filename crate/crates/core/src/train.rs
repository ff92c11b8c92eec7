//! Minimax training via gradient reversal, plus evaluation and run records.
//!
//! One optimiser step per minibatch updates every parameter. The
//! discriminator sees the transported outputs through a reversal node, so
//! it descends on its own classification loss while the feature extractor
//! and heads receive the reversed (confusing) gradient. An alternating
//! two-pass mode is available for comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{BatchPair, BatchSampler, DomainPair, TrainingData, DEFAULT_BATCH};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossTerms, LossWeights};
use crate::matrix::Matrix;
use crate::model::{BoundParams, ChattyModel, DiscInput, ModelSpec, TransportMode};

/// `k` in `λ2 = k / classes`, fitted so that 31 classes give 0.0016.
pub const LAMBDA2_PER_CLASS: f64 = 0.0496;

pub const METRICS_HEADER: &str = "iter,l_c,l_adv,l_tl,l_mcc,l_total,src_acc,tgt_acc";

/// Heuristic transport weight inversely proportional to the class count.
pub fn default_lambda2(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::param("classes", "need at least 2"));
    }
    Ok(LAMBDA2_PER_CLASS / classes as f64)
}

/// Named transport-weight presets from the benchmark setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Office31,
    OfficeHome,
}

impl Preset {
    pub fn lambda2(self) -> f64 {
        match self {
            Preset::Office31 => losses::OFFICE31_LAMBDA2,
            Preset::OfficeHome => losses::OFFICE_HOME_LAMBDA2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlVariant {
    Plain,
    Cosine,
    Embedded,
}

/// Transport loss in single-transport mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleTransportLoss {
    /// `Y = T1·C·T1ᵀ`
    SelfSpread,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    Constant,
    /// `scale · (2 / (1 + exp(-10 p)) - 1)` with `p` the training progress.
    Warmup,
}

/// Network shape options that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub disc_hidden: usize,
    pub mode: TransportMode,
    pub lambda: f64,
    pub disc_input: DiscInput,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![128, 64],
            disc_hidden: 32,
            mode: TransportMode::Dual,
            lambda: 0.5,
            disc_input: DiscInput::Softmax,
        }
    }
}

impl Architecture {
    pub fn model_spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden: self.hidden.clone(),
            classes,
            disc_hidden: self.disc_hidden,
            mode: self.mode,
            lambda: self.lambda,
            disc_input: self.disc_input,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub arch: Architecture,
    pub weights: LossWeights,
    pub grl_scale: f64,
    pub grl_schedule: GrlSchedule,
    pub mcc_enabled: bool,
    pub tl_variant: TlVariant,
    pub single_tl: SingleTransportLoss,
    /// Two passes per step (discriminator, then the rest) instead of one.
    pub alternating: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub snapshot_iters: Vec<usize>,
    /// Extra snapshots at every multiple of this; 0 disables.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            iterations: 10_000,
            batch_size: DEFAULT_BATCH,
            arch: Architecture::default(),
            weights: LossWeights::default(),
            grl_scale: 1.0,
            grl_schedule: GrlSchedule::Constant,
            mcc_enabled: true,
            tl_variant: TlVariant::Plain,
            single_tl: SingleTransportLoss::SelfSpread,
            alternating: false,
            seed: 0,
            eval_every: 500,
            snapshot_iters: vec![0, 2500, 5000, 10_000],
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    /// Plain source-only training: no adversarial, transport or MCC terms.
    pub fn source_only(mut self) -> Self {
        self.weights.lambda1 = 0.0;
        self.weights.lambda2 = 0.0;
        self.mcc_enabled = false;
        self
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", "must be a non-negative real"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0,1)"));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::param("eval_every", "must be positive"));
        }
        if !self.grl_scale.is_finite() {
            return Err(Error::param("grl_scale", "must be finite"));
        }
        self.weights.validate(classes)?;
        if self.tl_variant == TlVariant::Embedded && self.weights.confusion_embed.is_none() {
            return Err(Error::param(
                "confusion_embed",
                "the embedded transport loss needs a confusion matrix",
            ));
        }
        Ok(())
    }

    pub fn grl_at(&self, iteration: usize) -> f64 {
        match self.grl_schedule {
            GrlSchedule::Constant => self.grl_scale,
            GrlSchedule::Warmup => {
                let p = iteration as f64 / self.iterations as f64;
                self.grl_scale * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
            }
        }
    }
}

/// SGD with classical momentum: `v = μv + g; p -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(model: &ChattyModel, lr: f64, momentum: f64) -> Self {
        let velocity = model
            .params()
            .into_iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Sgd {
            lr,
            momentum,
            velocity,
        }
    }

    /// Updates the parameters whose `mask` entry is true.
    pub fn step(&mut self, model: &mut ChattyModel, grads: &[Matrix], mask: &[bool]) {
        for (((p, v), g), &on) in model
            .params_mut()
            .into_iter()
            .zip(self.velocity.iter_mut())
            .zip(grads)
            .zip(mask)
        {
            if !on {
                continue;
            }
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            p.axpy(-self.lr, v);
        }
    }
}

/// Graph of one loss evaluation, kept alive for the backward pass.
pub struct StepGraph {
    pub tape: Tape,
    pub params: BoundParams,
    pub total: crate::autodiff::Var,
    pub breakdown: LossBreakdown,
}

impl StepGraph {
    pub fn grads(&self) -> Vec<Matrix> {
        self.params
            .vars()
            .iter()
            .map(|&v| self.tape.grad(v).expect("backward ran").clone())
            .collect()
    }
}

/// Builds every loss term for a batch.
///
/// Source and target samples go through the network together; the
/// transport loss sees all rows, cross-entropy the source rows and MCC the
/// target rows.
pub fn build_losses(
    model: &ChattyModel,
    batch: &BatchPair,
    config: &TrainConfig,
    grl_scale: f64,
) -> Result<StepGraph> {
    build_losses_on(Tape::new(), model, batch, config, grl_scale)
}

fn build_losses_on(
    mut tape: Tape,
    model: &ChattyModel,
    batch: &BatchPair,
    config: &TrainConfig,
    grl_scale: f64,
) -> Result<StepGraph> {
    let ns = batch.src_x.rows();
    let n = ns + batch.tgt_x.rows();
    let params = model.bind(&mut tape);
    let x = Matrix::vstack(&batch.src_x, &batch.tgt_x)?;
    let x = tape.constant(x);
    let f = model.forward_on(&mut tape, &params, x, grl_scale)?;

    let interp_src = tape.slice_rows(f.interp, 0, ns)?;
    let interp_tgt = tape.slice_rows(f.interp, ns, n)?;
    let l_c = losses::cross_entropy(&mut tape, interp_src, &batch.src_y)?;

    let disc_src = tape.slice_rows(f.disc_out, 0, ns)?;
    let disc_tgt = tape.slice_rows(f.disc_out, ns, n)?;
    let l_adv = losses::adversarial_loss(&mut tape, disc_src, disc_tgt)?;

    let w = &config.weights;
    let classes = model.spec().classes;
    let pair = match (f.t2, config.single_tl) {
        (Some(t2), _) => Some((f.t1, t2)),
        (None, SingleTransportLoss::SelfSpread) => Some((f.t1, f.t1)),
        (None, SingleTransportLoss::Off) => None,
    };
    let l_tl = match pair {
        None => tape.constant(Matrix::scalar(0.0)),
        Some((a, b)) => match config.tl_variant {
            TlVariant::Plain => {
                let y = losses::transport_yield(&mut tape, a, &w.class_info.matrix(classes), b)?;
                losses::transport_loss(&mut tape, y)?
            }
            TlVariant::Cosine => losses::transport_loss_cos(&mut tape, a, b)?,
            TlVariant::Embedded => {
                let m = w.confusion_embed.as_ref().ok_or_else(|| {
                    Error::param("confusion_embed", "required by the embedded variant")
                })?;
                losses::transport_loss_embedded(&mut tape, a, b, m)?
            }
        },
    };

    let l_mcc = losses::mcc_loss(&mut tape, interp_tgt, w.temperature)?;
    let terms = LossTerms {
        l_c,
        l_adv,
        l_tl,
        l_mcc,
    };
    let (total, breakdown) = losses::total_loss(&mut tape, &terms, w, config.mcc_enabled)?;
    Ok(StepGraph {
        tape,
        params,
        total,
        breakdown,
    })
}

fn check_finite(b: &LossBreakdown, iteration: usize) -> Result<()> {
    let terms = [
        ("l_c", b.l_c),
        ("l_adv", b.l_adv),
        ("l_tl", b.l_tl),
        ("l_mcc", b.l_mcc),
        ("l_total", b.l_total),
    ];
    for (term, v) in terms {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, iteration });
        }
    }
    Ok(())
}

/// Trainer state: the model plus its optimiser.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ChattyModel,
    pub opt: Sgd,
    pub config: TrainConfig,
    reversal_fault: bool,
}

impl Trainer {
    pub fn new(model: ChattyModel, config: TrainConfig) -> Result<Self> {
        config.validate(model.spec().classes)?;
        let opt = Sgd::new(&model, config.lr, config.momentum);
        Ok(Trainer {
            model,
            opt,
            config,
            reversal_fault: false,
        })
    }

    /// Fault injection used by the verification suite.
    pub fn inject_reversal_sign_fault(&mut self, on: bool) {
        self.reversal_fault = on;
    }

    /// Loss graph and gradients for `batch` without touching the parameters.
    pub fn gradients(&self, batch: &BatchPair, iteration: usize) -> Result<StepGraph> {
        let mut tape = Tape::new();
        tape.inject_reversal_sign_fault(self.reversal_fault);
        let grl = self.config.grl_at(iteration);
        let mut g = build_losses_on(tape, &self.model, batch, &self.config, grl)?;
        check_finite(&g.breakdown, iteration)?;
        g.tape.backward(g.total)?;
        Ok(g)
    }

    /// One optimisation step on `batch`.
    pub fn train_step(&mut self, batch: &BatchPair, iteration: usize) -> Result<LossBreakdown> {
        let groups = self.model.param_groups();
        let g = self.gradients(batch, iteration)?;
        let breakdown = g.breakdown;
        let grads = g.grads();
        if !self.config.alternating {
            self.opt
                .step(&mut self.model, &grads, &vec![true; groups.len()]);
            return Ok(breakdown);
        }
        let disc: Vec<bool> = groups.iter().map(|g| g.is_discriminator()).collect();
        self.opt.step(&mut self.model, &grads, &disc);
        let rest: Vec<bool> = disc.iter().map(|d| !d).collect();
        let grads = self.gradients(batch, iteration)?.grads();
        self.opt.step(&mut self.model, &grads, &rest);
        Ok(breakdown)
    }
}

/// Fraction of predictions matching `labels`.
pub fn evaluate(model: &ChattyModel, x: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(x)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iter: usize,
    pub l_c: f64,
    pub l_adv: f64,
    pub l_tl: f64,
    pub l_mcc: f64,
    pub l_total: f64,
    pub src_acc: f64,
    pub tgt_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Loss columns hold the mean over the steps since the previous row;
    /// the iteration-0 row holds the losses of an un-updated probe batch.
    pub rows: Vec<EvalRow>,
    /// Target interpolated logits keyed by iteration.
    pub snapshots: BTreeMap<usize, Matrix>,
    /// MCC loss of the final model on the whole target set.
    pub final_target_mcc: f64,
}

impl RunRecord {
    pub fn final_row(&self) -> &EvalRow {
        self.rows.last().expect("a run records at least one row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iter, r.l_c, r.l_adv, r.l_tl, r.l_mcc, r.l_total, r.src_acc, r.tgt_acc
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub struct RunOutcome {
    pub record: RunRecord,
    pub model: ChattyModel,
}

/// Held-out evaluation data. Only read at evaluation points.
struct Evaluator<'a> {
    source_x: &'a Matrix,
    source_y: &'a [usize],
    target_x: &'a Matrix,
    target_y: &'a [usize],
}

impl Evaluator<'_> {
    fn accuracies(&self, model: &ChattyModel) -> Result<(f64, f64)> {
        Ok((
            evaluate(model, self.source_x, self.source_y)?,
            evaluate(model, self.target_x, self.target_y)?,
        ))
    }
}

fn probe_batch(data: &TrainingData<'_>, size: usize) -> BatchPair {
    let ns = size.min(data.source_x.rows());
    let nt = size.min(data.target_x.rows());
    BatchPair {
        src_x: data.source_x.slice_rows(0, ns),
        src_y: data.source_y[..ns].to_vec(),
        tgt_x: data.target_x.slice_rows(0, nt),
    }
}

fn mean_breakdown(acc: &[LossBreakdown]) -> LossBreakdown {
    let n = acc.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in acc {
        m.l_c += b.l_c;
        m.l_adv += b.l_adv;
        m.l_tl += b.l_tl;
        m.l_mcc += b.l_mcc;
        m.l_total += b.l_total;
    }
    LossBreakdown {
        l_c: m.l_c / n,
        l_adv: m.l_adv / n,
        l_tl: m.l_tl / n,
        l_mcc: m.l_mcc / n,
        l_total: m.l_total / n,
    }
}

/// Seeds for model initialisation and batch sampling derived from one seed.
fn derived_seeds(seed: u64) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.gen(), rng.gen())
}

/// Trains a fresh model on `pair` and records metrics and snapshots.
pub fn run(pair: &DomainPair, config: &TrainConfig) -> Result<RunOutcome> {
    let eval = Evaluator {
        source_x: &pair.source_x,
        source_y: &pair.source_y,
        target_x: &pair.target_x,
        target_y: pair.target_labels(),
    };
    run_on(pair.training_view(), &eval, config)
}

fn run_on(
    data: TrainingData<'_>,
    eval: &Evaluator<'_>,
    config: &TrainConfig,
) -> Result<RunOutcome> {
    config.validate(data.classes)?;
    let (init_seed, batch_seed) = derived_seeds(config.seed);
    let spec = config.arch.model_spec(data.source_x.cols(), data.classes);
    let model = ChattyModel::init(spec, init_seed)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut sampler = BatchSampler::new(&data, config.batch_size, batch_seed)?;

    let mut snapshot_at: Vec<usize> = config
        .snapshot_iters
        .iter()
        .copied()
        .filter(|&i| i <= config.iterations)
        .collect();
    if config.snapshot_every > 0 {
        snapshot_at.extend((0..=config.iterations).step_by(config.snapshot_every));
    }
    snapshot_at.push(config.iterations);

    let mut rows = Vec::new();
    let mut snapshots = BTreeMap::new();

    let probe = build_losses(
        &trainer.model,
        &probe_batch(&data, config.batch_size),
        config,
        config.grl_at(0),
    )?;
    check_finite(&probe.breakdown, 0)?;
    let (src_acc, tgt_acc) = eval.accuracies(&trainer.model)?;
    rows.push(row(0, &probe.breakdown, src_acc, tgt_acc));
    if snapshot_at.contains(&0) {
        snapshots.insert(0, trainer.model.interp_logits(data.target_x)?);
    }

    let mut window = Vec::with_capacity(config.eval_every);
    for it in 1..=config.iterations {
        let batch = sampler.next_batch(&data);
        window.push(trainer.train_step(&batch, it)?);
        if it % config.eval_every == 0 || it == config.iterations {
            let (src_acc, tgt_acc) = eval.accuracies(&trainer.model)?;
            rows.push(row(it, &mean_breakdown(&window), src_acc, tgt_acc));
            window.clear();
        }
        if snapshot_at.contains(&it) {
            snapshots.insert(it, trainer.model.interp_logits(data.target_x)?);
        }
    }

    let final_logits = trainer.model.interp_logits(data.target_x)?;
    let final_target_mcc = losses::mcc_value(&final_logits, config.weights.temperature)?;
    Ok(RunOutcome {
        record: RunRecord {
            rows,
            snapshots,
            final_target_mcc,
        },
        model: trainer.model,
    })
}

fn row(iter: usize, b: &LossBreakdown, src_acc: f64, tgt_acc: f64) -> EvalRow {
    EvalRow {
        iter,
        l_c: b.l_c,
        l_adv: b.l_adv,
        l_tl: b.l_tl,
        l_mcc: b.l_mcc,
        l_total: b.l_total,
        src_acc,
        tgt_acc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, gen_moons, BlobSpec, MoonsSpec};
    use crate::model::ParamGroup;
    use crate::oracle;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: Architecture {
                hidden: vec![6, 4],
                disc_hidden: 5,
                ..Architecture::default()
            },
            weights: LossWeights {
                lambda2: 0.05,
                ..LossWeights::default()
            },
            iterations: 30,
            eval_every: 10,
            snapshot_iters: vec![0, 10],
            ..TrainConfig::default()
        }
    }

    fn small_pair() -> DomainPair {
        gen_moons(
            &MoonsSpec {
                n: 40,
                rotation_deg: 30.0,
                noise: 0.1,
                standardize: true,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn lambda2_defaults() {
        assert!((default_lambda2(31).unwrap() - 0.0016).abs() < 1e-15);
        assert!((default_lambda2(65).unwrap() - 0.000763).abs() < 1e-6);
        assert!((default_lambda2(10).unwrap() - 2.0 * default_lambda2(20).unwrap()).abs() < 1e-15);
        assert!(default_lambda2(1).is_err());
        assert_eq!(Preset::Office31.lambda2(), 0.0016);
        assert_eq!(Preset::OfficeHome.lambda2(), 0.0002);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate(2).is_ok());
        c.iterations = 0;
        assert!(c.validate(2).is_err());
        let mut c = TrainConfig::default();
        c.lr = -1.0;
        assert!(c.validate(2).is_err());
        let mut c = TrainConfig::default();
        c.tl_variant = TlVariant::Embedded;
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig {
            grl_schedule: GrlSchedule::Warmup,
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(c.grl_at(0), 0.0);
        assert!(c.grl_at(100) > 0.99);
        assert!(c.grl_at(20) < c.grl_at(50));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let pair = small_pair();
        let config = TrainConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let spec = config.arch.model_spec(2, 2);
        let model = ChattyModel::init(spec, 1).unwrap();
        let mut t = Trainer::new(model.clone(), config).unwrap();
        let view = pair.training_view();
        let mut s = BatchSampler::new(&view, 16, 0).unwrap();
        t.train_step(&s.next_batch(&view), 1).unwrap();
        assert_eq!(t.model, model);
    }

    #[test]
    fn step_reports_consistent_breakdown() {
        let pair = small_pair();
        let config = tiny_config();
        let model = ChattyModel::init(config.arch.model_spec(2, 2), 1).unwrap();
        let mut t = Trainer::new(model, config.clone()).unwrap();
        let view = pair.training_view();
        let mut s = BatchSampler::new(&view, 16, 0).unwrap();
        let b = t.train_step(&s.next_batch(&view), 1).unwrap();
        let w = &config.weights;
        let expect = b.l_c + w.lambda1 * b.l_adv + w.lambda2 * b.l_tl + b.l_mcc;
        assert!((b.l_total - expect).abs() < 1e-12);
        assert!(b.l_c >= 0.0 && b.l_adv >= 0.0 && b.l_tl >= 0.0 && b.l_mcc >= 0.0);
    }

    /// Training gradients of the discriminator equal the true derivative of
    /// the adversarial loss; every other parameter receives its negation.
    #[test]
    fn reversal_matches_finite_differences() {
        let pair = small_pair();
        let config = TrainConfig {
            arch: Architecture {
                hidden: vec![2],
                disc_hidden: 3,
                ..Architecture::default()
            },
            weights: LossWeights {
                lambda1: 1.0,
                lambda2: 0.0,
                ..LossWeights::default()
            },
            mcc_enabled: false,
            ..tiny_config()
        };
        let model = ChattyModel::init(config.arch.model_spec(2, 2), 4).unwrap();
        let view = pair.training_view();
        let batch = BatchSampler::new(&view, 4, 2).unwrap().next_batch(&view);

        let with_adv = Trainer::new(model.clone(), config.clone()).unwrap();
        let g_all: Vec<f64> = with_adv
            .gradients(&batch, 1)
            .unwrap()
            .grads()
            .iter()
            .flat_map(|m| m.data().to_vec())
            .collect();
        let no_adv_cfg = TrainConfig {
            weights: LossWeights {
                lambda1: 0.0,
                ..config.weights.clone()
            },
            ..config.clone()
        };
        let g_rest: Vec<f64> = Trainer::new(model.clone(), no_adv_cfg)
            .unwrap()
            .gradients(&batch, 1)
            .unwrap()
            .grads()
            .iter()
            .flat_map(|m| m.data().to_vec())
            .collect();

        let adv_value = |flat: &[f64]| {
            let mut m = model.clone();
            m.set_flat_params(flat).unwrap();
            build_losses(&m, &batch, &config, 1.0)
                .unwrap()
                .breakdown
                .l_adv
        };
        let fd = oracle::central_difference(adv_value, &model.flat_params(), 1e-5);
        let groups = model.flat_groups();
        let mut checked = (0, 0);
        for i in 0..fd.len() {
            let contrib = g_all[i] - g_rest[i];
            let expect = if groups[i] == ParamGroup::Discriminator {
                checked.0 += 1;
                fd[i]
            } else {
                checked.1 += 1;
                -fd[i]
            };
            assert!(
                oracle::relative_error(contrib, expect, 1e-7) < 1e-4,
                "param {i} ({:?}): {contrib} vs {expect}",
                groups[i]
            );
        }
        assert!(checked.0 > 0 && checked.1 > 0);
    }

    #[test]
    fn alternating_mode_runs() {
        let pair = small_pair();
        let config = TrainConfig {
            alternating: true,
            ..tiny_config()
        };
        let out = run(&pair, &config).unwrap();
        assert_eq!(out.record.rows.len(), 4);
    }

    #[test]
    fn run_is_deterministic() {
        let pair = small_pair();
        let a = run(&pair, &tiny_config()).unwrap();
        let b = run(&pair, &tiny_config()).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.record.to_csv(), b.record.to_csv());
        assert_eq!(a.model, b.model);
        let iters: Vec<usize> = a.record.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 10, 20, 30]);
        assert_eq!(
            a.record.snapshots.keys().copied().collect::<Vec<_>>(),
            vec![0, 10, 30]
        );
        for r in &a.record.rows {
            assert!((0.0..=1.0).contains(&r.src_acc) && (0.0..=1.0).contains(&r.tgt_acc));
        }
    }

    #[test]
    fn target_labels_never_affect_training() {
        let pair = small_pair();
        let poisoned: Vec<usize> = pair.target_labels().iter().map(|y| 1 - y).collect();
        let canary = pair.clone().with_target_labels(poisoned).unwrap();
        let a = run(&pair, &tiny_config()).unwrap();
        let b = run(&canary, &tiny_config()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.record.snapshots, b.record.snapshots);
        for (ra, rb) in a.record.rows.iter().zip(&b.record.rows) {
            assert_eq!(ra.l_total, rb.l_total);
            assert_eq!(ra.src_acc, rb.src_acc);
            assert!((ra.tgt_acc + rb.tgt_acc - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_matches_loop() {
        let pair = small_pair();
        let model = ChattyModel::init(tiny_config().arch.model_spec(2, 2), 9).unwrap();
        let pred = model.predict(&pair.target_x).unwrap();
        let acc = evaluate(&model, &pair.target_x, pair.target_labels()).unwrap();
        assert_eq!(acc, oracle::accuracy_loop(&pred, pair.target_labels()));
        assert_eq!(evaluate(&model, &pair.target_x, &pred).unwrap(), 1.0);
    }

    #[test]
    fn single_transport_variants() {
        let pair = small_pair();
        for single_tl in [SingleTransportLoss::SelfSpread, SingleTransportLoss::Off] {
            let mut config = tiny_config();
            config.arch.mode = TransportMode::Single;
            config.single_tl = single_tl;
            let out = run(&pair, &config).unwrap();
            let tl = out.record.rows[0].l_tl;
            match single_tl {
                SingleTransportLoss::Off => assert_eq!(tl, 0.0),
                SingleTransportLoss::SelfSpread => assert!(tl > 0.0),
            }
        }
    }

    #[test]
    fn cosine_and_embedded_variants_train() {
        let pair = small_pair();
        let mut config = tiny_config();
        config.tl_variant = TlVariant::Cosine;
        assert!(run(&pair, &config).is_ok());
        config.tl_variant = TlVariant::Embedded;
        config.weights.confusion_embed =
            Some(Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap());
        assert!(run(&pair, &config).is_ok());
    }

    #[test]
    fn identity_shift_blobs_are_easy() {
        let pair = gen_blobs(
            &BlobSpec {
                classes: 3,
                n_per_class: 100,
                dim: 2,
                rotation_deg: 0.0,
                translation: vec![],
                noise: 0.5,
                standardize: true,
            },
            1,
        )
        .unwrap();
        let config = TrainConfig {
            iterations: 600,
            eval_every: 600,
            arch: Architecture {
                hidden: vec![16, 8],
                ..Architecture::default()
            },
            ..TrainConfig::default().source_only()
        };
        let out = run(&pair, &config).unwrap();
        assert!(
            out.record.final_row().tgt_acc >= 0.95,
            "{:?}",
            out.record.final_row()
        );
    }

    #[test]
    fn antipodal_rotation_defeats_source_only() {
        let pair = gen_blobs(
            &BlobSpec {
                classes: 2,
                n_per_class: 100,
                dim: 2,
                rotation_deg: 180.0,
                translation: vec![],
                noise: 0.5,
                standardize: true,
            },
            1,
        )
        .unwrap();
        let config = TrainConfig {
            iterations: 600,
            eval_every: 600,
            arch: Architecture {
                hidden: vec![16, 8],
                ..Architecture::default()
            },
            ..TrainConfig::default().source_only()
        };
        let out = run(&pair, &config).unwrap();
        assert!(out.record.final_row().tgt_acc <= 0.2);
    }

    #[test]
    fn nan_inputs_abort_with_term_name() {
        let mut pair = small_pair();
        pair.source_x.set(0, 0, f64::NAN);
        let config = tiny_config();
        let err = run(&pair, &config).err().unwrap();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
