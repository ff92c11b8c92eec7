//! Oracle and gradient-check suite.
//!
//! Every check uses fixed internal seeds, so two runs give identical
//! reports. Each check is also exposed on its own for the test harnesses.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{gen_moons, BatchPair, MoonsSpec};
use crate::error::Result;
use crate::losses::{self, LossWeights};
use crate::matrix::Matrix;
use crate::model::{ChattyModel, ParamGroup};
use crate::oracle;
use crate::train::{self, Architecture, TrainConfig, Trainer};

pub const TL_ORACLE_TOL: f64 = 1e-10;
pub const TL_IDENTITY_TOL: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute differences below this count as agreement in relative checks.
pub const FD_ABS_FLOOR: f64 = 1e-7;
pub const MCC_TOL: f64 = 1e-9;
pub const ADV_FIXED_POINT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check {
            name,
            passed,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Flip the sign of the reversal node's backward pass.
    pub reversal_fault: bool,
}

/// Runs every check.
pub fn run_all(opts: VerifyOptions) -> Report {
    let checks = vec![
        transport_oracle(200),
        transport_gradient_identity(50),
        full_model_gradients(10),
        mcc_properties(100),
        adversarial_fixed_point(),
        gradient_sign_contract(opts.reversal_fault),
        determinism_replay(),
    ];
    Report { checks }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

fn failed(name: &'static str, e: crate::Error) -> Check {
    Check::new(name, false, format!("error: {e}"))
}

/// Plain and embedded transport losses against the triple-loop oracle.
pub fn transport_oracle(instances: usize) -> Check {
    const NAME: &str = "transport loss oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(0x71);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=6);
        let t1 = rand_matrix(&mut rng, b, c, 2.0);
        let t2 = rand_matrix(&mut rng, b, c, 2.0);
        let m = rand_matrix(&mut rng, c, c, 2.0);
        let expect = oracle::transport_loss_loop(&t1, &m, &t2);
        let got = (|| -> Result<(f64, f64)> {
            let mut tape = Tape::new();
            let (a, bv) = (tape.constant(t1.clone()), tape.constant(t2.clone()));
            let y = losses::transport_yield(&mut tape, a, &m, bv)?;
            let plain = losses::transport_loss(&mut tape, y)?;
            let emb = losses::transport_loss_embedded(&mut tape, a, bv, &m)?;
            Ok((tape.value(plain).item(), tape.value(emb).item()))
        })();
        let (plain, emb) = match got {
            Ok(v) => v,
            Err(e) => return failed(NAME, e),
        };
        for v in [plain, emb] {
            worst = worst.max(oracle::relative_error(v, expect, 0.0));
        }
    }
    Check::new(
        NAME,
        worst < TL_ORACLE_TOL,
        format!("{instances} instances, max rel err {worst:.2e} (tol {TL_ORACLE_TOL:e})"),
    )
}

/// `∂L/∂T1 = sign(s)·(J−I)·T2·Mᵀ`, which is `sign(s)·(J−I)·T2` for `M = I`.
pub fn transport_gradient_identity(instances: usize) -> Check {
    const NAME: &str = "transport loss closed-form gradient";
    let mut rng = ChaCha8Rng::seed_from_u64(0x72);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let b = rng.gen_range(2..=8);
        let c = rng.gen_range(2..=6);
        let t1 = rand_matrix(&mut rng, b, c, 1.0);
        let t2 = rand_matrix(&mut rng, b, c, 1.0);
        let m = if done % 2 == 0 {
            Matrix::identity(c)
        } else {
            rand_matrix(&mut rng, c, c, 1.0)
        };
        let s = oracle::transport_loss_loop(&t1, &m, &t2);
        let y_offdiag = {
            let y = oracle::matmul_loop(&oracle::matmul_loop(&t1, &m), &t2.transpose());
            y.sum() - y.trace()
        };
        if y_offdiag.abs() < 1e-6 || s == 0.0 {
            continue;
        }
        let sign = y_offdiag.signum();
        let mut j_minus_i = Matrix::filled(b, b, 1.0);
        for i in 0..b {
            j_minus_i.set(i, i, 0.0);
        }
        let closed = oracle::matmul_loop(&oracle::matmul_loop(&j_minus_i, &t2), &m.transpose())
            .map(|v| sign * v);
        let got = (|| -> Result<Matrix> {
            let mut tape = Tape::new();
            let (a, bv) = (tape.param(t1.clone()), tape.constant(t2.clone()));
            let y = losses::transport_yield(&mut tape, a, &m, bv)?;
            let l = losses::transport_loss(&mut tape, y)?;
            tape.backward(l)?;
            Ok(tape.grad(a).expect("param grad").clone())
        })();
        match got {
            Ok(g) => worst = worst.max(g.max_abs_diff(&closed)),
            Err(e) => return failed(NAME, e),
        }
        done += 1;
    }
    Check::new(
        NAME,
        worst < TL_IDENTITY_TOL,
        format!("{instances} instances, max abs err {worst:.2e} (tol {TL_IDENTITY_TOL:e})"),
    )
}

/// A tiny model and batch with every loss term active.
pub fn gradient_check_setup(seed: u64) -> Result<(ChattyModel, BatchPair, TrainConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (b, d, c) = (4, 3, 3);
    let config = TrainConfig {
        arch: Architecture {
            hidden: vec![5, 4],
            disc_hidden: 4,
            ..Architecture::default()
        },
        weights: LossWeights {
            lambda1: 0.7,
            lambda2: 0.3,
            ..LossWeights::default()
        },
        mcc_enabled: true,
        ..TrainConfig::default()
    };
    let mut model = ChattyModel::init(config.arch.model_spec(d, c), seed)?;
    // Zero biases can put hidden units exactly on a relu kink.
    let is_bias: Vec<bool> = model
        .params()
        .iter()
        .map(|(n, _, _)| n.ends_with("bias"))
        .collect();
    for (p, bias) in model.params_mut().into_iter().zip(is_bias) {
        if bias {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let batch = BatchPair {
        src_x: rand_matrix(&mut rng, b, d, 1.5),
        src_y: (0..b).map(|_| rng.gen_range(0..c)).collect(),
        tgt_x: rand_matrix(&mut rng, b, d, 1.5),
    };
    Ok((model, batch, config))
}

/// Largest relative error between the tape gradient of the training
/// objective and central differences, over every scalar parameter.
///
/// The reversal node makes the tape gradient differ from the derivative of
/// the forward value on the generator side: there it equals
/// `∂L_total − (1+s)·λ1·∂L_adv` for reversal scale `s`.
pub fn model_gradient_error(seed: u64) -> Result<(f64, f64)> {
    let (model, batch, config) = gradient_check_setup(seed)?;
    let grl = config.grl_scale;
    let trainer = Trainer::new(model.clone(), config.clone())?;
    let tape_grad: Vec<f64> = trainer
        .gradients(&batch, 1)?
        .grads()
        .iter()
        .flat_map(|m| m.data().to_vec())
        .collect();

    let flat = model.flat_params();
    let eval = |which: fn(&losses::LossBreakdown) -> f64| {
        let model = &model;
        let batch = &batch;
        let config = &config;
        move |p: &[f64]| {
            let mut m = model.clone();
            m.set_flat_params(p).expect("same length");
            let g = train::build_losses(&m, batch, config, grl).expect("finite graph");
            which(&g.breakdown)
        }
    };
    let fd_total = oracle::central_difference(eval(|b| b.l_total), &flat, FD_STEP);
    let fd_adv = oracle::central_difference(eval(|b| b.l_adv), &flat, FD_STEP);
    let lambda1 = config.weights.lambda1;
    let (mut worst, mut worst_abs): (f64, f64) = (0.0, 0.0);
    for (i, group) in model.flat_groups().into_iter().enumerate() {
        let expect = if group == ParamGroup::Discriminator {
            fd_total[i]
        } else {
            fd_total[i] - (1.0 + grl) * lambda1 * fd_adv[i]
        };
        worst = worst.max(oracle::relative_error(tape_grad[i], expect, FD_ABS_FLOOR));
        worst_abs = worst_abs.max((tape_grad[i] - expect).abs());
    }
    Ok((worst, worst_abs))
}

pub fn full_model_gradients(seeds: u64) -> Check {
    const NAME: &str = "full-model finite differences";
    let (mut worst, mut worst_abs): (f64, f64) = (0.0, 0.0);
    for seed in 0..seeds {
        match model_gradient_error(seed) {
            Ok((rel, abs)) => {
                worst = worst.max(rel);
                worst_abs = worst_abs.max(abs);
            }
            Err(e) => return failed(NAME, e),
        }
    }
    Check::new(
        NAME,
        worst < FD_REL_TOL,
        format!(
            "{seeds} seeds, max rel err {worst:.2e} (tol {FD_REL_TOL:e}, abs floor {FD_ABS_FLOOR:e}), max abs diff {worst_abs:.2e}"
        ),
    )
}

pub fn mcc_properties(instances: usize) -> Check {
    const NAME: &str = "mcc oracle and limits";
    let t = losses::DEFAULT_TEMPERATURE;
    let run = || -> Result<(f64, f64, f64)> {
        let one_hot = Matrix::from_fn(6, 3, |i, j| if i % 3 == j { 500.0 } else { 0.0 });
        let sharp = losses::mcc_value(&one_hot, t)?;
        let uniform = losses::mcc_value(&Matrix::zeros(8, 4), t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x73);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let b = rng.gen_range(1..=10);
            let c = rng.gen_range(2..=6);
            let z = rand_matrix(&mut rng, b, c, 4.0);
            let temp = rng.gen_range(0.5..4.0);
            let got = losses::mcc_value(&z, temp)?;
            worst = worst.max((got - oracle::mcc_loop(&z, temp, losses::MCC_EPS)).abs());
        }
        Ok((sharp, uniform, worst))
    };
    match run() {
        Ok((sharp, uniform, worst)) => {
            let ok = sharp < MCC_TOL && (uniform - 0.75).abs() < MCC_TOL && worst < MCC_TOL;
            Check::new(
                NAME,
                ok,
                format!(
                    "one-hot {sharp:.2e}, uniform(c=4) {uniform:.12}, \
                     {instances} instances max abs err {worst:.2e} (tol {MCC_TOL:e})"
                ),
            )
        }
        Err(e) => failed(NAME, e),
    }
}

pub fn adversarial_fixed_point() -> Check {
    const NAME: &str = "adversarial fixed point";
    let run = || -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(Matrix::filled(5, 1, 0.5));
        let t = tape.constant(Matrix::filled(7, 1, 0.5));
        let l = losses::adversarial_loss(&mut tape, s, t)?;
        Ok(tape.value(l).item())
    };
    match run() {
        Ok(v) => {
            let err = (v - 2.0 * std::f64::consts::LN_2).abs();
            Check::new(
                NAME,
                err < ADV_FIXED_POINT_TOL,
                format!("L_adv = {v:.15}, |err| {err:.2e} (tol {ADV_FIXED_POINT_TOL:e})"),
            )
        }
        Err(e) => failed(NAME, e),
    }
}

/// Inner products of the first update with the true adversarial gradient,
/// split into (discriminator, everything else).
///
/// The adversarial part of the update is isolated by differencing steps
/// taken with and without the adversarial term.
pub fn gradient_sign_products(seed: u64, reversal_fault: bool) -> Result<(f64, f64)> {
    let (model, batch, mut config) = gradient_check_setup(seed)?;
    config.weights.lambda1 = 1.0;
    let step = |lambda1: f64| -> Result<Vec<f64>> {
        let mut cfg = config.clone();
        cfg.weights.lambda1 = lambda1;
        let mut t = Trainer::new(model.clone(), cfg)?;
        t.inject_reversal_sign_fault(reversal_fault);
        t.train_step(&batch, 1)?;
        Ok(t.model.flat_params())
    };
    let with_adv = step(1.0)?;
    let without = step(0.0)?;
    let flat = model.flat_params();
    let adv_value = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(p).expect("same length");
        train::build_losses(&m, &batch, &config, 1.0)
            .expect("finite graph")
            .breakdown
            .l_adv
    };
    let dadv = oracle::central_difference(adv_value, &flat, FD_STEP);
    let (mut disc, mut rest) = (0.0, 0.0);
    for (i, group) in model.flat_groups().into_iter().enumerate() {
        let update = with_adv[i] - without[i];
        if group == ParamGroup::Discriminator {
            disc += update * dadv[i];
        } else {
            rest += update * dadv[i];
        }
    }
    Ok((disc, rest))
}

/// The discriminator's update decreases its classification loss and the
/// rest of the network's update increases it.
pub fn gradient_sign_contract(reversal_fault: bool) -> Check {
    const NAME: &str = "gradient-sign contract";
    let mut bad = Vec::new();
    for seed in 0..5 {
        match gradient_sign_products(seed, reversal_fault) {
            Ok((d, g)) if d < 0.0 && g > 0.0 => {}
            Ok((d, g)) => bad.push(format!("seed {seed}: disc {d:.3e}, rest {g:.3e}")),
            Err(e) => return failed(NAME, e),
        }
    }
    let detail = if bad.is_empty() {
        "5 seeds: discriminator descends, feature path ascends".to_string()
    } else {
        bad.join("; ")
    };
    Check::new(NAME, bad.is_empty(), detail)
}

fn replay_once() -> Result<(String, String)> {
    let pair = gen_moons(
        &MoonsSpec {
            n: 60,
            rotation_deg: 30.0,
            noise: 0.1,
            standardize: true,
        },
        11,
    )?;
    let config = TrainConfig {
        arch: Architecture {
            hidden: vec![16, 8],
            disc_hidden: 8,
            ..Architecture::default()
        },
        iterations: 40,
        eval_every: 10,
        snapshot_iters: vec![0, 40],
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train::run(&pair, &config)?;
    Ok((out.record.to_csv(), out.model.to_json()?))
}

pub fn determinism_replay() -> Check {
    const NAME: &str = "determinism replay";
    match (replay_once(), replay_once()) {
        (Ok(a), Ok(b)) => Check::new(
            NAME,
            a == b,
            format!(
                "metrics {} bytes, checkpoint {} bytes, identical: {}",
                a.0.len(),
                a.1.len(),
                a == b
            ),
        ),
        (Err(e), _) | (_, Err(e)) => failed(NAME, e),
    }
}
