//! The adaptation network: feature extractor, classifier head, transport
//! heads and the domain discriminator.
//!
//! Shapes, with `B` the batch size:
//!
//! ```text
//! x[B×d] --G--> features[B×f] --C--> logits[B×c]
//!                              --T1-> t1[B×c]    o1 = logits + t1
//!                              --T2-> t2[B×c]    o2 = logits + t2
//! interp = λ·o1 + (1-λ)·o2
//! disc_in = λ·softmax(o1) + (1-λ)·softmax(o2)  --reverse--> D --> (0,1)
//! ```
//!
//! In single-transport mode `T2` does not exist and `λ` is 1.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Scale applied to transport-head weights at initialisation.
pub const TRANSPORT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    Dual,
    Single,
}

/// What the discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscInput {
    /// λ-weighted mix of the softmaxed transported outputs.
    Softmax,
    /// The interpolated logits themselves.
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Widths of the feature extractor layers; the last one is the feature dim.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub disc_hidden: usize,
    pub mode: TransportMode,
    pub lambda: f64,
    pub disc_input: DiscInput,
}

impl ModelSpec {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden: vec![128, 64],
            classes,
            disc_hidden: 32,
            mode: TransportMode::Dual,
            lambda: 0.5,
            disc_input: DiscInput::Softmax,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }

    /// The interpolation weight actually used (1 in single-transport mode).
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            TransportMode::Dual => self.lambda,
            TransportMode::Single => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::param("hidden", "widths must be positive"));
        }
        if self.classes == 0 {
            return Err(Error::param("classes", "must be positive"));
        }
        if self.disc_hidden == 0 {
            return Err(Error::param("disc_hidden", "must be positive"));
        }
        if self.mode == TransportMode::Dual && !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::param(
                "lambda",
                format!("must lie in (0,1), got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W[in×out]`, `b[1×out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| gain * rng.gen_range(-limit..=limit));
        Linear {
            weight,
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Feature,
    Classifier,
    Transport,
    Discriminator,
}

impl ParamGroup {
    pub fn is_discriminator(self) -> bool {
        self == ParamGroup::Discriminator
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChattyModel {
    spec: ModelSpec,
    feature: Vec<Linear>,
    classifier: Linear,
    transport1: Linear,
    transport2: Option<Linear>,
    discriminator: Vec<Linear>,
}

/// Tape handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct BoundParams {
    feature: Vec<(Var, Var)>,
    classifier: (Var, Var),
    transport1: (Var, Var),
    transport2: Option<(Var, Var)>,
    discriminator: Vec<(Var, Var)>,
    all: Vec<Var>,
}

impl BoundParams {
    /// Parameter handles in [`ChattyModel::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub t1: Var,
    pub t2: Option<Var>,
    pub o1: Var,
    pub o2: Option<Var>,
    pub interp: Var,
    pub disc_in: Var,
    pub disc_out: Var,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardBundle {
    pub features: Matrix,
    pub logits: Matrix,
    pub t1: Matrix,
    pub t2: Option<Matrix>,
    pub o1: Matrix,
    pub o2: Option<Matrix>,
    pub interp_logits: Matrix,
    pub disc_out: Matrix,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: ChattyModel,
}

impl ChattyModel {
    /// Xavier-uniform weights, zero biases, transport heads scaled down.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feature = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        for &w in &spec.hidden {
            feature.push(Linear::xavier(&mut rng, fan_in, w, 1.0));
            fan_in = w;
        }
        let f = spec.feature_dim();
        let c = spec.classes;
        let classifier = Linear::xavier(&mut rng, f, c, 1.0);
        let transport1 = Linear::xavier(&mut rng, f, c, TRANSPORT_INIT_SCALE);
        let transport2 = match spec.mode {
            TransportMode::Dual => Some(Linear::xavier(&mut rng, f, c, TRANSPORT_INIT_SCALE)),
            TransportMode::Single => None,
        };
        let discriminator = vec![
            Linear::xavier(&mut rng, c, spec.disc_hidden, 1.0),
            Linear::xavier(&mut rng, spec.disc_hidden, 1, 1.0),
        ];
        Ok(ChattyModel {
            spec,
            feature,
            classifier,
            transport1,
            transport2,
            discriminator,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.classifier
    }

    pub fn transport1(&self) -> &Linear {
        &self.transport1
    }

    pub fn transport1_mut(&mut self) -> &mut Linear {
        &mut self.transport1
    }

    pub fn transport2(&self) -> Option<&Linear> {
        self.transport2.as_ref()
    }

    pub fn transport2_mut(&mut self) -> Option<&mut Linear> {
        self.transport2.as_mut()
    }

    /// Exchanges the two transport heads (dual mode only).
    pub fn swap_transports(&mut self) {
        if let Some(t2) = self.transport2.as_mut() {
            std::mem::swap(&mut self.transport1, t2);
        }
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.lambda = lambda;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    fn layers(&self) -> Vec<(&'static str, usize, ParamGroup, &Linear)> {
        let mut out = Vec::new();
        for (i, l) in self.feature.iter().enumerate() {
            out.push(("feature", i, ParamGroup::Feature, l));
        }
        out.push(("classifier", 0, ParamGroup::Classifier, &self.classifier));
        out.push(("transport1", 0, ParamGroup::Transport, &self.transport1));
        if let Some(t2) = &self.transport2 {
            out.push(("transport2", 0, ParamGroup::Transport, t2));
        }
        for (i, l) in self.discriminator.iter().enumerate() {
            out.push(("discriminator", i, ParamGroup::Discriminator, l));
        }
        out
    }

    /// `(name, group, value)` for every parameter matrix, in a fixed order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for (name, i, group, l) in self.layers() {
            out.push((format!("{name}.{i}.weight"), group, &l.weight));
            out.push((format!("{name}.{i}.bias"), group, &l.bias));
        }
        out
    }

    /// Mutable parameter matrices in [`ChattyModel::params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let ChattyModel {
            feature,
            classifier,
            transport1,
            transport2,
            discriminator,
            ..
        } = self;
        let layers = feature
            .iter_mut()
            .chain(std::iter::once(classifier))
            .chain(std::iter::once(transport1))
            .chain(transport2.iter_mut())
            .chain(discriminator.iter_mut());
        let mut out = Vec::new();
        for l in layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.params().into_iter().map(|(_, g, _)| g).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, _, m)| m.data().len()).sum()
    }

    /// All parameters concatenated in [`ChattyModel::params`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|(_, _, m)| m.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(
                "set_flat_params",
                (flat.len(), 1),
                (self.num_params(), 1),
            ));
        }
        let mut offset = 0;
        for m in self.params_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Group of every scalar in [`ChattyModel::flat_params`] order.
    pub fn flat_groups(&self) -> Vec<ParamGroup> {
        self.params()
            .into_iter()
            .flat_map(|(_, g, m)| std::iter::repeat_n(g, m.data().len()))
            .collect()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut all = Vec::new();
        let mut bind = |tape: &mut Tape, l: &Linear| {
            let w = tape.param(l.weight.clone());
            let b = tape.param(l.bias.clone());
            all.push(w);
            all.push(b);
            (w, b)
        };
        let feature = self.feature.iter().map(|l| bind(tape, l)).collect();
        let classifier = bind(tape, &self.classifier);
        let transport1 = bind(tape, &self.transport1);
        let transport2 = self.transport2.as_ref().map(|l| bind(tape, l));
        let discriminator = self.discriminator.iter().map(|l| bind(tape, l)).collect();
        BoundParams {
            feature,
            classifier,
            transport1,
            transport2,
            discriminator,
            all,
        }
    }

    /// Builds the full forward graph for input `x` on `tape`.
    ///
    /// `grl_scale` is the gradient-reversal factor between the transported
    /// outputs and the discriminator.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        grl_scale: f64,
    ) -> Result<ForwardVars> {
        let (_, d) = tape.shape(x);
        if d != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                tape.shape(x),
                (tape.shape(x).0, self.spec.input_dim),
            ));
        }
        let mut h = x;
        for &(w, b) in &p.feature {
            let z = affine(tape, h, w, b)?;
            h = tape.relu(z);
        }
        let features = h;
        let logits = affine(tape, features, p.classifier.0, p.classifier.1)?;
        let t1 = affine(tape, features, p.transport1.0, p.transport1.1)?;
        let o1 = tape.add(logits, t1)?;
        let lambda = self.spec.effective_lambda();

        let (t2, o2, interp, mixed) = match p.transport2 {
            Some((w, b)) => {
                let t2 = affine(tape, features, w, b)?;
                let o2 = tape.add(logits, t2)?;
                let interp = lerp(tape, o1, o2, lambda)?;
                let mixed = match self.spec.disc_input {
                    DiscInput::Softmax => {
                        let s1 = tape.softmax_rows(o1, 1.0)?;
                        let s2 = tape.softmax_rows(o2, 1.0)?;
                        lerp(tape, s1, s2, lambda)?
                    }
                    DiscInput::Logits => interp,
                };
                (Some(t2), Some(o2), interp, mixed)
            }
            None => {
                let mixed = match self.spec.disc_input {
                    DiscInput::Softmax => tape.softmax_rows(o1, 1.0)?,
                    DiscInput::Logits => o1,
                };
                (None, None, o1, mixed)
            }
        };

        let disc_in = tape.grad_reverse(mixed, grl_scale);
        let mut h = disc_in;
        let last = p.discriminator.len() - 1;
        for (i, &(w, b)) in p.discriminator.iter().enumerate() {
            let z = affine(tape, h, w, b)?;
            h = if i == last {
                tape.sigmoid(z)
            } else {
                tape.relu(z)
            };
        }

        Ok(ForwardVars {
            features,
            logits,
            t1,
            t2,
            o1,
            o2,
            interp,
            disc_in,
            disc_out: h,
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardBundle> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward_on(&mut tape, &p, xv, 1.0)?;
        Ok(ForwardBundle {
            features: tape.value(f.features).clone(),
            logits: tape.value(f.logits).clone(),
            t1: tape.value(f.t1).clone(),
            t2: f.t2.map(|v| tape.value(v).clone()),
            o1: tape.value(f.o1).clone(),
            o2: f.o2.map(|v| tape.value(v).clone()),
            interp_logits: tape.value(f.interp).clone(),
            disc_out: tape.value(f.disc_out).clone(),
        })
    }

    /// Interpolated logits only.
    pub fn interp_logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.interp_logits)
    }

    /// Argmax of the interpolated logits; ties go to the lowest class.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.interp_logits(x)?.argmax_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.model.check_consistent()?;
        Ok(ck.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_consistent(&self) -> Result<()> {
        self.spec.validate()?;
        let f = self.spec.feature_dim();
        let c = self.spec.classes;
        let heads = [
            Some(&self.classifier),
            Some(&self.transport1),
            self.transport2.as_ref(),
        ];
        for h in heads.into_iter().flatten() {
            if h.weight.shape() != (f, c) || h.bias.shape() != (1, c) {
                return Err(Error::shape("checkpoint head", h.weight.shape(), (f, c)));
            }
        }
        if (self.spec.mode == TransportMode::Dual) != self.transport2.is_some() {
            return Err(Error::Parse(
                "transport2 presence disagrees with mode".into(),
            ));
        }
        Ok(())
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    tape.add_row_broadcast(z, b)
}

/// `lambda·a + (1-lambda)·b`
fn lerp(tape: &mut Tape, a: Var, b: Var, lambda: f64) -> Result<Var> {
    let sa = tape.scale(a, lambda);
    let sb = tape.scale(b, 1.0 - lambda);
    tape.add(sa, sb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(mode: TransportMode) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            hidden: vec![8, 5],
            classes: 3,
            disc_hidden: 4,
            mode,
            lambda: 0.5,
            disc_input: DiscInput::Softmax,
        }
    }

    fn batch() -> Matrix {
        Matrix::from_fn(6, 2, |i, j| (i as f64 - 2.5) * 0.7 + j as f64 * 0.3)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = ChattyModel::init(small_spec(TransportMode::Dual), 7).unwrap();
        let b = ChattyModel::init(small_spec(TransportMode::Dual), 7).unwrap();
        assert_eq!(a, b);
        let c = ChattyModel::init(small_spec(TransportMode::Dual), 8).unwrap();
        assert_ne!(a, c);
        for (name, _, m) in a.params() {
            if name.ends_with("bias") {
                assert!(m.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_rejects_zero_widths() {
        let mut s = small_spec(TransportMode::Dual);
        s.hidden = vec![8, 0];
        assert!(matches!(ChattyModel::init(s, 0), Err(Error::Param { .. })));
        let mut s = small_spec(TransportMode::Dual);
        s.classes = 0;
        assert!(ChattyModel::init(s, 0).is_err());
        let mut s = small_spec(TransportMode::Dual);
        s.lambda = 1.0;
        assert!(ChattyModel::init(s, 0).is_err());
    }

    #[test]
    fn transport_init_is_scaled_down() {
        // Pool weights over seeds; a wide feature layer gives many samples.
        let mut spec = small_spec(TransportMode::Single);
        spec.hidden = vec![8, 400];
        let mut cls = Vec::new();
        let mut tr = Vec::new();
        for seed in 0..3 {
            let m = ChattyModel::init(spec.clone(), seed).unwrap();
            cls.extend_from_slice(m.classifier.weight.data());
            tr.extend_from_slice(m.transport1.weight.data());
        }
        assert!(cls.len() >= 1000);
        let std = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let ratio = std(&tr) / std(&cls);
        assert!((ratio - 0.1).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn zero_weight_model_outputs_biases() {
        let mut m = ChattyModel::init(small_spec(TransportMode::Dual), 1).unwrap();
        for w in m.params_mut() {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        m.classifier.bias = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let out = m.forward(&batch()).unwrap();
        for i in 0..6 {
            assert_eq!(out.o1.row(i), &[1.0, -2.0, 0.5]);
            assert_eq!(out.o2.as_ref().unwrap().row(i), &[1.0, -2.0, 0.5]);
            assert_eq!(out.interp_logits.row(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn bundle_invariants_dual() {
        let m = ChattyModel::init(small_spec(TransportMode::Dual), 3).unwrap();
        let b = m.forward(&batch()).unwrap();
        let t2 = b.t2.as_ref().unwrap();
        let o2 = b.o2.as_ref().unwrap();
        for i in 0..6 {
            for j in 0..3 {
                assert_eq!(b.o1.get(i, j), b.logits.get(i, j) + b.t1.get(i, j));
                assert_eq!(o2.get(i, j), b.logits.get(i, j) + t2.get(i, j));
                let expect = 0.5 * b.o1.get(i, j) + 0.5 * o2.get(i, j);
                assert!((b.interp_logits.get(i, j) - expect).abs() < 1e-15);
            }
            let d = b.disc_out.get(i, 0);
            assert!(d > 0.0 && d < 1.0);
        }
    }

    #[test]
    fn single_mode_interp_is_o1() {
        let m = ChattyModel::init(small_spec(TransportMode::Single), 3).unwrap();
        assert!(m.transport2().is_none());
        assert_eq!(m.spec().effective_lambda(), 1.0);
        let b = m.forward(&batch()).unwrap();
        assert_eq!(b.interp_logits, b.o1);
        assert!(b.o2.is_none());
    }

    #[test]
    fn swapping_transports_with_complementary_lambda() {
        let mut m = ChattyModel::init(small_spec(TransportMode::Dual), 11).unwrap();
        m.set_lambda(0.3).unwrap();
        let before = m.interp_logits(&batch()).unwrap();
        m.swap_transports();
        m.set_lambda(0.7).unwrap();
        let after = m.interp_logits(&batch()).unwrap();
        assert!(before.max_abs_diff(&after) < 1e-12);
    }

    #[test]
    fn predict_rules() {
        let mut m = ChattyModel::init(small_spec(TransportMode::Dual), 1).unwrap();
        for w in m.params_mut() {
            for v in w.data_mut() {
                *v = 0.0;
            }
        }
        m.classifier.bias = Matrix::from_rows(&[[0.1, 0.9, 0.2]]).unwrap();
        assert_eq!(m.predict(&batch()).unwrap(), vec![1; 6]);
        m.classifier.bias = Matrix::from_rows(&[[0.5, 0.5, 0.2]]).unwrap();
        assert_eq!(m.predict(&batch()).unwrap(), vec![0; 6]);
    }

    #[test]
    fn forward_checks_input_dim() {
        let m = ChattyModel::init(small_spec(TransportMode::Dual), 1).unwrap();
        let err = m.forward(&Matrix::zeros(4, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "forward", .. }));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = ChattyModel::init(small_spec(TransportMode::Dual), 5).unwrap();
        let s = m.to_json().unwrap();
        let back = ChattyModel::from_json(&s).unwrap();
        assert_eq!(m, back);
        let bad = s.replace("\"version\": 1", "\"version\": 9");
        assert!(ChattyModel::from_json(&bad).is_err());
    }
}
