//! Minibatch SGD with classical momentum on cross-entropy.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::Dataset;
use crate::nn::{argmax, cross_entropy_grad, momentum_update, to_scalars, Gradients, Network, NnError, Scalar, Workspace};
use crate::rng::StreamKey;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    /// Stop once the mean training loss over the last full epoch is at or below this.
    pub stop_loss: f64,
    /// Cap on minibatch steps.
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.01, batch: 4, momentum: 0.9, stop_loss: 1e-3, max_steps: 1_000_000, seed: 0 }
    }
}

impl TrainConfig {
    /// Learning rate found by grid search for patches of `branching` children.
    pub fn default_lr(branching: usize) -> f64 {
        if branching <= 2 {
            0.01
        } else {
            0.003
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch == 0 || self.batch > n_train {
            return bad("batch size must lie in 1..=P");
        }
        Ok(())
    }
}

/// Inputs converted to the network precision, with labels.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_dataset(ds: &Dataset) -> Self {
        TrainData {
            inputs: ds.inputs.iter().map(to_scalars).collect(),
            labels: ds.labels.iter().map(|&y| y as usize).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prefix(&self, n: usize) -> Self {
        TrainData { inputs: self.inputs[..n].to_vec(), labels: self.labels[..n].to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    /// Mean training loss over the epoch that ended at `step`.
    pub loss: f64,
    pub test_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    pub net: Network<T>,
    pub steps: u64,
    pub epochs: u64,
    /// One record per epoch.
    pub history: Vec<LossRecord>,
    pub converged: bool,
    pub wall_time: Duration,
}

impl<T> TrainResult<T> {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }

    /// CSV log with columns `step,epoch,loss,test_error`.
    pub fn write_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,epoch,loss,test_error")?;
        for r in &self.history {
            let te = r.test_error.map(|e| format!("{e}")).unwrap_or_default();
            writeln!(w, "{},{},{:e},{}", r.step, r.epoch, r.loss, te)?;
        }
        Ok(())
    }
}

/// Mean over the batch of `-log softmax(out)[label]`.
pub fn cross_entropy<T: Scalar>(outputs: &[Vec<T>], labels: &[usize]) -> T {
    assert_eq!(outputs.len(), labels.len());
    let mut scratch = vec![T::zero(); outputs.first().map_or(0, |o| o.len())];
    let total: T = outputs.iter().zip(labels).map(|(o, &y)| cross_entropy_grad(o, y, &mut scratch)).sum();
    total / T::of(outputs.len() as f64)
}

/// Momentum buffers: `v <- momentum v - lr g; w <- w + v`.
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Gradients<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>, lr: f64, momentum: f64) -> Self {
        Sgd { lr: T::of(lr), momentum: T::of(momentum), velocity: Gradients::zeros_like(net) }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) {
        let (lr, mu) = (self.lr, self.momentum);
        for ((w, v), g) in net.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grads.layers) {
            momentum_update(w, v, g, lr, mu);
        }
        if let (Some(v), Some(g)) = (&mut self.velocity.readout, &grads.readout) {
            if !net.readout_frozen {
                momentum_update(&mut net.readout, v, g, lr, mu);
            }
        }
    }

    /// Gradient and update in one pass; see [`Network::sgd_step`].
    pub fn fused_step(&mut self, net: &mut Network<T>, batch: &[(&[T], usize)], ws: &mut Workspace<T>) -> T {
        net.sgd_step(batch, self.lr, self.momentum, &mut self.velocity, ws)
    }
}

pub fn train<T: Scalar>(net: Network<T>, data: &TrainData<T>, cfg: &TrainConfig) -> Result<TrainResult<T>> {
    train_with_monitor(net, data, cfg, |_, _| None)
}

/// Train until the epoch-mean loss reaches `cfg.stop_loss` or `cfg.max_steps`
/// is hit. `monitor(epoch, net)` runs after every epoch and may return a
/// test error to log.
pub fn train_with_monitor<T: Scalar>(
    mut net: Network<T>,
    data: &TrainData<T>,
    cfg: &TrainConfig,
    mut monitor: impl FnMut(u64, &Network<T>) -> Option<f64>,
) -> Result<TrainResult<T>> {
    if data.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    cfg.validate(data.len())?;
    if let Some(x) = data.inputs.iter().find(|x| x.len() != net.spec.input_len()) {
        return Err(NnError::ShapeMismatch(format!("input of length {} for {}", x.len(), net.spec.input_len())).into());
    }
    let start = Instant::now();
    let key = StreamKey::new(cfg.seed).derive(0x7EA1);
    let mut opt = Sgd::new(&net, cfg.lr, cfg.momentum);
    let mut ws = Workspace::new(&net.spec);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<(&[T], usize)> = Vec::with_capacity(cfg.batch);
    let mut history = Vec::new();
    let mut steps = 0u64;
    let mut epoch = 0u64;
    let mut converged = false;

    'outer: while steps < cfg.max_steps {
        order.sort_unstable();
        order.shuffle(&mut key.derive(epoch).rng());
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            if steps >= cfg.max_steps {
                break 'outer;
            }
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (data.inputs[i].as_slice(), data.labels[i])));
            let loss = opt.fused_step(&mut net, &batch, &mut ws);
            let lf = loss.to_f64().unwrap();
            if !lf.is_finite() {
                return Err(TrainError::Diverged { step: steps });
            }
            epoch_loss += lf * chunk.len() as f64;
            steps += 1;
        }
        epoch += 1;
        let mean = epoch_loss / data.len() as f64;
        let test_error = monitor(epoch, &net);
        history.push(LossRecord { step: steps, epoch, loss: mean, test_error });
        if mean <= cfg.stop_loss {
            converged = true;
            break;
        }
    }
    Ok(TrainResult { net, steps, epochs: epoch, history, converged, wall_time: start.elapsed() })
}

/// Fraction of misclassified items (argmax, ties to the lowest class).
pub fn test_error<T: Scalar>(net: &Network<T>, data: &TrainData<T>) -> f64 {
    assert!(!data.is_empty(), "empty test set");
    let mut ws = Workspace::new(&net.spec);
    let wrong = data
        .inputs
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| argmax(&net.predict(x, &mut ws)) != y)
        .count();
    wrong as f64 / data.len() as f64
}

/// Mean cross-entropy of the network on a data set.
pub fn dataset_loss<T: Scalar>(net: &Network<T>, data: &TrainData<T>) -> f64 {
    let mut ws = Workspace::new(&net.spec);
    let outs: Vec<Vec<T>> = data.inputs.iter().map(|x| net.predict(x, &mut ws)).collect();
    cross_entropy(&outs, &data.labels).to_f64().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_ruleset, generate_dataset, GrammarParams, Sparsity};
    use crate::nn::{ArchKind, ArchitectureSpec, InitMode, OutputScaling};

    fn setup(p_train: usize) -> (Network<f64>, TrainData<f64>, GrammarParams) {
        let p = GrammarParams {
            n_classes: 2,
            vocab: 3,
            synonyms: 3,
            branching: 2,
            depth: 2,
            gaps: 1,
            sparsity: Sparsity::A,
            seed: 1,
        };
        let rs = build_ruleset(&p).unwrap();
        let ds = generate_dataset(&rs, p_train, StreamKey::new(2), false);
        let spec = ArchitectureSpec::for_grammar(ArchKind::Lcn, &p, 32, OutputScaling::Standard);
        let net = Network::init(&spec, InitMode::Standard, StreamKey::new(3)).unwrap();
        (net, TrainData::from_dataset(&ds), p)
    }

    #[test]
    fn fused_step_matches_gradient_then_update() {
        for kind in [ArchKind::Lcn, ArchKind::Cnn, ArchKind::Fcn] {
            let (_, data, p) = setup(16);
            let spec = ArchitectureSpec::for_grammar(kind, &p, 16, OutputScaling::MeanField);
            let mut a = Network::<f64>::init(&spec, InitMode::Standard, StreamKey::new(4)).unwrap();
            let mut b = a.clone();
            let mut oa = Sgd::new(&a, 0.5, 0.9);
            let mut ob = Sgd::new(&b, 0.5, 0.9);
            let mut grads = Gradients::zeros_like(&a);
            let mut ws = Workspace::new(&spec);
            for chunk in data.inputs.chunks(4).zip(data.labels.chunks(4)).take(3) {
                let batch: Vec<(&[f64], usize)> =
                    chunk.0.iter().map(|x| x.as_slice()).zip(chunk.1.iter().copied()).collect();
                let la = a.batch_gradient(&batch, &mut grads, &mut ws);
                oa.step(&mut a, &grads);
                let lb = ob.fused_step(&mut b, &batch, &mut ws);
                assert_eq!(la, lb);
            }
            assert_eq!(a.layers, b.layers, "{kind:?}");
            assert_eq!(a.readout, b.readout);
        }
    }

    #[test]
    fn uniform_outputs_give_log_nc() {
        let outs = vec![vec![0.7f64; 5]; 3];
        assert!((cross_entropy(&outs, &[0, 3, 4]) - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn two_class_fixture() {
        let l = cross_entropy(&[vec![1.0f64, -1.0]], &[0]);
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_falls_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0] {
            let l = cross_entropy(&[vec![margin, 0.0, 0.0]], &[0]);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (net, data, _) = setup(12);
        let cfg = TrainConfig { lr: 0.0, max_steps: 30, ..Default::default() };
        let res = train(net.clone(), &data, &cfg).unwrap();
        assert_eq!(res.net, net);
        assert!(!res.converged);
        assert_eq!(res.steps, 30);
    }

    #[test]
    fn tiny_set_is_memorized() {
        let (net, data, _) = setup(6);
        let cfg = TrainConfig { lr: 0.05, max_steps: 200_000, ..Default::default() };
        let res = train(net, &data, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.final_loss().unwrap() <= cfg.stop_loss);
        assert_eq!(test_error(&res.net, &data), 0.0);
    }

    #[test]
    fn same_seed_bit_identical() {
        let (net, data, _) = setup(16);
        let cfg = TrainConfig { max_steps: 200, seed: 5, ..Default::default() };
        let a = train(net.clone(), &data, &cfg).unwrap();
        let b = train(net, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn small_step_descends() {
        let (net, data, _) = setup(8);
        let batch: Vec<(&[f64], usize)> = data.inputs.iter().map(|x| x.as_slice()).zip(data.labels.iter().copied()).collect();
        let mut ws = Workspace::new(&net.spec);
        let mut g = Gradients::zeros_like(&net);
        let before = net.batch_gradient(&batch, &mut g, &mut ws);
        for lr in [1e-1, 1e-2, 1e-3] {
            let mut n2 = net.clone();
            Sgd::new(&n2, lr, 0.0).step(&mut n2, &g);
            assert!(dataset_loss(&n2, &data) < before, "lr {lr}");
        }
    }

    #[test]
    fn bad_configs() {
        let (net, data, _) = setup(4);
        for cfg in [
            TrainConfig { batch: 5, ..Default::default() },
            TrainConfig { batch: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { lr: -1.0, ..Default::default() },
        ] {
            assert!(matches!(train(net.clone(), &data, &cfg), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn diverges_on_huge_lr() {
        let (net, data, _) = setup(16);
        let cfg = TrainConfig { lr: 1e200, max_steps: 1000, ..Default::default() };
        assert!(matches!(train(net, &data, &cfg), Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn log_csv_has_header() {
        let (net, data, _) = setup(8);
        let cfg = TrainConfig { max_steps: 4, ..Default::default() };
        let res = train_with_monitor(net, &data, &cfg, |_, n| Some(test_error(n, &data))).unwrap();
        let mut buf = Vec::new();
        res.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,epoch,loss,test_error\n"));
        assert_eq!(text.lines().count(), 1 + res.history.len());
    }
}
