//! The closed-form first step must equal one full-batch SGD step taken by
//! the network under constant initialization.

use srhm::grammar::{build_ruleset, generate_dataset, GrammarParams, RuleSet, Sparsity};
use srhm::nn::{ArchKind, ArchitectureSpec, Gradients, InitMode, Network, OutputScaling, Workspace};
use srhm::theory::{onestep_update, OneStepSetup};
use srhm::train::{Sgd, TrainData};
use srhm::StreamKey;

fn grammar(s0: usize, depth: usize, seed: u64) -> RuleSet {
    build_ruleset(&GrammarParams {
        n_classes: 3,
        vocab: 4,
        synonyms: 3,
        branching: 2,
        depth,
        gaps: s0,
        sparsity: if s0 == 0 { Sparsity::None } else { Sparsity::A },
        seed,
    })
    .unwrap()
}

fn numeric_step(net: &Network<f64>, data: &TrainData<f64>, lr: f64) -> Vec<f64> {
    let batch: Vec<(&[f64], usize)> =
        data.inputs.iter().map(|x| x.as_slice()).zip(data.labels.iter().copied()).collect();
    let mut grads = Gradients::zeros_like(net);
    let mut ws = Workspace::new(&net.spec);
    net.batch_gradient(&batch, &mut grads, &mut ws);
    let mut after = net.clone();
    Sgd::new(net, lr, 0.9).step(&mut after, &grads);
    assert_eq!(after.readout, net.readout, "readout must stay frozen");
    after.layers[0].iter().zip(&net.layers[0]).map(|(a, b)| (a - b) / lr).collect()
}

fn check(kind: ArchKind, s0: usize, depth: usize, widths: &[usize], scaling: OutputScaling, p: usize) {
    let rules = grammar(s0, depth, 5 + s0 as u64);
    let data = generate_dataset(&rules, p, StreamKey::new(9), false);
    let mut spec = ArchitectureSpec::for_grammar(kind, rules.params(), 1, scaling);
    spec.widths = widths.to_vec();
    let key = StreamKey::new(13);
    let net = Network::<f64>::init(&spec, InitMode::FrozenReadout, key).unwrap();
    let setup = OneStepSetup::from_network(&net).unwrap();
    let rep = onestep_update(&rules, &data, &setup).unwrap();
    let numeric = numeric_step(&net, &TrainData::from_dataset(&data), 1e-3);
    let scale = rep.exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(scale > 0.0);
    for (i, (a, n)) in rep.exact.iter().zip(&numeric).enumerate() {
        let tol = 1e-8 * a.abs().max(n.abs()).max(1e-6 * scale);
        assert!((a - n).abs() <= tol, "{kind} L={depth} coord {i}: analytic {a:e} numeric {n:e}");
    }
}

#[test]
fn lcn_two_levels() {
    check(ArchKind::Lcn, 1, 2, &[64, 64], OutputScaling::MeanField, 50);
}

#[test]
fn lcn_three_levels_unequal_widths() {
    check(ArchKind::Lcn, 1, 3, &[8, 16, 32], OutputScaling::MeanField, 30);
}

#[test]
fn cnn_two_levels() {
    check(ArchKind::Cnn, 1, 2, &[32, 48], OutputScaling::MeanField, 40);
}

#[test]
fn standard_scaling_and_no_gaps() {
    check(ArchKind::Lcn, 0, 2, &[16, 16], OutputScaling::Standard, 20);
}

#[test]
fn single_hidden_layer() {
    check(ArchKind::Lcn, 1, 1, &[12], OutputScaling::MeanField, 20);
}
