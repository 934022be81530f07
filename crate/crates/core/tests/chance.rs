use srhm::grammar::{build_ruleset, generate_dataset, GrammarParams, Sparsity};
use srhm::nn::{ArchKind, ArchitectureSpec, InitMode, Network, OutputScaling};
use srhm::train::{test_error, TrainData};
use srhm::StreamKey;

#[test]
fn constant_output_sits_at_chance() {
    let p = GrammarParams {
        n_classes: 4,
        vocab: 4,
        synonyms: 4,
        branching: 2,
        depth: 2,
        gaps: 1,
        sparsity: Sparsity::B,
        seed: 6,
    };
    let rules = build_ruleset(&p).unwrap();
    let n = 4000;
    let test = TrainData::<f64>::from_dataset(&generate_dataset(&rules, n, StreamKey::new(1), false));
    let spec = ArchitectureSpec::for_grammar(ArchKind::Cnn, &p, 8, OutputScaling::Standard);
    let mut net = Network::<f64>::init(&spec, InitMode::Standard, StreamKey::new(2)).unwrap();
    net.readout.iter_mut().for_each(|w| *w = 0.0);
    // all logits tie, so every prediction is class 0
    let err = test_error(&net, &test);
    let expected = 1.0 - 1.0 / p.n_classes as f64;
    let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((err - expected).abs() < 4.0 * sigma, "error {err}, chance {expected}");
}
