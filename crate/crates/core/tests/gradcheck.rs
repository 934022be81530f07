//! Backpropagation against central finite differences at 64-bit.

use rand::Rng;
use rand_distr::StandardNormal;
use srhm::nn::{ArchKind, ArchitectureSpec, InitMode, Network, OutputScaling};
use srhm::StreamKey;

const CASES: u64 = 100;
const H: f64 = 1e-6;

fn loss(net: &Network<f64>, x: &[f64], label: usize) -> f64 {
    let out = net.forward(x).unwrap().output;
    let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + out.iter().map(|o| (o - mx).exp()).sum::<f64>().ln() - out[label]
}

fn random_case(kind: ArchKind, case: u64) -> (Network<f64>, Vec<f64>, usize) {
    let key = StreamKey::new(0x6C).derive(kind as u64).derive(case);
    let mut rng = key.rng();
    let filter = rng.random_range(2..=3);
    let depth = rng.random_range(1..=if filter == 3 { 2 } else { 3 });
    let widths = (0..depth).map(|_| rng.random_range(1..=5)).collect();
    let spec = ArchitectureSpec {
        kind,
        filter,
        widths,
        input_positions: filter.pow(depth as u32),
        input_channels: rng.random_range(1..=4),
        n_classes: rng.random_range(2..=4),
        scaling: if rng.random_bool(0.5) { OutputScaling::Standard } else { OutputScaling::MeanField },
    };
    let net = Network::init(&spec, InitMode::Standard, key.derive(1)).unwrap();
    let x = (0..spec.input_len()).map(|_| rng.sample(StandardNormal)).collect();
    let label = rng.random_range(0..spec.n_classes);
    (net, x, label)
}

fn check_kind(kind: ArchKind) {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let (net, x, label) = random_case(kind, case);
        let (l0, grads) = net.backward(&x, label).unwrap();
        assert!((l0 - loss(&net, &x, label)).abs() < 1e-12);
        let analytic = grads.flatten();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = net.clone();
        let n = probe.params_mut().count();
        for i in 0..n {
            let orig = *probe.params_mut().nth(i).unwrap();
            *probe.params_mut().nth(i).unwrap() = orig + H;
            let up = loss(&probe, &x, label);
            *probe.params_mut().nth(i).unwrap() = orig - H;
            let down = loss(&probe, &x, label);
            *probe.params_mut().nth(i).unwrap() = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        assert_eq!(numeric.len(), analytic.len());
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        assert!(rel < 1e-6, "{kind} case {case}: relative error {rel:e} ({:?})", net.spec);
        worst = worst.max(rel);
    }
    eprintln!("{kind}: worst relative error {worst:e}");
}

#[test]
fn lcn_gradients() {
    check_kind(ArchKind::Lcn);
}

#[test]
fn cnn_gradients() {
    check_kind(ArchKind::Cnn);
}

#[test]
fn fcn_gradients() {
    check_kind(ArchKind::Fcn);
}
