use std::collections::HashSet;

use proptest::prelude::*;
use srhm::grammar::*;
use srhm::StreamKey;

fn params_strategy() -> impl Strategy<Value = GrammarParams> {
    (2usize..=3, 2usize..=4, 1usize..=3, 0usize..=2, 0u8..3, any::<u64>())
        .prop_flat_map(|(s, v, depth, gaps, sp, seed)| {
            let m_max = v.pow(s as u32 - 1).min(4);
            (Just((s, v, depth, gaps, sp, seed)), 1..=m_max, 1..=v)
        })
        .prop_map(|((s, v, depth, gaps, sp, seed), m, n_c)| {
            let sparsity = match (gaps, sp) {
                (0, 0) => Sparsity::None,
                (_, 1) => Sparsity::B,
                _ => Sparsity::A,
            };
            GrammarParams {
                n_classes: n_c,
                vocab: v,
                synonyms: m,
                branching: s,
                depth: depth.min(if s == 3 { 2 } else { 3 }),
                gaps,
                sparsity,
                seed,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_trees_parse_to_their_label(p in params_strategy(), k in any::<u64>()) {
        let rules = build_ruleset(&p).unwrap();
        for i in 0..8 {
            let t = sample_datum(&rules, None, StreamKey::new(k).derive(i));
            prop_assert_eq!(classify_oracle(&rules, &encode_input(&t)).unwrap(), t.label);
        }
    }

    #[test]
    fn operators_preserve_labels(p in params_strategy(), k in any::<u64>()) {
        let rules = build_ruleset(&p).unwrap();
        let mut rng = StreamKey::new(k).derive(99).rng();
        for i in 0..8 {
            let t = sample_datum(&rules, None, StreamKey::new(k).derive(i));
            for l in 1..=p.depth {
                if p.synonyms >= 2 {
                    let moved = apply_synonym(&rules, &t, l, &mut rng).unwrap();
                    prop_assert_eq!(classify_oracle(&rules, &encode_input(&moved)).unwrap(), t.label);
                    prop_assert_eq!(moved.positions(1), t.positions(1));
                }
                let moved = apply_diffeo(&rules, &t, l, &mut rng).unwrap();
                prop_assert_eq!(classify_oracle(&rules, &encode_input(&moved)).unwrap(), t.label);
                prop_assert_eq!(&moved.expansion(1).features, &t.expansion(1).features);
            }
        }
    }

    #[test]
    fn placements_obey_the_variant(p in params_strategy(), k in any::<u64>()) {
        let rules = build_ruleset(&p).unwrap();
        let g = Geometry::of(&p);
        let w = g.patch_width();
        for i in 0..16 {
            let t = sample_datum(&rules, None, StreamKey::new(k).derive(i));
            for e in &t.expansions {
                for slots in e.slots.chunks(p.branching) {
                    prop_assert!(slots.windows(2).all(|s| s[0] < s[1]));
                    prop_assert!(slots.iter().all(|&x| (x as usize) < w));
                    if p.sparsity == Sparsity::A {
                        for (c, &x) in slots.iter().enumerate() {
                            prop_assert_eq!(x as usize / (p.gaps + 1), c);
                        }
                    }
                }
            }
            let pos = t.positions(1);
            prop_assert_eq!(pos.len(), p.n_informative());
            prop_assert!(pos.windows(2).all(|s| s[0] < s[1]));
        }
    }

    #[test]
    fn every_rule_maps_back_to_its_parent(p in params_strategy()) {
        let rules = build_ruleset(&p).unwrap();
        let mut seen = HashSet::new();
        for level in 1..=p.depth {
            for parent in 0..rules.n_parents(level) {
                for (i, tuple) in rules.rules_of(level, parent).enumerate() {
                    let rr = rules.parent_of(level, tuple).unwrap();
                    prop_assert_eq!((rr.parent as usize, rr.index as usize), (parent, i));
                    prop_assert!(seen.insert((level, tuple.to_vec())));
                }
            }
        }
    }
}

fn exhaustive_params(seed: u64) -> GrammarParams {
    GrammarParams {
        n_classes: 2,
        vocab: 3,
        synonyms: 3,
        branching: 2,
        depth: 2,
        gaps: 0,
        sparsity: Sparsity::None,
        seed,
    }
}

#[test]
fn count_law_holds_exhaustively() {
    for seed in 0..20 {
        let p = exhaustive_params(seed);
        let rules = build_ruleset(&p).unwrap();
        // m^((d-1)/(s-1)) with d = s^L
        let expected = p.synonyms.pow(((p.input_dim() - 1) / (p.branching - 1)) as u32);
        let mut all = HashSet::new();
        for c in 0..p.n_classes as u16 {
            let trees = enumerate_trees(&rules, c, 1 << 16).unwrap();
            let inputs: HashSet<InputMatrix> = trees.iter().map(encode_input).collect();
            assert_eq!(inputs.len(), expected);
            for x in &inputs {
                assert_eq!(classify_oracle(&rules, x).unwrap(), c);
                assert!(all.insert(x.clone()), "class overlap at seed {seed}");
            }
        }
    }
}

#[test]
fn operators_preserve_labels_exhaustively() {
    let p = GrammarParams { gaps: 1, sparsity: Sparsity::B, ..exhaustive_params(3) };
    let rules = build_ruleset(&p).unwrap();
    let mut rng = StreamKey::new(5).rng();
    for c in 0..2 {
        for t in enumerate_trees(&rules, c, 1 << 20).unwrap().iter().step_by(7) {
            for l in 1..=2 {
                let a = apply_synonym(&rules, t, l, &mut rng).unwrap();
                let b = apply_diffeo(&rules, t, l, &mut rng).unwrap();
                assert_eq!(classify_oracle(&rules, &encode_input(&a)).unwrap(), c);
                assert_eq!(classify_oracle(&rules, &encode_input(&b)).unwrap(), c);
            }
        }
    }
}

#[test]
fn synonym_exchange_changes_every_rule_at_its_level() {
    let p = GrammarParams { synonyms: 4, vocab: 4, n_classes: 4, ..exhaustive_params(8) };
    let rules = build_ruleset(&p).unwrap();
    let mut rng = StreamKey::new(1).rng();
    for i in 0..200 {
        let t = sample_datum(&rules, None, StreamKey::new(2).derive(i));
        let moved = apply_synonym(&rules, &t, 2, &mut rng).unwrap();
        for (a, b) in t.expansion(2).rule.iter().zip(&moved.expansion(2).rule) {
            assert_ne!(a, b);
        }
        assert_eq!(t.expansion(1).rule, moved.expansion(1).rule);
    }
}
