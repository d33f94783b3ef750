//! Invariants checked over random inputs.

mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use seqda::ctc::{best_path_decode, collapse, ctc_loss, LabelSeq};
use seqda::data::{
    pad_normalize, split, synth_generate, Alphabet, Dataset, Domain, MtsSample, SplitMode,
    SynthConfig, CHANNELS,
};
use seqda::dml::{
    coral, dml_distance, homm, homm_sampled, DmlKind, DmlLossSpec, EmbeddingBag, Variant,
};
use seqda::engine::{Graph, Tensor};
use seqda::lm::{build_ngram, enumerate_paths, ngram_logprob, rescore, CandidatePath, PathConfig};
use seqda::metrics::{cer, edit_distance, EdMode};
use seqda::model::{
    bilstm, forward, init_params, load_checkpoint, save_checkpoint, tap_shape, ModelConfig,
};
use seqda::pairing::{
    build_pair_dictionary, ed_lower_bound, select_triplets, triplet_loss, MAX_ED,
};

/// Fixed RNG seed so every run explores the same cases.
fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x005E_EDDA),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-2.0f64..2.0, r * cols).prop_map(move |d| Tensor::matrix(r, cols, d))
    })
}

fn word(k: u8, max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(0..k, 0..=max)
        .prop_map(|v| v.into_iter().map(|c| (b'a' + c) as char).collect())
}

fn all_specs() -> Vec<DmlLossSpec> {
    let mut out = Vec::new();
    for kind in DmlKind::TABLE {
        for variant in [Variant::Full, Variant::Group(2), Variant::Sampled(25)] {
            if matches!(variant, Variant::Sampled(_))
                && !matches!(kind, DmlKind::Homm { .. } | DmlKind::KHomm { .. })
            {
                continue;
            }
            out.push(DmlLossSpec::new(kind).with_variant(variant).with_seed(4));
        }
    }
    out
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_len: 12,
        conv_filters: 4,
        kernel_size: 3,
        pooled_len: 5,
        lstm1_hidden: 3,
        lstm2_hidden: 3,
        num_classes: 4,
        seed: 2,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn gradients_are_linear(a in matrix(3..=3, 3), seed in 0u64..1000) {
        let mut r = rng(seed);
        let w1 = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let w2 = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.param("x", a.clone());
            let t = g.tanh(x).unwrap();
            let sq = g.square(x).unwrap();
            let (c1, c2) = (g.constant(w1.clone()), g.constant(w2.clone()));
            let m1 = g.mul(t, c1).unwrap();
            let f1 = g.sum(m1).unwrap();
            let m2 = g.mul(sq, c2).unwrap();
            let f2 = g.sum(m2).unwrap();
            let obj = match which {
                1 => f1,
                2 => f2,
                _ => g.add(f1, f2).unwrap(),
            };
            g.param_grads(obj).unwrap().remove("x").unwrap()
        };
        let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(0));
        for i in 0..9 {
            prop_assert!((g12.data()[i] - g1.data()[i] - g2.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_pure_and_normalized(seed in 0u64..1000) {
        let cfg = tiny_model();
        let params = init_params(&cfg).unwrap();
        let mut r = rng(seed);
        let batch: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[12, CHANNELS], -1.0, 1.0)).collect();
        let a = forward(&params, &batch, &cfg).unwrap();
        let b = forward(&params, &batch, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for out in &a {
            for t in 0..out.log_probs.rows() {
                let s: f64 = out.log_probs.row(t).iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            for c in 1..=5 {
                let (rows, cols) = tap_shape(&cfg, c).unwrap();
                prop_assert_eq!(out.taps.get(c).unwrap().shape(), &[rows, cols]);
            }
        }
        // permuting the batch permutes the outputs
        let perm = [2usize, 0, 1];
        let permuted: Vec<Tensor> = perm.iter().map(|&i| batch[i].clone()).collect();
        let c = forward(&params, &permuted, &cfg).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&c[k], &a[i]);
        }
    }

    #[test]
    fn bilstm_reversal_swaps_directions(x in matrix(2..=6, 3), seed in 0u64..1000) {
        let mut r = rng(seed);
        let wf: Vec<Tensor> = vec![
            rand_tensor(&mut r, &[3, 8], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 8], -1.0, 1.0),
            rand_tensor(&mut r, &[8], -1.0, 1.0),
        ];
        let wb: Vec<Tensor> = vec![
            rand_tensor(&mut r, &[3, 8], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 8], -1.0, 1.0),
            rand_tensor(&mut r, &[8], -1.0, 1.0),
        ];
        let run = |input: &Tensor, first: &[Tensor], second: &[Tensor]| {
            let mut g = Graph::new();
            let xi = g.constant(input.clone());
            let f = [0, 1, 2].map(|k| g.constant(first[k].clone()));
            let b = [0, 1, 2].map(|k| g.constant(second[k].clone()));
            let out = bilstm(&mut g, xi, f, b).unwrap();
            g.value(out).clone()
        };
        let t = x.rows();
        let mut rev = Vec::new();
        for i in (0..t).rev() {
            rev.extend_from_slice(x.row(i));
        }
        let rev = Tensor::matrix(t, 3, rev);
        let lhs = run(&rev, &wf, &wb);
        let swapped = run(&x, &wb, &wf);
        for i in 0..t {
            let src = swapped.row(t - 1 - i);
            let expect: Vec<f64> = src[2..].iter().chain(&src[..2]).copied().collect();
            prop_assert_eq!(lhs.row(i), expect.as_slice());
        }
    }

    #[test]
    fn ctc_loss_is_nonnegative(t in 1usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let logits = rand_tensor(&mut r, &[t, 4], -3.0, 3.0);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let lp = g.log_softmax(x).unwrap();
        let lp = g.value(lp).clone();
        let len = r.gen_range(1..=t.min(3));
        let label: Vec<usize> = (0..len).map(|_| r.gen_range(0..3)).collect();
        if let Ok(loss) = ctc_loss(&lp, &LabelSeq::new(label).unwrap(), 3) {
            prop_assert!(loss >= 0.0);
        }
    }

    #[test]
    fn edit_distance_is_a_metric(a in word(3, 6), b in word(3, 6), c in word(3, 6)) {
        let d = |x: &str, y: &str| edit_distance(x, y, EdMode::Full).unwrap().distance;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert_eq!(d(&a, &a), 0);
        if let Ok(sub) = edit_distance(&a, &b, EdMode::SubstitutionOnly) {
            prop_assert!(d(&a, &b) <= sub.distance);
        }
    }

    #[test]
    fn cer_is_permutation_invariant(pairs in prop::collection::vec((word(3, 5), word(3, 5).prop_filter("nonempty", |w| !w.is_empty())), 1..8), seed in 0u64..1000) {
        let preds: Vec<&str> = pairs.iter().map(|p| p.0.as_str()).collect();
        let refs: Vec<&str> = pairs.iter().map(|p| p.1.as_str()).collect();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut r = rng(seed);
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let pp: Vec<&str> = order.iter().map(|&i| preds[i]).collect();
        let rr: Vec<&str> = order.iter().map(|&i| refs[i]).collect();
        prop_assert!((cer(&preds, &refs).unwrap() - cer(&pp, &rr).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn distances_are_symmetric_and_vanish_on_identical_bags(a in matrix(6..=10, 4), b in matrix(6..=10, 4)) {
        let (a, b) = (EmbeddingBag::new(a).unwrap(), EmbeddingBag::new(b).unwrap());
        for spec in all_specs() {
            let ab = dml_distance(&spec, &a, &b).unwrap();
            let ba = dml_distance(&spec, &b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12 * ab.abs().max(1.0), "{:?}", spec);
            prop_assert!(dml_distance(&spec, &a, &a).unwrap().abs() < 1e-12, "{:?}", spec);
        }
    }

    #[test]
    fn distances_ignore_row_order(a in matrix(5..=8, 3), b in matrix(5..=8, 3), seed in 0u64..1000) {
        let mut r = rng(seed);
        let n = a.rows();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| a.row(i).to_vec()).collect();
        let pa = EmbeddingBag::from_rows(&rows).unwrap();
        let (a, b) = (EmbeddingBag::new(a).unwrap(), EmbeddingBag::new(b).unwrap());
        for spec in all_specs() {
            let x = dml_distance(&spec, &a, &b).unwrap();
            let y = dml_distance(&spec, &pa, &b).unwrap();
            prop_assert!((x - y).abs() < 1e-10 * x.abs().max(1.0), "{:?}: {} vs {}", spec, x, y);
        }
    }

    #[test]
    fn homm_first_order_is_linear_mmd(a in matrix(2..=6, 4), b in matrix(2..=6, 4)) {
        let mean = |t: &Tensor, j: usize| (0..t.rows()).map(|i| t.get2(i, j)).sum::<f64>() / t.rows() as f64;
        let want = (0..4).map(|j| (mean(&a, j) - mean(&b, j)).powi(2)).sum::<f64>() / 4.0;
        let got = homm(&EmbeddingBag::new(a).unwrap(), &EmbeddingBag::new(b).unwrap(), 1).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn centered_second_order_homm_is_four_coral(a in matrix(2..=6, 3), b in matrix(2..=6, 3)) {
        let center = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let c = g.center(x, 0).unwrap();
            EmbeddingBag::new(g.value(c).clone()).unwrap()
        };
        let (ca, cb) = (center(&a), center(&b));
        let (a, b) = (EmbeddingBag::new(a).unwrap(), EmbeddingBag::new(b).unwrap());
        let h2 = homm(&ca, &cb, 2).unwrap();
        prop_assert!((h2 - 4.0 * coral(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone(max_e in 1usize..400) {
        let mut prev = usize::MAX;
        for e in 0..max_e {
            let b = ed_lower_bound(e, max_e).unwrap();
            prop_assert!(b >= 1 && b <= prev);
            prev = b;
        }
    }

    #[test]
    fn triplet_hinge_is_exact(a in matrix(3..=5, 2), p in matrix(3..=5, 2), n in matrix(3..=5, 2), alpha in 0.0f64..0.5) {
        let spec = DmlLossSpec::new(DmlKind::Homm { p: 1 });
        let bags = [a, p, n].map(|t| EmbeddingBag::new(t).unwrap());
        let dap = dml_distance(&spec, &bags[0], &bags[1]).unwrap();
        let dan = dml_distance(&spec, &bags[0], &bags[2]).unwrap();
        let loss = triplet_loss(&bags[..1], &bags[1..2], &bags[2..3], &spec, alpha).unwrap();
        if dap + alpha <= dan {
            prop_assert_eq!(loss, 0.0);
        } else {
            prop_assert!(loss > 0.0);
            prop_assert!((loss - (dap - dan + alpha)).abs() < 1e-12);
        }
    }

    #[test]
    fn dictionary_pairs_reproduce_their_key(seed in 0u64..500) {
        let mut r = rng(seed);
        let tl: Vec<String> = (0..8).map(|_| random_word(&mut r, 3, 2, 3)).collect();
        let mut pl: Vec<String> = (0..20).map(|_| random_word(&mut r, 3, 2, 3)).collect();
        pl.push(tl[0].clone());
        let dict = build_pair_dictionary(&labelled(Domain::Tablet, &tl), &labelled(Domain::Paper, &pl)).unwrap();
        for ed in 0..=MAX_ED {
            for (t, p) in dict.pairs(ed) {
                prop_assert_eq!(edit_distance(&tl[t], &pl[p], EdMode::SubstitutionOnly).unwrap().distance, ed);
            }
        }
    }

    #[test]
    fn lm_ranking_is_monotone_at_net_ties(gamma in 0.01f64..5.0, net in -5.0f64..0.0) {
        let lm = build_ngram("abc abc abc acb bca", 2).unwrap();
        let words = ["abc", "acb", "bca", "cab"];
        let cands: Vec<CandidatePath> = words
            .iter()
            .map(|w| CandidatePath { frames: vec![], labels: vec![], word: (*w).to_string(), log_prob: net })
            .collect();
        let best = rescore(&cands, &lm, gamma).unwrap();
        let top = words.iter().map(|w| ngram_logprob(&lm, w)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(ngram_logprob(&lm, &best.word), top);
    }

    #[test]
    fn rescore_without_lm_picks_a_dominant_best_path(seed in 0u64..1000, t in 2usize..6) {
        let mut r = rng(seed);
        // peaked posteriors: the best frame path carries more than half the mass
        let mut probs = Vec::new();
        for _ in 0..t {
            let top = r.gen_range(0..3);
            probs.extend((0..3).map(|k| if k == top { 0.9 } else { 0.05 }));
        }
        let sm = Tensor::matrix(t, 3, probs.clone());
        let best_mass: f64 = (0..t).map(|f| (0..3).map(|k| probs[f * 3 + k]).fold(0.0, f64::max)).product();
        prop_assume!(best_mass > 0.5);
        let alphabet = Alphabet::new(['a', 'b']);
        let cands = enumerate_paths(&sm, &alphabet, &PathConfig::default());
        let lm = build_ngram("ab ba", 2).unwrap();
        let chosen = rescore(&cands, &lm, 0.0).unwrap();
        let lp = Tensor::matrix(t, 3, probs.iter().map(|p| p.ln()).collect());
        let labels = best_path_decode(&lp, 2);
        prop_assert_eq!(chosen.labels.clone(), labels);
    }
}

fn labelled(domain: Domain, labels: &[String]) -> Dataset {
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, l)| MtsSample {
            id: format!("{domain}-{i}"),
            writer: format!("w{}", i % 3),
            domain,
            label: l.clone(),
            signal: vec![[0.0; CHANNELS]; 2],
        })
        .collect();
    Dataset::new(samples, None).unwrap()
}

fn noisy_sample(r: &mut rand_chacha::ChaCha8Rng, i: usize, writer: usize, m: usize) -> MtsSample {
    let mut signal = vec![[0.0; CHANNELS]; m];
    for row in signal.iter_mut() {
        for (ch, v) in row.iter_mut().enumerate() {
            *v = if ch == 4 { 3.0 } else { r.gen_range(-5.0..5.0) };
        }
    }
    MtsSample {
        id: format!("s{i}"),
        writer: format!("w{writer}"),
        domain: Domain::Tablet,
        label: "ab".into(),
        signal,
    }
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn pad_normalize_standardizes_valid_steps(seed in 0u64..1000, m in 2usize..20) {
        let mut r = rng(seed);
        let s = noisy_sample(&mut r, 0, 0, m);
        let (x, mask) = pad_normalize(&s, 20).unwrap();
        prop_assert_eq!(mask.iter().filter(|&&b| b).count(), m);
        for ch in 0..CHANNELS {
            let vals: Vec<f64> = (0..m).map(|t| x.get2(t, ch)).collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            if ch == 4 {
                prop_assert_eq!(std, 0.0);
            } else {
                prop_assert!((std - 1.0).abs() < 1e-9);
            }
            prop_assert!((m..20).all(|t| x.get2(t, ch) == 0.0));
        }
    }

    #[test]
    fn splits_respect_writers(seed in 0u64..1000, n in 10usize..80, writers in 2usize..6, ratio in 0.2f64..0.9) {
        let mut r = rng(seed);
        let samples = (0..n).map(|i| noisy_sample(&mut r, i, i % writers, 2)).collect();
        let ds = Dataset::new(samples, None).unwrap();
        let (tr, va) = split(&ds, SplitMode::Wd, ratio, seed).unwrap();
        let count = |d: &Dataset| {
            let mut m: BTreeMap<String, usize> = BTreeMap::new();
            for s in &d.samples {
                *m.entry(s.writer.clone()).or_default() += 1;
            }
            m
        };
        let (all, train) = (count(&ds), count(&tr));
        for (w, total) in &all {
            let got = *train.get(w).unwrap_or(&0) as f64;
            prop_assert!((got - ratio * *total as f64).abs() <= 1.0);
        }
        prop_assert_eq!(tr.len() + va.len(), n);
        let (tr, va) = split(&ds, SplitMode::Wi, ratio, seed).unwrap();
        prop_assert!(tr.writers().is_disjoint(&va.writers()));
        prop_assert_eq!(tr.len() + va.len(), n);
    }
}

#[test]
fn ctc_probabilities_over_all_labels_sum_to_one() {
    let mut r = rng(21);
    for t in 1..=4 {
        for k in 1..=2 {
            let mut data = Vec::new();
            for _ in 0..t {
                let z: Vec<f64> = (0..=k).map(|_| r.gen_range(-2.0..2.0)).collect();
                let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                data.extend(z.iter().map(|v| v - lse));
            }
            let lp = Tensor::matrix(t, k + 1, data);
            let mut total = 0.0;
            // every label of length 1..=t over k symbols (the empty label is not a valid LabelSeq)
            let blank_only: f64 = (0..t).map(|f| lp.get2(f, k)).sum::<f64>().exp();
            total += blank_only;
            for len in 1..=t {
                for code in 0..k.pow(len as u32) {
                    let mut rem = code;
                    let label: Vec<usize> = (0..len)
                        .map(|_| {
                            let v = rem % k;
                            rem /= k;
                            v
                        })
                        .collect();
                    if let Ok(loss) = ctc_loss(&lp, &LabelSeq::new(label).unwrap(), k) {
                        total += (-loss).exp();
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-9, "T={t} K={k}: {total}");
        }
    }
}

#[test]
fn sampled_homm_is_unbiased() {
    let mut r = rng(22);
    let a = EmbeddingBag::new(rand_tensor(&mut r, &[6, 2], -1.0, 1.0)).unwrap();
    let b = EmbeddingBag::new(rand_tensor(&mut r, &[5, 2], -1.0, 1.0)).unwrap();
    let full = homm(&a, &b, 2).unwrap();
    let mean = (0..1000u64)
        .map(|s| homm_sampled(&a, &b, 2, 4, s).unwrap())
        .sum::<f64>()
        / 1000.0;
    assert!((mean - full).abs() < 0.05 * full, "{mean} vs {full}");
}

#[test]
fn negative_selection_is_uniform() {
    let tl: Vec<String> = vec!["aa".into()];
    let pl: Vec<String> = ["aa", "ab", "ba", "ca", "ac", "bb"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let dict = build_pair_dictionary(
        &labelled(Domain::Tablet, &tl),
        &labelled(Domain::Paper, &pl),
    )
    .unwrap();
    // bound 1 at the last epoch: the ED-1 partners are paper 1..=4
    let eligible = dict.partners(0, 1).to_vec();
    assert_eq!(eligible, vec![1, 2, 3, 4]);
    let n = 10_000u64;
    let mut freq: BTreeMap<usize, u64> = BTreeMap::new();
    for seed in 0..n {
        let sel = select_triplets(&[0], &dict, 99, 100, seed).unwrap();
        *freq.entry(sel.triplets[0].negative).or_default() += 1;
    }
    let p = 1.0 / eligible.len() as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for e in eligible {
        let got = *freq.get(&e).unwrap_or(&0) as f64;
        assert!(
            (got - n as f64 * p).abs() < 3.0 * sigma,
            "negative {e}: {got}"
        );
    }
}

#[test]
fn synthetic_generation_is_reproducible() {
    let cfg = SynthConfig {
        n_tablet: 20,
        n_paper: 30,
        seed: 5,
        ..SynthConfig::default()
    };
    let (t1, p1) = synth_generate(&cfg).unwrap();
    let (t2, p2) = synth_generate(&cfg).unwrap();
    let bits = |d: &Dataset| -> Vec<u64> {
        d.samples
            .iter()
            .flat_map(|s| s.signal.iter().flatten().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&t1), bits(&t2));
    assert_eq!(bits(&p1), bits(&p2));
    assert_eq!(
        t1.samples.iter().map(|s| &s.label).collect::<Vec<_>>(),
        t2.samples.iter().map(|s| &s.label).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny_model();
    let params = init_params(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &params, "meta").unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta, "meta");
    let mut r = rng(3);
    let batch = vec![rand_tensor(&mut r, &[12, CHANNELS], -1.0, 1.0)];
    let a = forward(&params, &batch, &cfg).unwrap();
    let b = forward(&loaded, &batch, &cfg).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a[0].log_probs), bits(&b[0].log_probs));
}

#[test]
fn collapse_ignores_blank_runs() {
    assert_eq!(collapse(&[2, 0, 0, 2, 1, 1, 2, 1], 2), vec![0, 1, 1]);
}
