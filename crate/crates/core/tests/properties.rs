use std::collections::BTreeMap;

use proptest::prelude::*;
use psydef_core::augmentor::DmrsCatalog;
use psydef_core::corpus::{Dialogue, Speaker, Turn};
use psydef_core::evaluation::{evaluate, pearson};
use psydef_core::features::{aggregate_mechanisms, dmrs_level, extract_heuristics, DefenseProfile, HeuristicConfig};
use psydef_core::backends::EmotionResult;
use psydef_core::quality::{cohens_kappa, self_bleu};
use psydef_core::text::tokenize;
use psydef_core::Label;

fn catalog() -> DmrsCatalog {
    serde_json::from_str(include_str!("../../../data/dmrs_catalog.json")).unwrap()
}

const WORDS: [&str; 10] = ["sad", "work", "mom", "tired", "fine", "angry", "alone", "job", "sleep", "cry"];

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::collection::vec(0..WORDS.len(), 1..9).prop_map(|ix| ix.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")),
        2..7,
    )
}

fn grams(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Direct restatement: each text against every other, maximum reference count.
fn self_bleu_oracle(texts: &[String], max_n: usize) -> f64 {
    let toks: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
    let mut total = 0.0;
    for (i, hyp) in toks.iter().enumerate() {
        if hyp.is_empty() {
            continue;
        }
        let refs: Vec<&Vec<String>> = toks.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t).collect();
        let orders = max_n.min(hyp.len());
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=orders {
            let h = grams(hyp, n);
            let hyp_total: usize = h.values().sum();
            let mut clipped = 0;
            for (g, &c) in &h {
                let max_ref = refs.iter().map(|r| grams(r, n).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                clipped += c.min(max_ref);
            }
            let p = if clipped > 0 {
                clipped as f64 / hyp_total as f64
            } else if n == 1 {
                zero = true;
                break;
            } else {
                1.0 / (hyp_total as f64 + 1.0)
            };
            log_sum += p.ln() / orders as f64;
        }
        if zero {
            continue;
        }
        let c = hyp.len() as i64;
        let r = refs
            .iter()
            .map(|t| t.len() as i64)
            .min_by_key(|&l| ((l - c).abs(), l))
            .unwrap();
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        total += bp * log_sum.exp();
    }
    total / texts.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn self_bleu_matches_oracle(texts in corpus_strategy()) {
        let fast = self_bleu(&texts, 4).unwrap();
        prop_assert!((fast - self_bleu_oracle(&texts, 4)).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&fast));
    }

    #[test]
    fn self_bleu_permutation_invariant(texts in corpus_strategy(), seed in any::<u64>()) {
        let mut shuffled = texts.clone();
        let len = shuffled.len();
        let mut s = seed;
        for i in (1..len).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = self_bleu(&texts, 4).unwrap();
        let b = self_bleu(&shuffled, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn self_bleu_duplicates_saturate(text in prop::collection::vec(0..WORDS.len(), 1..12), copies in 2usize..6) {
        let t = text.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
        let texts = vec![t; copies];
        prop_assert!((self_bleu(&texts, 4).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kappa_symmetric_and_bounded(pairs in prop::collection::vec((0u8..9, 0u8..9), 1..80)) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let k = cohens_kappa(&a, &b).unwrap();
        prop_assert!((k - cohens_kappa(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&k));
        prop_assert!((cohens_kappa(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn profile_sums_to_one_and_argmax_scale_invariant(
        scores in prop::collection::vec(0.0f64..1.0, 150),
        scale in 0.01f64..100.0,
    ) {
        let cat = catalog();
        let p = aggregate_mechanisms(&scores, &cat).unwrap();
        prop_assert_eq!(p.0.len(), 30);
        prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        let q = aggregate_mechanisms(&scaled, &cat).unwrap();
        prop_assert_eq!(dmrs_level(&p, &cat), dmrs_level(&q, &cat));
        let mass_scaled = DefenseProfile(p.0.iter().map(|v| v * scale).collect());
        prop_assert_eq!(dmrs_level(&p, &cat), dmrs_level(&mass_scaled, &cat));
    }

    #[test]
    fn heuristics_stay_in_range(words in prop::collection::vec(0..WORDS.len(), 1..80), conf in 0.0f64..1.0) {
        let text = words.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ");
        let f = extract_heuristics(&text, &EmotionResult::new("sadness", conf), &HeuristicConfig::default());
        for v in f.as_slice() {
            prop_assert!((0.0..=1.0).contains(v), "{v}");
        }
    }

    #[test]
    fn macro_f1_invariant_under_relabeling(
        pairs in prop::collection::vec((0u8..9, 0u8..9), 1..120),
        perm in Just((0u8..9).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let r1 = evaluate(&p, &g).unwrap();
        let pm: Vec<u8> = p.iter().map(|&l| perm[l as usize]).collect();
        let gm: Vec<u8> = g.iter().map(|&l| perm[l as usize]).collect();
        let r2 = evaluate(&pm, &gm).unwrap();
        prop_assert!((r1.macro_f1 - r2.macro_f1).abs() < 1e-12);
        prop_assert!((r1.accuracy - r2.accuracy).abs() < 1e-12);
        let trace: usize = (0..9).map(|c| r1.confusion[c][c]).sum();
        prop_assert!((r1.accuracy - trace as f64 / p.len() as f64).abs() < 1e-15);
        for c in 0..9 {
            prop_assert_eq!(r1.confusion[c].iter().sum::<usize>(), r1.per_class[c].support);
            if r1.per_class[c].support > 0 {
                prop_assert!((r1.confusion_row_norm[c].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pearson_bounded(xs in prop::collection::vec(-10.0f64..10.0, 2..30)) {
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        if let Some(r) = pearson(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn corpus_json_round_trip(
        texts in prop::collection::vec("[a-zA-Z ,.!?']{1,40}", 1..8),
        labels in prop::collection::vec(proptest::option::of(0u8..9), 8),
        latency in proptest::option::of(0.0f64..120.0),
    ) {
        let texts: Vec<String> = texts.into_iter().map(|t| format!("x{t}")).collect();
        let turns: Vec<Turn> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let seeker = i % 2 == 0;
                Turn {
                    index: i,
                    speaker: if seeker { Speaker::Seeker } else { Speaker::Supporter },
                    text: t.clone(),
                    label: if seeker { labels[i].and_then(Label::new) } else { None },
                    response_time_s: if seeker { latency } else { None },
                }
            })
            .collect();
        let d = Dialogue { id: "prop".into(), turns };
        prop_assert!(d.validate().is_ok());
        let json = serde_json::to_string(&d).unwrap();
        let back: Dialogue = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, d);
    }
}

#[test]
fn one_hot_indicator_maps_to_owning_level() {
    let cat = catalog();
    for j in 0..cat.indicators().len() {
        let mut scores = vec![0.0; cat.indicators().len()];
        scores[j] = 1.0;
        let profile = aggregate_mechanisms(&scores, &cat).unwrap();
        let owner = cat.mechanism_level_id(cat.indicator_mechanism(j));
        assert_eq!(dmrs_level(&profile, &cat).get(), owner, "indicator {j}");
    }
}
