//! Independent EM oracle: on a fixture small enough to enumerate every
//! segmentation, recompute the trainer's E-step, M-step, and final smoothed
//! probabilities by brute force, and require the trained vocabulary to
//! match.

use std::collections::HashMap;

use vtt::vocab::{seed_candidates, train_unigram_outcome, PieceKind, TrainerConfig};

const CORPUS: &[u8] = b"abab abab abab";
const WORD: &str = "\u{2581}abab";
const WORD_FREQ: f64 = 3.0;
const BYTE_MASS: f64 = 1e-4;

/// Every segmentation of `word` over `pieces`, as piece-index sequences.
fn all_segmentations(word: &[char], pieces: &[(String, f64)]) -> Vec<Vec<usize>> {
    fn go(
        word: &[char],
        pieces: &[(String, f64)],
        pos: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if pos == word.len() {
            out.push(current.clone());
            return;
        }
        for (idx, (text, _)) in pieces.iter().enumerate() {
            let chars: Vec<char> = text.chars().collect();
            if word[pos..].starts_with(&chars) {
                current.push(idx);
                go(word, pieces, pos + chars.len(), current, out);
                current.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(word, pieces, 0, &mut Vec::new(), &mut out);
    out
}

/// One exact EM iteration by enumeration. Returns (log-likelihood before
/// the update, expected counts).
fn exact_em_step(segs: &[Vec<usize>], probs: &[f64]) -> (f64, Vec<f64>) {
    let seg_probs: Vec<f64> = segs
        .iter()
        .map(|seg| seg.iter().map(|&i| probs[i]).product())
        .collect();
    let z: f64 = seg_probs.iter().sum();
    let mut counts = vec![0.0; probs.len()];
    for (seg, sp) in segs.iter().zip(&seg_probs) {
        let posterior = sp / z;
        for &i in seg {
            counts[i] += WORD_FREQ * posterior;
        }
    }
    (WORD_FREQ * z.ln(), counts)
}

#[test]
fn trainer_matches_exact_em_on_enumerable_fixture() {
    // Candidate pool with content length <= 2: singles ▁ a b plus
    // ab, ba, ▁a, ▁ab. Target size so that nothing is pruned.
    let cfg = TrainerConfig {
        max_piece_len: 2,
        em_iterations: 4,
        ..TrainerConfig::default()
    };
    let target = 4 + 256 + 7;
    let outcome = train_unigram_outcome(CORPUS, target, &cfg).unwrap();
    assert_eq!(outcome.vocabulary.size(), target);
    assert_eq!(outcome.rounds.len(), 1, "nothing to prune: one round");

    // Oracle piece set in the trainer's construction order: sorted singles,
    // then seed candidates (freq desc, text asc) of content >= 2 chars.
    let cands = seed_candidates(CORPUS, 2, 1).unwrap();
    let mut pieces: Vec<(String, f64)> = vec![
        ("a".into(), 0.0),
        ("b".into(), 0.0),
        ("\u{2581}".into(), 0.0),
    ];
    for (text, _) in &cands {
        if text.chars().count() >= 2 {
            pieces.push((text.clone(), 0.0));
        }
    }
    assert_eq!(pieces.len(), 7);
    let freq: HashMap<&str, f64> = cands.iter().map(|(t, f)| (t.as_str(), *f as f64)).collect();

    // Trainer initialization: probability proportional to freq * chars.
    let weights: Vec<f64> = pieces
        .iter()
        .map(|(t, _)| freq[t.as_str()] * t.chars().count() as f64)
        .collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let word: Vec<char> = WORD.chars().collect();
    let segs = all_segmentations(&word, &pieces);
    assert!(segs.len() > 1, "fixture must be ambiguous");

    // Exact EM, tracking the likelihood trace the trainer reports.
    let mut lls = Vec::new();
    let mut counts = Vec::new();
    for _ in 0..cfg.em_iterations {
        let (ll, c) = exact_em_step(&segs, &probs);
        lls.push(ll);
        let t: f64 = c.iter().sum();
        probs = c.iter().map(|&x| x / t).collect();
        counts = c;
    }

    // The trainer's recorded log-likelihoods match the enumeration.
    let trace = &outcome.rounds[0].log_likelihood;
    assert_eq!(trace.len(), lls.len());
    for (got, expect) in trace.iter().zip(&lls) {
        assert!(
            (got - expect).abs() <= 1e-9 * expect.abs().max(1.0),
            "trainer LL {got} vs oracle {expect}"
        );
    }

    // Final vocabulary probabilities are the smoothed last counts, scaled
    // by the byte-mass reservation.
    let total: f64 = counts.iter().sum::<f64>() + 0.5 * counts.len() as f64;
    for ((text, _), &c) in pieces.iter().zip(&counts) {
        let expect = ((c + 0.5) / total).ln() + (1.0 - BYTE_MASS).ln();
        let id = outcome.vocabulary.id_of(text).unwrap();
        let got = outcome.vocabulary.piece(id).log_prob;
        assert!(
            (got - expect).abs() < 1e-9,
            "piece {text:?}: trained {got} vs oracle {expect}"
        );
    }

    // The qualitative claim: the frequent bigram outranks its characters.
    let lp = |t: &str| {
        outcome
            .vocabulary
            .piece(outcome.vocabulary.id_of(t).unwrap())
            .log_prob
    };
    assert!(lp("ab") > lp("a"));
    assert!(lp("ab") > lp("b"));

    // And EM concentrated on the [▁][ab][ab] decomposition: "ab" ends up
    // the most probable multi-character piece.
    for other in ["ba", "\u{2581}a"] {
        assert!(lp("ab") > lp(other), "lp(ab) <= lp({other})");
    }

    // Byte pieces carry exactly the reserved mass.
    let byte_lp = (BYTE_MASS / 256.0).ln();
    for piece in outcome.vocabulary.pieces() {
        if piece.kind == PieceKind::ByteFallback {
            assert_eq!(piece.log_prob.to_bits(), byte_lp.to_bits());
        }
    }
}
