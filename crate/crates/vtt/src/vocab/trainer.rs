//! Unigram language-model vocabulary training: seed enumeration, EM over the
//! segmentation lattice, and loss-ranked pruning down to an exact target size.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::vocab::{Piece, Vocabulary, BOUNDARY};

/// Knobs for [`train_unigram`]. The defaults are the trainer's contract;
/// change them only when you need nested vocabularies (fix `seed_size`) or a
/// different piece-length budget.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    /// Maximum piece length in characters, not counting a leading boundary
    /// marker.
    pub max_piece_len: usize,
    /// Number of candidate pieces the EM starts from; `None` means
    /// `20 * target_size`. Runs with the same corpus and the same explicit
    /// `seed_size` produce nested vocabularies across target sizes.
    pub seed_size: Option<usize>,
    /// Candidates below this corpus frequency never enter the seed.
    pub min_freq: u64,
    /// EM iterations per pruning round.
    pub em_iterations: usize,
    /// Fraction of prunable pieces kept per round.
    pub shrink_factor: f64,
    /// Reserve 256 byte pieces so any UTF-8 input stays segmentable.
    pub byte_fallback: bool,
    /// Total probability mass assigned to the 256 byte pieces; the learned
    /// pieces are scaled by `1 - byte_mass` so everything still sums to 1.
    pub byte_mass: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            max_piece_len: 8,
            seed_size: None,
            min_freq: 1,
            em_iterations: 2,
            shrink_factor: 0.8,
            byte_fallback: true,
            byte_mass: 1e-4,
        }
    }
}

/// Per-round training trace.
#[derive(Debug, Clone)]
pub struct RoundStats {
    pub pieces_before: usize,
    pub pieces_after: usize,
    /// Corpus log-likelihood at each EM iteration, evaluated with the
    /// probabilities that iteration started from.
    pub log_likelihood: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub vocabulary: Vocabulary,
    pub rounds: Vec<RoundStats>,
}

/// Train a unigram vocabulary of exactly `target_size` pieces.
pub fn train_unigram(corpus: &[u8], target_size: usize, cfg: &TrainerConfig) -> Result<Vocabulary> {
    Ok(train_unigram_outcome(corpus, target_size, cfg)?.vocabulary)
}

/// [`train_unigram`] plus the per-round likelihood trace.
pub fn train_unigram_outcome(
    corpus: &[u8],
    target_size: usize,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    let text = decode_corpus(corpus)?;
    let words = word_frequencies(text);
    let alphabet: BTreeSet<char> = words.iter().flat_map(|(w, _)| w.chars()).collect();

    let special_count = crate::vocab::SpecialRole::ALL.len();
    let byte_count = if cfg.byte_fallback { 256 } else { 0 };
    let min_size = special_count + byte_count + alphabet.len();
    if target_size < min_size {
        return Err(Error::Config(format!(
            "target_size {target_size} is below the minimum feasible size {min_size} \
             ({special_count} specials + {byte_count} byte pieces + {} single characters)",
            alphabet.len()
        )));
    }
    let target_normals = target_size - special_count - byte_count;

    // Seed: mandatory single characters plus the top multi-char substrings.
    let candidates = seed_from_words(&words, cfg.max_piece_len, cfg.min_freq);
    let freq_of: HashMap<&str, u64> = candidates.iter().map(|(t, f)| (t.as_str(), *f)).collect();
    let seed_size = cfg.seed_size.unwrap_or(20 * target_size);

    let mut texts: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let mandatory = texts.len();
    let budget = seed_size.saturating_sub(mandatory);
    texts.extend(
        candidates
            .iter()
            .filter(|(t, _)| t.chars().count() >= 2)
            .take(budget)
            .map(|(t, _)| t.clone()),
    );
    if texts.len() < target_normals {
        return Err(Error::Config(format!(
            "corpus yields only {} candidate pieces; cannot reach target_size {target_size} \
             (raise seed_size or lower min_freq)",
            texts.len() + special_count + byte_count
        )));
    }

    // Initial probabilities proportional to frequency * length.
    let mut log_probs: Vec<f64> = {
        let weights: Vec<f64> = texts
            .iter()
            .map(|t| {
                let f = freq_of.get(t.as_str()).copied().unwrap_or(1).max(1);
                f as f64 * t.chars().count() as f64
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| (w / total).ln()).collect()
    };

    let lattice_words: Vec<WordData> = words
        .iter()
        .map(|(w, f)| WordData::new(w.clone(), *f))
        .collect();

    let mut rounds = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    loop {
        let mut round = RoundStats {
            pieces_before: texts.len(),
            pieces_after: texts.len(),
            log_likelihood: Vec::new(),
        };

        let index: HashMap<&str, u32> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        let max_chars = texts.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        let edges: Vec<Vec<Edge>> = lattice_words
            .iter()
            .map(|w| w.find_edges(&index, max_chars))
            .collect();

        counts.clear();
        counts.resize(texts.len(), 0.0);
        if !texts.is_empty() {
            for _ in 0..cfg.em_iterations {
                counts.iter_mut().for_each(|c| *c = 0.0);
                let ll = e_step(&lattice_words, &edges, &log_probs, &mut counts);
                round.log_likelihood.push(ll);
                m_step(&counts, &mut log_probs);
            }
        }

        if texts.len() == target_normals {
            rounds.push(round);
            break;
        }

        // Rank prunable pieces by how much likelihood is lost if the piece
        // is replaced by its best alternative segmentation.
        //
        // Usage comes from the Viterbi paths, not the posteriors: redundant
        // candidates that split posterior mass would otherwise all rank low
        // and die in the same round. The loss itself is evaluated with
        // add-half smoothed probabilities: pieces the model stopped using
        // spiral toward zero probability, and unsmoothed estimates would
        // make every piece containing such a character look irreplaceable.
        let usage = viterbi_counts(&lattice_words, &edges, &log_probs, texts.len());
        let smoothed = smoothed_log_probs(&counts);
        let mut ranked: Vec<usize> = (mandatory..texts.len()).collect();
        let losses: Vec<f64> = ranked
            .iter()
            .map(|&i| {
                let alt = best_alt_score(&texts[i], i, &index, &smoothed, max_chars);
                usage[i] * (smoothed[i] - alt)
            })
            .collect();
        ranked.sort_by(|&a, &b| {
            let la = losses[a - mandatory];
            let lb = losses[b - mandatory];
            lb.partial_cmp(&la)
                .expect("losses are finite")
                .then_with(|| texts[a].cmp(&texts[b]))
        });

        let prunable = ranked.len();
        let keep = ((prunable as f64 * cfg.shrink_factor).floor() as usize)
            .max(target_normals - mandatory);
        let kept: HashSet<usize> = ranked[..keep].iter().copied().collect();

        let mut new_texts = Vec::with_capacity(mandatory + keep);
        let mut new_lps = Vec::with_capacity(mandatory + keep);
        for (i, t) in texts.iter().enumerate() {
            if i < mandatory || kept.contains(&i) {
                new_texts.push(t.clone());
                new_lps.push(log_probs[i]);
            }
        }
        // Renormalize the survivors.
        let log_total = log_sum_exp(&new_lps);
        new_lps.iter_mut().for_each(|lp| *lp -= log_total);

        texts = new_texts;
        log_probs = new_lps;
        round.pieces_after = texts.len();
        rounds.push(round);
    }

    // Assemble the final vocabulary: specials, byte pieces, then learned
    // pieces ordered by descending probability. Final probabilities are the
    // add-half smoothed expected counts of the last EM step, so pieces the
    // model never uses (rare single characters) keep a sane floor instead
    // of an underflowed probability.
    let log_probs = smoothed_log_probs(&counts);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.sort_by(|&a, &b| {
        log_probs[b]
            .partial_cmp(&log_probs[a])
            .expect("log probs are finite")
            .then_with(|| texts[a].cmp(&texts[b]))
    });

    let mut pieces = Piece::specials();
    if cfg.byte_fallback {
        let byte_lp = (cfg.byte_mass / 256.0).ln();
        pieces.extend(Piece::byte_pieces(byte_lp));
    }
    let normal_scale = if cfg.byte_fallback {
        (1.0 - cfg.byte_mass).ln()
    } else {
        0.0
    };
    for &i in &order {
        let lp = (log_probs[i] + normal_scale).min(0.0);
        pieces.push(Piece::normal(texts[i].clone(), lp));
    }

    let vocabulary = Vocabulary::from_pieces(pieces)?;
    debug_assert_eq!(vocabulary.size(), target_size);
    Ok(TrainOutcome { vocabulary, rounds })
}

/// Enumerate candidate pieces: every substring (in characters, up to
/// `max_piece_len`, not counting a leading boundary marker) of every
/// whitespace-pretokenized, marker-prefixed word. A candidate's frequency is
/// the number of word occurrences containing it. Sorted by descending
/// frequency, ties lexicographic.
pub fn seed_candidates(
    corpus: &[u8],
    max_piece_len: usize,
    min_freq: u64,
) -> Result<Vec<(String, u64)>> {
    let text = decode_corpus(corpus)?;
    let words = word_frequencies(text);
    Ok(seed_from_words(&words, max_piece_len, min_freq))
}

fn seed_from_words(
    words: &[(String, u64)],
    max_piece_len: usize,
    min_freq: u64,
) -> Vec<(String, u64)> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut distinct: HashSet<&str> = HashSet::new();
    for (word, freq) in words {
        // `word` is "▁raw"; raw substrings plus marker-prefixed prefixes.
        let raw = &word[BOUNDARY.len_utf8()..];
        let bounds: Vec<usize> = raw
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(raw.len()))
            .collect();
        let n = bounds.len() - 1;

        distinct.clear();
        for i in 0..n {
            for j in (i + 1)..=(i + max_piece_len).min(n) {
                distinct.insert(&raw[bounds[i]..bounds[j]]);
            }
        }
        for k in 0..=n.min(max_piece_len) {
            distinct.insert(&word[..BOUNDARY.len_utf8() + bounds[k]]);
        }
        for s in &distinct {
            *counts.entry((*s).to_string()).or_insert(0) += freq;
        }
    }

    let mut out: Vec<(String, u64)> = counts.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn decode_corpus(corpus: &[u8]) -> Result<&str> {
    let text = std::str::from_utf8(corpus).map_err(|e| Error::Decode {
        offset: e.valid_up_to(),
    })?;
    if let Some(off) = text.find(BOUNDARY) {
        return Err(Error::Config(format!(
            "corpus contains the reserved boundary marker U+2581 at byte offset {off}"
        )));
    }
    Ok(text)
}

/// Whitespace-pretokenize and prefix each word with the boundary marker.
/// Sorted by word text for deterministic iteration.
fn word_frequencies(text: &str) -> Vec<(String, u64)> {
    let mut map: BTreeMap<String, u64> = BTreeMap::new();
    for word in text.split_whitespace() {
        let mut marked = String::with_capacity(word.len() + BOUNDARY.len_utf8());
        marked.push(BOUNDARY);
        marked.push_str(word);
        *map.entry(marked).or_insert(0) += 1;
    }
    map.into_iter().collect()
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    from: u32,
    to: u32,
    piece: u32,
}

struct WordData {
    text: String,
    bounds: Vec<usize>,
    freq: u64,
}

impl WordData {
    fn new(text: String, freq: u64) -> Self {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect();
        WordData { text, bounds, freq }
    }

    fn char_len(&self) -> usize {
        self.bounds.len() - 1
    }

    fn find_edges(&self, index: &HashMap<&str, u32>, max_chars: usize) -> Vec<Edge> {
        let n = self.char_len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..=(i + max_chars).min(n) {
                if let Some(&piece) = index.get(&self.text[self.bounds[i]..self.bounds[j]]) {
                    edges.push(Edge {
                        from: i as u32,
                        to: j as u32,
                        piece,
                    });
                }
            }
        }
        edges
    }
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Forward-backward over every word lattice. Returns the corpus
/// log-likelihood under the current probabilities and accumulates expected
/// piece counts into `counts` (in piece-index order, so the reduction is
/// deterministic).
fn e_step(words: &[WordData], edges: &[Vec<Edge>], log_probs: &[f64], counts: &mut [f64]) -> f64 {
    let mut total_ll = 0.0;
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    for (word, word_edges) in words.iter().zip(edges) {
        let n = word.char_len();
        alpha.clear();
        alpha.resize(n + 1, f64::NEG_INFINITY);
        beta.clear();
        beta.resize(n + 1, f64::NEG_INFINITY);
        alpha[0] = 0.0;
        for e in word_edges {
            let from = e.from as usize;
            let to = e.to as usize;
            if alpha[from] != f64::NEG_INFINITY {
                alpha[to] = lse2(alpha[to], alpha[from] + log_probs[e.piece as usize]);
            }
        }
        beta[n] = 0.0;
        for e in word_edges.iter().rev() {
            let from = e.from as usize;
            let to = e.to as usize;
            if beta[to] != f64::NEG_INFINITY {
                beta[from] = lse2(beta[from], log_probs[e.piece as usize] + beta[to]);
            }
        }
        let z = alpha[n];
        debug_assert!(z != f64::NEG_INFINITY, "single characters cover every word");
        let f = word.freq as f64;
        total_ll += f * z;
        for e in word_edges {
            let post =
                alpha[e.from as usize] + log_probs[e.piece as usize] + beta[e.to as usize] - z;
            counts[e.piece as usize] += f * post.exp();
        }
    }
    total_ll
}

/// Per-piece corpus frequency along the best segmentation path of each word.
fn viterbi_counts(
    words: &[WordData],
    edges: &[Vec<Edge>],
    log_probs: &[f64],
    n_pieces: usize,
) -> Vec<f64> {
    let mut counts = vec![0.0f64; n_pieces];
    let mut best: Vec<f64> = Vec::new();
    let mut back: Vec<Option<Edge>> = Vec::new();
    for (word, word_edges) in words.iter().zip(edges) {
        let n = word.char_len();
        best.clear();
        best.resize(n + 1, f64::NEG_INFINITY);
        back.clear();
        back.resize(n + 1, None);
        best[0] = 0.0;
        for e in word_edges {
            let from = e.from as usize;
            let to = e.to as usize;
            if best[from] == f64::NEG_INFINITY {
                continue;
            }
            let cand = best[from] + log_probs[e.piece as usize];
            if cand > best[to] {
                best[to] = cand;
                back[to] = Some(*e);
            }
        }
        let mut pos = n;
        while pos > 0 {
            let e = back[pos].expect("single characters cover every word");
            counts[e.piece as usize] += word.freq as f64;
            pos = e.from as usize;
        }
    }
    counts
}

fn m_step(counts: &[f64], log_probs: &mut [f64]) {
    // Expected counts are strictly positive whenever a piece has any lattice
    // edge; the floor only guards against f64 underflow.
    let total: f64 = counts.iter().sum();
    let log_total = total.ln();
    for (lp, &c) in log_probs.iter_mut().zip(counts) {
        *lp = c.max(1e-300).ln() - log_total;
    }
}

/// `ln((c_i + 1/2) / (T + n/2))`: add-half smoothed probability estimates.
/// Used for pruning decisions and the final vocabulary, never inside EM.
fn smoothed_log_probs(counts: &[f64]) -> Vec<f64> {
    let log_total = (counts.iter().sum::<f64>() + 0.5 * counts.len() as f64).ln();
    counts.iter().map(|&c| (c + 0.5).ln() - log_total).collect()
}

/// Best segmentation score of `text` using every piece except `skip`.
/// Single characters are always present, so a path always exists.
fn best_alt_score(
    text: &str,
    skip: usize,
    index: &HashMap<&str, u32>,
    log_probs: &[f64],
    max_chars: usize,
) -> f64 {
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let n = bounds.len() - 1;
    let mut best = vec![f64::NEG_INFINITY; n + 1];
    best[0] = 0.0;
    for i in 0..n {
        if best[i] == f64::NEG_INFINITY {
            continue;
        }
        for j in (i + 1)..=(i + max_chars).min(n) {
            let Some(&piece) = index.get(&text[bounds[i]..bounds[j]]) else {
                continue;
            };
            if piece as usize == skip {
                continue;
            }
            let cand = best[i] + log_probs[piece as usize];
            if cand > best[j] {
                best[j] = cand;
            }
        }
    }
    best[n]
}
