//! Helpers shared by the integration suites: deterministic fixture
//! generators and a brute-force segmentation oracle that is independent of
//! the lattice implementation.

#![allow(dead_code)]

use vtt::rng::counter_u64;
use vtt::vocab::{parse_byte_piece, Piece, PieceKind, Vocabulary};

/// Deterministic synthetic corpus: a Zipf-distributed lexicon of random
/// lowercase words, 14 per line, at least `target_bytes` long. The same
/// `lexicon_seed` with a different `draw_seed` gives held-out text from the
/// same synthetic language.
pub fn synthetic_corpus(
    target_bytes: usize,
    lexicon_size: usize,
    lexicon_seed: u64,
    draw_seed: u64,
) -> String {
    let lexicon: Vec<String> = (0..lexicon_size)
        .map(|i| {
            let len = 2 + (counter_u64(lexicon_seed, i as u64 * 7 + 1) % 9) as usize;
            (0..len)
                .map(|k| {
                    (b'a'
                        + (counter_u64(lexicon_seed, i as u64 * 131 + k as u64 * 17 + 3) % 26)
                            as u8) as char
                })
                .collect()
        })
        .collect();

    // Zipf weights with exponent ~1.1, cumulative for inverse-CDF sampling.
    let mut cumulative = Vec::with_capacity(lexicon.len());
    let mut total = 0.0f64;
    for i in 0..lexicon.len() {
        total += 1.0 / ((i + 1) as f64).powf(1.1);
        cumulative.push(total);
    }

    let mut out = String::with_capacity(target_bytes + 128);
    let mut draw = 0u64;
    while out.len() < target_bytes {
        for w in 0..14 {
            let u = (counter_u64(draw_seed, draw) >> 11) as f64 / 9_007_199_254_740_992.0 * total;
            draw += 1;
            let idx = cumulative.partition_point(|&c| c < u);
            if w > 0 {
                out.push(' ');
            }
            out.push_str(&lexicon[idx.min(lexicon.len() - 1)]);
        }
        out.push('\n');
    }
    out
}

/// A random small vocabulary over the alphabet a–d: specials, byte pieces,
/// and `n_normals` distinct pieces with grid-quantized log probabilities
/// (so exact score ties actually happen and tie-breaking gets exercised).
pub fn random_vocab(n_normals: usize, seed: u64) -> Vocabulary {
    let mut pieces = Piece::specials();
    pieces.extend(Piece::byte_pieces((1e-4f64 / 256.0).ln()));
    let mut texts: Vec<String> = Vec::new();
    let mut i = 0u64;
    while texts.len() < n_normals {
        let r = counter_u64(seed, i);
        i += 1;
        let len = 1 + (r % 3) as usize;
        let marked = (r >> 8).is_multiple_of(3);
        let mut t = String::new();
        if marked {
            t.push('\u{2581}');
        }
        for k in 0..len {
            t.push((b'a' + ((r >> (16 + 2 * k)) % 4) as u8) as char);
        }
        if !texts.contains(&t) {
            texts.push(t);
        }
    }
    for (k, t) in texts.into_iter().enumerate() {
        // Quantized to halves: ties are common by construction.
        let lp = -0.5 * (1 + counter_u64(seed ^ 0xABCD, k as u64) % 8) as f64;
        pieces.push(Piece::normal(t, lp));
    }
    Vocabulary::from_pieces(pieces).unwrap()
}

/// Random text of at most `max_bytes` UTF-8 bytes over a–d, space, and the
/// occasional multi-byte character (which only byte fallback can cover).
pub fn random_text(max_bytes: usize, seed: u64) -> String {
    let mut out = String::new();
    let n = counter_u64(seed, 0) % (max_bytes as u64 + 1);
    let mut i = 0u64;
    while out.len() < n as usize {
        let r = counter_u64(seed, i + 1);
        i += 1;
        let c = match r % 12 {
            0..=7 => (b'a' + (r >> 8) as u8 % 4) as char,
            8 | 9 => ' ',
            10 => 'z',
            _ => '\u{65E5}',
        };
        if out.len() + c.len_utf8() <= max_bytes {
            out.push(c);
        } else {
            break;
        }
    }
    out
}

/// All segmentations of marker-space `text` under the same edge rule as the
/// lattice: any matching normal piece, plus the byte expansion of one char
/// when no single-character piece covers it. Returns (score, token count)
/// per segmentation, scores accumulated left to right like the DP does.
pub fn enumerate_segmentations(vocab: &Vocabulary, text: &str) -> Vec<(f64, u32)> {
    let chars: Vec<char> = text.chars().collect();
    let starts: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let mut results = Vec::new();
    recurse(vocab, text, &chars, &starts, 0, 0.0, 0, &mut results);
    results
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    vocab: &Vocabulary,
    text: &str,
    chars: &[char],
    starts: &[usize],
    pos: usize,
    score: f64,
    tokens: u32,
    results: &mut Vec<(f64, u32)>,
) {
    let n = chars.len();
    if pos == n {
        results.push((score, tokens));
        return;
    }
    let mut has_single = false;
    for end in (pos + 1)..=n {
        let slice = &text[starts[pos]..starts[end]];
        if let Some(id) = vocab.id_of(slice) {
            if vocab.piece(id).kind == PieceKind::Normal {
                if end == pos + 1 {
                    has_single = true;
                }
                recurse(
                    vocab,
                    text,
                    chars,
                    starts,
                    end,
                    score + vocab.piece(id).log_prob,
                    tokens + 1,
                    results,
                );
            }
        }
    }
    if !has_single && vocab.byte_fallback() {
        let mut buf = [0u8; 4];
        let encoded = chars[pos].encode_utf8(&mut buf);
        // The byte chain is a single lattice edge: its score is summed
        // locally and added to the prefix once, exactly like the DP.
        let mut chain = 0.0;
        for b in encoded.bytes() {
            let id = vocab.byte_id(b).unwrap();
            chain += vocab.piece(id).log_prob;
        }
        recurse(
            vocab,
            text,
            chars,
            starts,
            pos + 1,
            score + chain,
            tokens + encoded.len() as u32,
            results,
        );
    }
}

/// Best score over all segmentations (the Viterbi oracle).
pub fn oracle_best_score(vocab: &Vocabulary, marked: &str) -> Option<f64> {
    let all = enumerate_segmentations(vocab, marked);
    all.iter().map(|&(s, _)| s).reduce(f64::max)
}

/// Minimum token count, and the best score among minimum-count paths.
pub fn oracle_min_tokens(vocab: &Vocabulary, marked: &str) -> Option<(u32, f64)> {
    let all = enumerate_segmentations(vocab, marked);
    let min = all.iter().map(|&(_, t)| t).min()?;
    let best = all
        .iter()
        .filter(|&&(_, t)| t == min)
        .map(|&(s, _)| s)
        .reduce(f64::max)?;
    Some((min, best))
}

/// Minimal independent TSV reader used by oracles: returns
/// (text, log_prob, kind) triples in id order, bypassing the library parser.
pub fn raw_tsv_pieces(path: &str) -> Vec<(String, f64, String)> {
    let content = std::fs::read_to_string(path).unwrap();
    let mut lines = content.lines();
    let _header = lines.next().unwrap();
    lines
        .map(|l| {
            let mut f = l.split('\t');
            let text = f.next().unwrap().to_string();
            let lp: f64 = f.next().unwrap().parse().unwrap();
            let kind = f.next().unwrap().to_string();
            (text, lp, kind)
        })
        .collect()
}

/// Byte value of a byte piece text, for oracle-side decoding.
pub fn byte_value(text: &str) -> Option<u8> {
    parse_byte_piece(text)
}
