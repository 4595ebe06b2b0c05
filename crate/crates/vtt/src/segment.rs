//! Lattice segmentation over a vocabulary and corpus-level token statistics.
//!
//! Inputs are mapped to marker space before segmentation: a boundary marker
//! is prepended and every ASCII space becomes a marker, so `"aa bb"` is
//! segmented as `"▁aa▁bb"`. [`decode`] inverts the mapping exactly, which is
//! why the marker character itself is rejected in raw input.

use std::io::BufRead;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::vocab::{PieceKind, Vocabulary, BOUNDARY};

/// A segmentation: token ids plus the summed piece log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub score: f64,
}

impl TokenSeq {
    pub fn empty() -> Self {
        TokenSeq {
            ids: Vec::new(),
            score: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Which objective the lattice search optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Maximize the summed log probability; ties broken by fewer pieces,
    /// then by the longer piece at the earliest divergence point.
    Viterbi,
    /// Minimize the piece count; ties broken by higher score, then by the
    /// longer piece at the earliest divergence point.
    MinToken,
}

/// Best-likelihood segmentation of `text`.
pub fn viterbi_segment(vocab: &Vocabulary, text: &str) -> Result<TokenSeq> {
    segment(vocab, text, SegmentMode::Viterbi)
}

/// Fewest-pieces segmentation of `text`; among those, the best-scoring one.
pub fn min_token_segment(vocab: &Vocabulary, text: &str) -> Result<TokenSeq> {
    segment(vocab, text, SegmentMode::MinToken)
}

pub fn segment(vocab: &Vocabulary, text: &str, mode: SegmentMode) -> Result<TokenSeq> {
    if let Some(off) = text.chars().position(|c| c == BOUNDARY) {
        return Err(Error::Segmentation {
            char_offset: off,
            msg: "input contains the reserved boundary marker U+2581".into(),
        });
    }
    let marked = to_marker_space(text);
    segment_raw(vocab, &marked, mode)
}

/// Segment text that is already in marker space (no marker is prepended and
/// spaces are not rewritten). This is what piece texts live in, so it is the
/// right entry point for segmenting one vocabulary's pieces with another.
pub fn viterbi_segment_raw(vocab: &Vocabulary, marked_text: &str) -> Result<TokenSeq> {
    segment_raw(vocab, marked_text, SegmentMode::Viterbi)
}

pub fn min_token_segment_raw(vocab: &Vocabulary, marked_text: &str) -> Result<TokenSeq> {
    segment_raw(vocab, marked_text, SegmentMode::MinToken)
}

/// Map raw text to marker space: prepend the boundary marker and replace
/// every ASCII space with it. Empty input stays empty.
pub fn to_marker_space(text: &str) -> String {
    if text.is_empty() {
        return String::new();
    }
    let mut out = String::with_capacity(text.len() + BOUNDARY.len_utf8());
    out.push(BOUNDARY);
    for c in text.chars() {
        out.push(if c == ' ' { BOUNDARY } else { c });
    }
    out
}

/// Invert [`to_marker_space`]: drop one leading marker, map the rest to ' '.
pub fn from_marker_space(marked: &str) -> String {
    let stripped = marked.strip_prefix(BOUNDARY).unwrap_or(marked);
    stripped
        .chars()
        .map(|c| if c == BOUNDARY { ' ' } else { c })
        .collect()
}

/// Reconstruct the exact input of [`viterbi_segment`] / [`min_token_segment`]
/// from its token ids. Byte-fallback pieces are decoded back to raw bytes.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if id as usize >= vocab.size() {
            return Err(Error::Config(format!("token id {id} out of range")));
        }
        let piece = vocab.piece(id);
        match piece.kind {
            PieceKind::Normal => bytes.extend_from_slice(piece.text.as_bytes()),
            PieceKind::ByteFallback => {
                let b = crate::vocab::parse_byte_piece(&piece.text)
                    .expect("validated at vocabulary construction");
                bytes.push(b);
            }
            PieceKind::Special => {
                return Err(Error::Config(format!(
                    "token id {id} is a special piece and has no surface form"
                )))
            }
        }
    }
    let marked = String::from_utf8(bytes).map_err(|e| Error::Decode {
        offset: e.utf8_error().valid_up_to(),
    })?;
    Ok(from_marker_space(&marked))
}

#[derive(Clone, Copy)]
enum Via {
    Piece(u32),
    /// The char at `back` covered by its UTF-8 byte pieces.
    Bytes,
}

#[derive(Clone, Copy)]
struct Best {
    reached: bool,
    score: f64,
    tokens: u32,
    back: usize,
    via: Via,
}

impl Best {
    fn unreached() -> Self {
        Best {
            reached: false,
            score: f64::NEG_INFINITY,
            tokens: u32::MAX,
            back: usize::MAX,
            via: Via::Bytes,
        }
    }
}

fn segment_raw(vocab: &Vocabulary, text: &str, mode: SegmentMode) -> Result<TokenSeq> {
    if text.is_empty() {
        return Ok(TokenSeq::empty());
    }

    // Char-position index: starts[i] is the byte offset of char i.
    let mut starts: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    let n = starts.len();
    starts.push(text.len());
    let chars: Vec<char> = text.chars().collect();

    let max_len = vocab.max_piece_chars().max(1);
    let mut best: Vec<Best> = vec![Best::unreached(); n + 1];
    best[0] = Best {
        reached: true,
        score: 0.0,
        tokens: 0,
        back: 0,
        via: Via::Bytes,
    };

    for i in 0..n {
        if !best[i].reached {
            continue;
        }
        let mut has_single = false;
        let mut has_edge = false;
        for j in (i + 1)..=(i + max_len).min(n) {
            let slice = &text[starts[i]..starts[j]];
            let Some(id) = vocab.id_of(slice) else {
                continue;
            };
            if vocab.piece(id).kind != PieceKind::Normal {
                continue;
            }
            has_edge = true;
            if j == i + 1 {
                has_single = true;
            }
            let score = vocab.piece(id).log_prob;
            relax(&mut best, mode, i, j, score, 1, Via::Piece(id));
        }
        // Byte fallback only steps in when the char has no covering piece.
        if !has_single && vocab.byte_fallback() {
            has_edge = true;
            let mut buf = [0u8; 4];
            let encoded = chars[i].encode_utf8(&mut buf);
            let mut score = 0.0;
            for b in encoded.bytes() {
                let id = vocab.byte_id(b).expect("byte fallback enabled");
                score += vocab.piece(id).log_prob;
            }
            relax(
                &mut best,
                mode,
                i,
                i + 1,
                score,
                encoded.len() as u32,
                Via::Bytes,
            );
        }
        if !has_edge {
            return Err(Error::Segmentation {
                char_offset: i,
                msg: format!(
                    "no piece covers {:?} and byte fallback is disabled",
                    chars[i]
                ),
            });
        }
    }

    // Every reachable position either errored above or has an outgoing
    // edge, and edges mark their targets reachable, so the end is reached.
    assert!(best[n].reached);

    // Walk back, expanding byte-chain edges into their byte piece ids.
    let mut ids = Vec::with_capacity(best[n].tokens as usize);
    let mut pos = n;
    while pos > 0 {
        let node = best[pos];
        match node.via {
            Via::Piece(id) => ids.push(id),
            Via::Bytes => {
                let mut buf = [0u8; 4];
                let encoded = chars[node.back].encode_utf8(&mut buf);
                for b in encoded.bytes().rev() {
                    ids.push(vocab.byte_id(b).expect("byte fallback enabled"));
                }
            }
        }
        pos = node.back;
    }
    ids.reverse();
    Ok(TokenSeq {
        ids,
        score: best[n].score,
    })
}

fn relax(
    best: &mut [Best],
    mode: SegmentMode,
    from: usize,
    to: usize,
    edge_score: f64,
    edge_tokens: u32,
    via: Via,
) {
    let cand_score = best[from].score + edge_score;
    let cand_tokens = best[from].tokens + edge_tokens;
    let cur = best[to];

    let better = if !cur.reached {
        true
    } else {
        let primary = match mode {
            SegmentMode::Viterbi => {
                if cand_score != cur.score {
                    Some(cand_score > cur.score)
                } else if cand_tokens != cur.tokens {
                    Some(cand_tokens < cur.tokens)
                } else {
                    None
                }
            }
            SegmentMode::MinToken => {
                if cand_tokens != cur.tokens {
                    Some(cand_tokens < cur.tokens)
                } else if cand_score != cur.score {
                    Some(cand_score > cur.score)
                } else {
                    None
                }
            }
        };
        match primary {
            Some(b) => b,
            // Exact tie: prefer the longer piece at the earliest divergence.
            None => {
                let mut cand_lens = path_char_lengths(best, from);
                cand_lens.push((to - from) as u32);
                let cur_lens = path_char_lengths(best, to);
                lex_prefers_candidate(&cand_lens, &cur_lens)
            }
        }
    };

    if better {
        best[to] = Best {
            reached: true,
            score: cand_score,
            tokens: cand_tokens,
            back: from,
            via,
        };
    }
}

/// Char lengths of the current best path's edges ending at `pos`, in
/// left-to-right order. Byte-chain edges count as one char.
fn path_char_lengths(best: &[Best], mut pos: usize) -> Vec<u32> {
    let mut lens = Vec::new();
    while pos > 0 {
        let back = best[pos].back;
        lens.push((pos - back) as u32);
        pos = back;
    }
    lens.reverse();
    lens
}

fn lex_prefers_candidate(cand: &[u32], cur: &[u32]) -> bool {
    for (a, b) in cand.iter().zip(cur.iter()) {
        if a != b {
            return a > b;
        }
    }
    false
}

/// Corpus-level counts over line-segmented text.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TokenStats {
    pub total_tokens: u64,
    pub total_words: u64,
    pub total_bytes: u64,
    pub total_chars: u64,
    pub total_lines: u64,
}

impl TokenStats {
    /// Average tokens per whitespace-delimited word.
    pub fn fertility(&self) -> f64 {
        if self.total_words == 0 {
            0.0
        } else {
            self.total_tokens as f64 / self.total_words as f64
        }
    }

    pub fn bytes_per_token(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.total_bytes as f64 / self.total_tokens as f64
        }
    }
}

impl Add for TokenStats {
    type Output = TokenStats;
    fn add(self, rhs: TokenStats) -> TokenStats {
        TokenStats {
            total_tokens: self.total_tokens + rhs.total_tokens,
            total_words: self.total_words + rhs.total_words,
            total_bytes: self.total_bytes + rhs.total_bytes,
            total_chars: self.total_chars + rhs.total_chars,
            total_lines: self.total_lines + rhs.total_lines,
        }
    }
}

impl AddAssign for TokenStats {
    fn add_assign(&mut self, rhs: TokenStats) {
        *self = *self + rhs;
    }
}

/// Stats for one line of text. Specials are never counted: the lattice never
/// emits them.
pub fn line_stats(vocab: &Vocabulary, line: &str, mode: SegmentMode) -> Result<TokenStats> {
    let seq = segment(vocab, line, mode)?;
    Ok(TokenStats {
        total_tokens: seq.len() as u64,
        total_words: line.split_whitespace().count() as u64,
        total_bytes: line.len() as u64,
        total_chars: line.chars().count() as u64,
        total_lines: 1,
    })
}

/// Aggregate [`line_stats`] over a reader, splitting on `\n`. Lines are
/// processed in parallel batches; counts are integers, so the reduction is
/// exact and independent of worker count. Memory use is bounded by the batch
/// size, not the corpus.
pub fn corpus_stats(
    vocab: &Vocabulary,
    reader: impl BufRead,
    mode: SegmentMode,
) -> Result<TokenStats> {
    const BATCH: usize = 2048;
    let mut total = TokenStats::default();
    let mut batch: Vec<String> = Vec::with_capacity(BATCH);
    let mut first_line = 1usize;

    let mut lines = reader.lines();
    loop {
        batch.clear();
        while batch.len() < BATCH {
            match lines.next() {
                Some(line) => batch.push(line?),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        let results: Vec<Result<TokenStats>> = batch
            .par_iter()
            .map(|line| line_stats(vocab, line, mode))
            .collect();
        for (i, res) in results.into_iter().enumerate() {
            total += res.map_err(|e| e.at_line(first_line + i))?;
        }
        first_line += batch.len();
    }
    Ok(total)
}
