//! Subword vocabularies: pieces, special tokens, byte fallback, TSV storage.

mod trainer;

pub use trainer::{
    seed_candidates, train_unigram, train_unigram_outcome, RoundStats, TrainOutcome, TrainerConfig,
};

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word-boundary marker prefixed to word-initial pieces (U+2581).
pub const BOUNDARY: char = '\u{2581}';

/// What a piece is: a learned subword, one of the 256 byte-fallback pieces,
/// or a control token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceKind {
    Normal,
    ByteFallback,
    Special,
}

/// The four control-token roles. Specials are matched across vocabularies by
/// role, never by surface text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialRole {
    Unk,
    Bos,
    Eos,
    Pad,
}

impl SpecialRole {
    pub const ALL: [SpecialRole; 4] = [
        SpecialRole::Unk,
        SpecialRole::Bos,
        SpecialRole::Eos,
        SpecialRole::Pad,
    ];

    pub fn text(self) -> &'static str {
        match self {
            SpecialRole::Unk => "<unk>",
            SpecialRole::Bos => "<s>",
            SpecialRole::Eos => "</s>",
            SpecialRole::Pad => "<pad>",
        }
    }

    pub fn from_text(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.text() == text)
    }
}

impl fmt::Display for SpecialRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

/// One vocabulary entry: surface text, natural-log probability, kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub text: String,
    pub log_prob: f64,
    pub kind: PieceKind,
}

impl Piece {
    pub fn normal(text: impl Into<String>, log_prob: f64) -> Self {
        Piece {
            text: text.into(),
            log_prob,
            kind: PieceKind::Normal,
        }
    }

    /// The byte-fallback piece for byte value `b`, e.g. `<0x2E>`.
    pub fn byte(b: u8, log_prob: f64) -> Self {
        Piece {
            text: byte_piece_text(b),
            log_prob,
            kind: PieceKind::ByteFallback,
        }
    }

    pub fn special(role: SpecialRole) -> Self {
        Piece {
            text: role.text().to_string(),
            log_prob: 0.0,
            kind: PieceKind::Special,
        }
    }

    /// The four standard specials in id order (unk, bos, eos, pad).
    pub fn specials() -> Vec<Piece> {
        SpecialRole::ALL.into_iter().map(Piece::special).collect()
    }

    /// All 256 byte-fallback pieces, each with the given log probability.
    pub fn byte_pieces(log_prob: f64) -> Vec<Piece> {
        (0u16..256)
            .map(|b| Piece::byte(b as u8, log_prob))
            .collect()
    }

    /// Piece length in characters, not counting a leading boundary marker.
    pub fn content_chars(&self) -> usize {
        let n = self.text.chars().count();
        if self.text.starts_with(BOUNDARY) {
            n - 1
        } else {
            n
        }
    }
}

pub fn byte_piece_text(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Parse `<0xNN>` (two uppercase hex digits) back to its byte value.
pub fn parse_byte_piece(text: &str) -> Option<u8> {
    let rest = text.strip_prefix("<0x")?.strip_suffix('>')?;
    if rest.len() != 2
        || !rest
            .bytes()
            .all(|c| c.is_ascii_digit() || (b'A'..=b'F').contains(&c))
    {
        return None;
    }
    u8::from_str_radix(rest, 16).ok()
}

/// An immutable subword vocabulary. Token id = index into the piece list.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<Piece>,
    /// Normal and byte pieces only; specials never match by text.
    ids: HashMap<String, u32>,
    specials: Vec<(SpecialRole, u32)>,
    byte_ids: Option<Box<[u32; 256]>>,
    max_piece_chars: usize,
}

impl Vocabulary {
    /// Build a vocabulary from pieces, validating the structural invariants:
    /// unique texts, well-formed byte pieces (all 256 or none), known special
    /// texts, non-positive log probabilities for non-specials.
    pub fn from_pieces(pieces: Vec<Piece>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(pieces.len());
        let mut seen = HashMap::with_capacity(pieces.len());
        let mut specials: Vec<(SpecialRole, u32)> = Vec::new();
        let mut byte_ids = Box::new([u32::MAX; 256]);
        let mut byte_count = 0usize;
        let mut max_piece_chars = 0usize;

        for (id, piece) in pieces.iter().enumerate() {
            let id = id as u32;
            if piece.text.is_empty() {
                return Err(Error::Config(format!("piece {id} has empty text")));
            }
            // The TSV storage format cannot represent these.
            if piece.text.contains(['\t', '\n', '\r']) {
                return Err(Error::Config(format!(
                    "piece {id} contains a tab or line break: {:?}",
                    piece.text
                )));
            }
            if let Some(prev) = seen.insert(piece.text.clone(), id) {
                return Err(Error::Config(format!(
                    "duplicate piece text {:?} (ids {prev} and {id})",
                    piece.text
                )));
            }
            match piece.kind {
                PieceKind::Special => {
                    let role = SpecialRole::from_text(&piece.text).ok_or_else(|| {
                        Error::Config(format!("unknown special piece text {:?}", piece.text))
                    })?;
                    specials.push((role, id));
                }
                PieceKind::ByteFallback => {
                    let b = parse_byte_piece(&piece.text).ok_or_else(|| {
                        Error::Config(format!(
                            "byte piece {:?} is not of the form <0xNN>",
                            piece.text
                        ))
                    })?;
                    if piece.log_prob.is_nan() || piece.log_prob > 0.0 {
                        return Err(Error::Config(format!(
                            "piece {:?} has invalid log_prob {}",
                            piece.text, piece.log_prob
                        )));
                    }
                    byte_ids[b as usize] = id;
                    byte_count += 1;
                    ids.insert(piece.text.clone(), id);
                }
                PieceKind::Normal => {
                    if piece.log_prob.is_nan() || piece.log_prob > 0.0 {
                        return Err(Error::Config(format!(
                            "piece {:?} has invalid log_prob {}",
                            piece.text, piece.log_prob
                        )));
                    }
                    ids.insert(piece.text.clone(), id);
                    // Only normal pieces take part in lattice matching.
                    max_piece_chars = max_piece_chars.max(piece.text.chars().count());
                }
            }
        }

        specials.sort();
        let byte_fallback = match byte_count {
            0 => false,
            256 => true,
            n => {
                return Err(Error::Config(format!(
                    "vocabulary has {n} byte-fallback pieces; expected 0 or 256"
                )))
            }
        };

        Ok(Vocabulary {
            pieces,
            ids,
            specials,
            byte_ids: byte_fallback.then_some(byte_ids),
            max_piece_chars,
        })
    }

    pub fn size(&self) -> usize {
        self.pieces.len()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> &Piece {
        &self.pieces[id as usize]
    }

    /// Id of the normal or byte piece with this exact text. Specials are
    /// intentionally not found here.
    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.ids.get(text).copied()
    }

    pub fn special_id(&self, role: SpecialRole) -> Option<u32> {
        self.specials
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, id)| *id)
    }

    pub fn specials(&self) -> &[(SpecialRole, u32)] {
        &self.specials
    }

    pub fn byte_fallback(&self) -> bool {
        self.byte_ids.is_some()
    }

    /// Id of the byte-fallback piece for byte `b`, when byte fallback is on.
    pub fn byte_id(&self, b: u8) -> Option<u32> {
        self.byte_ids.as_ref().map(|m| m[b as usize])
    }

    /// Longest piece text in characters; bounds lattice edge lengths.
    pub fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Serialize to the TSV wire format (see [`save_vocab`]).
    pub fn to_tsv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let flag = if self.byte_fallback() { 1 } else { 0 };
        out.extend_from_slice(
            format!("#vtt-vocab v1 size={} byte_fallback={flag}\n", self.size()).as_bytes(),
        );
        for piece in &self.pieces {
            let kind = match piece.kind {
                PieceKind::Normal => "normal",
                PieceKind::ByteFallback => "byte",
                PieceKind::Special => "special",
            };
            out.extend_from_slice(
                format!("{}\t{:.16e}\t{kind}\n", piece.text, piece.log_prob).as_bytes(),
            );
        }
        out
    }
}

/// Write a vocabulary to `path` in the TSV format:
///
/// ```text
/// #vtt-vocab v1 size=<N> byte_fallback=<0|1>
/// <piece-text>\t<log_prob>\t<kind>
/// ```
///
/// One piece per line in id order; log probabilities are written with 17
/// significant decimal digits so that reloading reproduces the exact f64.
pub fn save_vocab(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&vocab.to_tsv_bytes())?;
    w.flush()?;
    Ok(())
}

/// Load a vocabulary saved by [`save_vocab`]. Errors carry 1-based physical
/// line numbers (the header is line 1).
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).at_path(path))?;
    parse_vocab(BufReader::new(file)).map_err(|e| e.at_path(path))
}

/// Parse the TSV format from any reader. See [`load_vocab`].
pub fn parse_vocab(reader: impl Read) -> Result<Vocabulary> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::VocabParse {
                line: 1,
                msg: "empty file, expected header".into(),
            })
        }
    };
    let (size, byte_fallback) = parse_header(&header)?;

    let mut pieces = Vec::with_capacity(size);
    let mut seen: HashMap<String, usize> = HashMap::with_capacity(size);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let mut fields = line.splitn(3, '\t');
        let (text, lp, kind) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(l), Some(k)) => (t, l, k),
            _ => {
                return Err(Error::VocabParse {
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, got {:?}", line),
                })
            }
        };
        if let Some(first) = seen.insert(text.to_string(), line_no) {
            let _ = first;
            return Err(Error::VocabParse {
                line: line_no,
                msg: format!("duplicate piece text {text:?}"),
            });
        }
        let log_prob: f64 = lp.parse().map_err(|_| Error::VocabParse {
            line: line_no,
            msg: format!("invalid log_prob {lp:?}"),
        })?;
        let kind = match kind {
            "normal" => PieceKind::Normal,
            "byte" => PieceKind::ByteFallback,
            "special" => PieceKind::Special,
            other => {
                return Err(Error::VocabParse {
                    line: line_no,
                    msg: format!("unknown piece kind {other:?}"),
                })
            }
        };
        pieces.push(Piece {
            text: text.to_string(),
            log_prob,
            kind,
        });
    }

    if pieces.len() != size {
        return Err(Error::VocabParse {
            line: pieces.len() + 1,
            msg: format!("header declares {size} pieces, file has {}", pieces.len()),
        });
    }
    let vocab = Vocabulary::from_pieces(pieces).map_err(|e| match e {
        Error::Config(msg) => Error::VocabParse { line: 1, msg },
        other => other,
    })?;
    if vocab.byte_fallback() != byte_fallback {
        return Err(Error::VocabParse {
            line: 1,
            msg: format!(
                "header declares byte_fallback={}, pieces imply {}",
                byte_fallback as u8,
                vocab.byte_fallback() as u8
            ),
        });
    }
    Ok(vocab)
}

fn parse_header(header: &str) -> Result<(usize, bool)> {
    let bad = |msg: String| Error::VocabParse { line: 1, msg };
    let rest = header
        .strip_prefix("#vtt-vocab v1 ")
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let mut size = None;
    let mut byte_fallback = None;
    for field in rest.split_ascii_whitespace() {
        if let Some(v) = field.strip_prefix("size=") {
            size = Some(
                v.parse::<usize>()
                    .map_err(|_| bad(format!("bad size {v:?}")))?,
            );
        } else if let Some(v) = field.strip_prefix("byte_fallback=") {
            byte_fallback = Some(match v {
                "0" => false,
                "1" => true,
                _ => return Err(bad(format!("bad byte_fallback {v:?}"))),
            });
        } else {
            return Err(bad(format!("unknown header field {field:?}")));
        }
    }
    match (size, byte_fallback) {
        (Some(s), Some(b)) => Ok((s, b)),
        _ => Err(bad("header missing size= or byte_fallback=".into())),
    }
}
