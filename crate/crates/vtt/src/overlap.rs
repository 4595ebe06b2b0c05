//! Shared pieces between two vocabularies, classified into four categories.

use serde::Serialize;

use crate::vocab::{Piece, PieceKind, Vocabulary, BOUNDARY};

/// Category of a shared piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceClass {
    ByteFallback,
    AlphaNum,
    Symbol,
    Other,
}

/// Per-class counts; the classes partition the shared pieces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub byte_fallback: usize,
    pub alpha_num: usize,
    pub symbol: usize,
    pub other: usize,
}

impl ClassCounts {
    pub fn bump(&mut self, class: PieceClass) {
        match class {
            PieceClass::ByteFallback => self.byte_fallback += 1,
            PieceClass::AlphaNum => self.alpha_num += 1,
            PieceClass::Symbol => self.symbol += 1,
            PieceClass::Other => self.other += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.byte_fallback + self.alpha_num + self.symbol + self.other
    }
}

/// Pieces present in both vocabularies: id pairs plus the class census.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    /// (id in original, id in new), ordered by the new id.
    pub shared: Vec<(u32, u32)>,
    pub counts: ClassCounts,
    pub total: usize,
}

/// Classify a piece:
/// byte-fallback pieces by kind; otherwise, after stripping one leading
/// boundary marker, all-ASCII-alphanumeric pieces are `AlphaNum`,
/// all-ASCII-punctuation pieces are `Symbol`, and everything else (including
/// non-ASCII characters) is `Other`.
pub fn classify_piece(piece: &Piece) -> PieceClass {
    if piece.kind == PieceKind::ByteFallback {
        return PieceClass::ByteFallback;
    }
    let stripped = piece.text.strip_prefix(BOUNDARY).unwrap_or(&piece.text);
    if stripped.is_empty() {
        return PieceClass::Other;
    }
    if stripped.chars().all(|c| c.is_ascii_alphanumeric()) {
        PieceClass::AlphaNum
    } else if stripped.chars().all(|c| c.is_ascii_punctuation()) {
        PieceClass::Symbol
    } else {
        PieceClass::Other
    }
}

/// Intersect two vocabularies. Normal and byte pieces match by exact text;
/// specials match by role, never by text. Classification is of the piece as
/// it appears in the new vocabulary.
pub fn overlap_report(v_orig: &Vocabulary, v_new: &Vocabulary) -> OverlapReport {
    let mut shared = Vec::new();
    let mut counts = ClassCounts::default();

    for (id_new, piece) in v_new.pieces().iter().enumerate() {
        let id_new = id_new as u32;
        let id_orig = match piece.kind {
            PieceKind::Special => crate::vocab::SpecialRole::from_text(&piece.text)
                .and_then(|role| v_orig.special_id(role)),
            _ => v_orig.id_of(&piece.text),
        };
        if let Some(id_orig) = id_orig {
            shared.push((id_orig, id_new));
            counts.bump(classify_piece(piece));
        }
    }

    OverlapReport {
        total: shared.len(),
        shared,
        counts,
    }
}
