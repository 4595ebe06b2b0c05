//! Construct vocabulary-dependent parameter matrices for a new vocabulary
//! from pre-trained ones.
//!
//! The central operation is `swap`: project the pre-trained embedding matrix
//! through a random Gaussian matrix, scaled by `1/sqrt(|V_orig|)` so the
//! entry variance is preserved. `insert` then overwrites rows whose pieces
//! exist in both vocabularies with their pre-trained rows, bit for bit.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::overlap::{overlap_report, OverlapReport};
use crate::rng::{counter_normal, derive_seed};
use crate::segment::viterbi_segment_raw;
use crate::tensor::TensorF32;
use crate::tensorio::Checkpoint;
use crate::vocab::Vocabulary;

/// Initialization strategies for the new vocabulary's matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Swap,
    SwapInsert,
    MeanInit,
    Expand,
    FactorizedExpand,
}

/// How `mean_init` fills rows for pieces absent from the original
/// vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Mean of the pre-trained rows of the piece's segmentation under the
    /// original vocabulary; falls back to the global mean when the piece
    /// cannot be segmented.
    Decompose,
    /// Column-wise mean of the whole pre-trained matrix.
    Global,
}

/// Accounting for one transplant: which rows were copied, which were
/// initialized, and from which random stream.
#[derive(Debug, Clone, Serialize)]
pub struct TransplantReport {
    pub strategy: Strategy,
    pub seed: u64,
    /// Rows copied bit-exactly from the pre-trained matrix.
    pub inserted: usize,
    /// Rows filled by the strategy's initializer.
    pub randomized: usize,
    /// Rows where decompose-mode mean_init fell back to the global mean.
    pub mean_fallbacks: usize,
    pub matrices: Vec<String>,
    pub overlap: OverlapReport,
}

/// A matrix with i.i.d. standard-normal entries. Entry (i, j) depends only
/// on `(seed, i*cols + j)` — see [`crate::rng`] for the construction — so
/// generation parallelizes over rows without changing a single bit.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> TensorF32 {
    scaled_gaussian(rows, cols, seed, 1.0, "randn")
}

fn scaled_gaussian(rows: usize, cols: usize, seed: u64, std: f64, name: &str) -> TensorF32 {
    let mut data = vec![0.0f32; rows * cols];
    data.par_chunks_mut(cols.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let base = (i * cols) as u64;
            for (j, v) in row.iter_mut().enumerate() {
                *v = (counter_normal(seed, base + j as u64) * std) as f32;
            }
        });
    TensorF32::new(name, rows, cols, data).expect("gaussian entries are finite")
}

/// Options for [`swap`]-based strategies.
#[derive(Debug, Clone, Copy, Default)]
pub struct SwapOptions {
    /// Subtract the column means of the pre-trained matrix before the
    /// projection and add them back afterwards. Off by default: the plain
    /// projection assumes zero-mean embeddings.
    pub center: bool,
}

/// Project the pre-trained embedding onto a new vocabulary:
/// `E_new = W · E_orig / sqrt(|V_orig|)` with `W` standard normal of shape
/// `(v_new_size, |V_orig|)`. Dot products accumulate in f64 and are rounded
/// to f32 once at the end.
pub fn swap(e_orig: &TensorF32, v_new_size: usize, seed: u64) -> Result<TensorF32> {
    swap_with_options(e_orig, v_new_size, seed, SwapOptions::default())
}

pub fn swap_with_options(
    e_orig: &TensorF32,
    v_new_size: usize,
    seed: u64,
    opts: SwapOptions,
) -> Result<TensorF32> {
    let n = e_orig.rows();
    let d = e_orig.cols();
    if n == 0 {
        return Err(Error::Dimension(format!(
            "swap source {:?} has zero rows",
            e_orig.name()
        )));
    }
    let scale = 1.0 / (n as f64).sqrt();

    let mut col_means = vec![0.0f64; d];
    if opts.center {
        for row in 0..n {
            for (m, &v) in col_means.iter_mut().zip(e_orig.row(row)) {
                *m += v as f64;
            }
        }
        col_means.iter_mut().for_each(|m| *m /= n as f64);
    }

    let mut data = vec![0.0f32; v_new_size * d];
    data.par_chunks_mut(d.max(1))
        .enumerate()
        .for_each(|(i, out_row)| {
            let mut acc = vec![0.0f64; d];
            let base = (i * n) as u64;
            for j in 0..n {
                // Exactly the f32 entry gaussian_matrix would produce.
                let w = counter_normal(seed, base + j as u64) as f32 as f64;
                let src = e_orig.row(j);
                if opts.center {
                    for k in 0..d {
                        acc[k] += w * (src[k] as f64 - col_means[k]);
                    }
                } else {
                    for k in 0..d {
                        acc[k] += w * src[k] as f64;
                    }
                }
            }
            for k in 0..d {
                let mut v = acc[k] * scale;
                if opts.center {
                    v += col_means[k];
                }
                out_row[k] = v as f32;
            }
        });

    TensorF32::new(e_orig.name(), v_new_size, d, data)
}

/// Overwrite rows of `e_new` with the pre-trained rows of `e_orig` for every
/// piece present in both vocabularies (normal and byte pieces by exact text,
/// specials by role). Copied rows are bit-exact; all others are untouched.
pub fn insert(
    e_new: &TensorF32,
    e_orig: &TensorF32,
    v_orig: &Vocabulary,
    v_new: &Vocabulary,
) -> Result<(TensorF32, OverlapReport)> {
    if e_new.cols() != e_orig.cols() {
        return Err(Error::Dimension(format!(
            "column mismatch: {:?} has {} columns, {:?} has {}",
            e_new.name(),
            e_new.cols(),
            e_orig.name(),
            e_orig.cols()
        )));
    }
    check_rows(e_orig, v_orig.size())?;
    check_rows(e_new, v_new.size())?;

    let report = overlap_report(v_orig, v_new);
    let mut out = e_new.clone();
    for &(id_orig, id_new) in &report.shared {
        out.row_mut(id_new as usize)
            .copy_from_slice(e_orig.row(id_orig as usize));
    }
    Ok((out, report))
}

fn check_rows(t: &TensorF32, expect: usize) -> Result<()> {
    if t.rows() != expect {
        return Err(Error::Dimension(format!(
            "{:?} has {} rows, vocabulary has {expect} pieces",
            t.name(),
            t.rows()
        )));
    }
    Ok(())
}

/// `insert(swap(e_orig), ...)`: random rows for novel pieces, pre-trained
/// rows for shared ones.
pub fn swap_and_insert(
    e_orig: &TensorF32,
    v_orig: &Vocabulary,
    v_new: &Vocabulary,
    seed: u64,
) -> Result<(TensorF32, TransplantReport)> {
    swap_and_insert_with_options(e_orig, v_orig, v_new, seed, SwapOptions::default())
}

pub fn swap_and_insert_with_options(
    e_orig: &TensorF32,
    v_orig: &Vocabulary,
    v_new: &Vocabulary,
    seed: u64,
    opts: SwapOptions,
) -> Result<(TensorF32, TransplantReport)> {
    check_rows(e_orig, v_orig.size())?;
    let swapped = swap_with_options(e_orig, v_new.size(), seed, opts)?;
    let (out, overlap) = insert(&swapped, e_orig, v_orig, v_new)?;
    let report = TransplantReport {
        strategy: Strategy::SwapInsert,
        seed,
        inserted: overlap.total,
        randomized: v_new.size() - overlap.total,
        mean_fallbacks: 0,
        matrices: vec![out.name().to_string()],
        overlap,
    };
    Ok((out, report))
}

/// The mean-of-pre-trained-embeddings baseline: shared pieces keep their
/// pre-trained rows; novel pieces get the mean of their decomposition under
/// the original vocabulary (or the global mean).
pub fn mean_init(
    e_orig: &TensorF32,
    v_orig: &Vocabulary,
    v_new: &Vocabulary,
    mode: MeanMode,
) -> Result<(TensorF32, TransplantReport)> {
    check_rows(e_orig, v_orig.size())?;
    let d = e_orig.cols();
    let n = e_orig.rows();

    let mut global = vec![0.0f64; d];
    for row in 0..n {
        for (g, &v) in global.iter_mut().zip(e_orig.row(row)) {
            *g += v as f64;
        }
    }
    let global: Vec<f32> = global.iter().map(|g| (*g / n as f64) as f32).collect();

    let report = overlap_report(v_orig, v_new);
    let shared_new: std::collections::HashSet<u32> =
        report.shared.iter().map(|&(_, id_new)| id_new).collect();

    let mut out = TensorF32::zeros(e_orig.name(), v_new.size(), d);
    let mut fallbacks = 0usize;
    for (id_new, piece) in v_new.pieces().iter().enumerate() {
        if shared_new.contains(&(id_new as u32)) {
            continue; // filled from the shared list below
        }
        let row = out.row_mut(id_new);
        match mode {
            MeanMode::Global => row.copy_from_slice(&global),
            MeanMode::Decompose => match viterbi_segment_raw(v_orig, &piece.text) {
                Ok(seq) if !seq.is_empty() => {
                    let mut acc = vec![0.0f64; d];
                    for &id in &seq.ids {
                        for (a, &v) in acc.iter_mut().zip(e_orig.row(id as usize)) {
                            *a += v as f64;
                        }
                    }
                    let count = seq.len() as f64;
                    for (r, a) in row.iter_mut().zip(&acc) {
                        *r = (*a / count) as f32;
                    }
                }
                _ => {
                    row.copy_from_slice(&global);
                    fallbacks += 1;
                }
            },
        }
    }
    for &(id_orig, id_new) in &report.shared {
        out.row_mut(id_new as usize)
            .copy_from_slice(e_orig.row(id_orig as usize));
    }

    let transplant = TransplantReport {
        strategy: Strategy::MeanInit,
        seed: 0,
        inserted: report.total,
        randomized: v_new.size() - report.total,
        mean_fallbacks: fallbacks,
        matrices: vec![out.name().to_string()],
        overlap: report,
    };
    Ok((out, transplant))
}

/// Which initializer [`expand_vocab`] uses for the appended rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandInit {
    SwapInsert,
    Mean,
}

/// Vocabulary expansion: keep the whole original vocabulary (ids preserved,
/// rows bit-exact) and append the pieces of `v_new` it does not contain.
pub fn expand_vocab(
    v_orig: &Vocabulary,
    v_new: &Vocabulary,
    e_orig: &TensorF32,
    init: ExpandInit,
    seed: u64,
) -> Result<(Vocabulary, TensorF32, TransplantReport)> {
    check_rows(e_orig, v_orig.size())?;
    let overlap = overlap_report(v_orig, v_new);
    let shared_new: std::collections::HashSet<u32> =
        overlap.shared.iter().map(|&(_, id_new)| id_new).collect();

    let mut pieces = v_orig.pieces().to_vec();
    for (id_new, piece) in v_new.pieces().iter().enumerate() {
        if !shared_new.contains(&(id_new as u32)) {
            pieces.push(piece.clone());
        }
    }
    let expanded = Vocabulary::from_pieces(pieces)?;

    let (matrix, inner) = match init {
        ExpandInit::SwapInsert => {
            let (m, r) = swap_and_insert(e_orig, v_orig, &expanded, seed)?;
            (m, r)
        }
        ExpandInit::Mean => {
            let (m, r) = mean_init(e_orig, v_orig, &expanded, MeanMode::Decompose)?;
            (m, r)
        }
    };
    debug_assert_eq!(inner.inserted, v_orig.size());

    let report = TransplantReport {
        strategy: Strategy::Expand,
        seed,
        inserted: v_orig.size(),
        randomized: expanded.size() - v_orig.size(),
        mean_fallbacks: inner.mean_fallbacks,
        matrices: inner.matrices,
        overlap,
    };
    Ok((expanded, matrix, report))
}

/// Factorized embedding for a widened embedding dimension `d_e`:
/// `E` of shape `(vocab_size, d_e)` and a shared projection `W` of shape
/// `(d_e, d)`, both with i.i.d. `N(0, 1/d_e)` entries, initialized fresh.
/// The effective embedding is the product `E · W`.
pub fn factorized_expand(
    vocab_size: usize,
    d_e: usize,
    d: usize,
    seed: u64,
) -> Result<(TensorF32, TensorF32)> {
    if d_e < d || d == 0 {
        return Err(Error::Config(format!(
            "factorized expansion requires d_e >= d >= 1, got d_e={d_e}, d={d}"
        )));
    }
    let std = 1.0 / (d_e as f64).sqrt();
    let e = scaled_gaussian(vocab_size, d_e, seed, std, "embed");
    // Distinct stream for the projection factor; `seed + 1` is reserved for
    // the output layer.
    let w = scaled_gaussian(d_e, d, derive_seed(seed, FACTOR_TAG), std, "proj");
    Ok((e, w))
}

const FACTOR_TAG: u64 = 0x666163746f72; // "factor"

/// Parameter accounting for a GPT-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub internal: u64,
    pub vocab: u64,
    pub total: u64,
}

/// `internal = layers * 12 * d^2`; `vocab = vocab_size * d` (times two when
/// embedding and output are untied), or `vocab_size * d_e + d_e * d` with a
/// factorized embedding of width `d_e`.
pub fn count_params(
    layers: u64,
    d: u64,
    vocab_size: u64,
    d_e: Option<u64>,
    tied: bool,
) -> ParamBreakdown {
    let internal = layers * 12 * d * d;
    let per_side = match d_e {
        Some(de) => vocab_size * de + de * d,
        None => vocab_size * d,
    };
    let vocab = per_side * if tied { 1 } else { 2 };
    ParamBreakdown {
        internal,
        vocab,
        total: internal + vocab,
    }
}

/// Round a parameter count the way the accounting tables display it:
/// to the nearest 10M at or above 100M, else to the nearest 1M.
pub fn display_millions(n: u64) -> String {
    let m = n as f64 / 1e6;
    if n >= 100_000_000 {
        format!("{}M", (m / 10.0).round() as u64 * 10)
    } else {
        format!("{}M", m.round() as u64)
    }
}

/// Options for [`transplant_checkpoint`].
#[derive(Debug, Clone, Copy)]
pub struct TransplantOptions {
    pub mean_mode: MeanMode,
    pub swap: SwapOptions,
    /// Use the same random stream for the embedding and the output matrix
    /// instead of `seed` and `seed + 1`.
    pub shared_seed: bool,
    /// Embedding width for [`Strategy::FactorizedExpand`].
    pub d_e: Option<usize>,
    pub expand_init: ExpandInit,
}

impl Default for TransplantOptions {
    fn default() -> Self {
        TransplantOptions {
            mean_mode: MeanMode::Decompose,
            swap: SwapOptions::default(),
            shared_seed: false,
            d_e: None,
            expand_init: ExpandInit::SwapInsert,
        }
    }
}

/// Everything a checkpoint-level transplant produces.
#[derive(Debug, Clone)]
pub struct TransplantOutcome {
    pub checkpoint: Checkpoint,
    pub report: TransplantReport,
    /// Present for [`Strategy::Expand`]: the vocabulary the new matrices
    /// are indexed by.
    pub expanded_vocab: Option<Vocabulary>,
}

/// Apply a strategy to the `embed` and `output` matrices of a checkpoint.
/// The two matrices use independent random streams (`seed` and `seed + 1`)
/// unless `shared_seed` is set; every other tensor and all metadata are
/// copied bit-exactly.
pub fn transplant_checkpoint(
    ckpt: &Checkpoint,
    v_orig: &Vocabulary,
    v_new: &Vocabulary,
    strategy: Strategy,
    seed: u64,
    opts: TransplantOptions,
) -> Result<TransplantOutcome> {
    let embed = require_vocab_tensor(ckpt, "embed", v_orig)?;
    let output = require_vocab_tensor(ckpt, "output", v_orig)?;
    if embed.cols() != output.cols() {
        return Err(Error::Validation {
            tensor: "output".into(),
            msg: format!(
                "column mismatch with embed: {} vs {}",
                output.cols(),
                embed.cols()
            ),
        });
    }

    let seeds = [
        seed,
        if opts.shared_seed {
            seed
        } else {
            seed.wrapping_add(1)
        },
    ];
    let mut expanded_vocab = None;
    let mut report: Option<TransplantReport> = None;
    let mut new_tensors: Vec<(String, Vec<TensorF32>)> = Vec::new();

    for (tensor, s) in [(embed, seeds[0]), (output, seeds[1])] {
        let name = tensor.name().to_string();
        let produced: Vec<TensorF32> = match strategy {
            Strategy::Swap => {
                let m = swap_with_options(tensor, v_new.size(), s, opts.swap)?;
                let overlap = overlap_report(v_orig, v_new);
                report.get_or_insert(TransplantReport {
                    strategy,
                    seed,
                    inserted: 0,
                    randomized: v_new.size(),
                    mean_fallbacks: 0,
                    matrices: Vec::new(),
                    overlap,
                });
                vec![m]
            }
            Strategy::SwapInsert => {
                let (m, r) = swap_and_insert_with_options(tensor, v_orig, v_new, s, opts.swap)?;
                report.get_or_insert(TransplantReport { seed, ..r });
                vec![m]
            }
            Strategy::MeanInit => {
                let (m, r) = mean_init(tensor, v_orig, v_new, opts.mean_mode)?;
                report.get_or_insert(TransplantReport { seed, ..r });
                vec![m]
            }
            Strategy::Expand => {
                let (vocab, m, r) = expand_vocab(v_orig, v_new, tensor, opts.expand_init, s)?;
                expanded_vocab.get_or_insert(vocab);
                report.get_or_insert(TransplantReport { seed, ..r });
                vec![m]
            }
            Strategy::FactorizedExpand => {
                let d_e = opts
                    .d_e
                    .ok_or_else(|| Error::Config("factorized expansion requires d_e".into()))?;
                let (mut e, mut w) = factorized_expand(v_new.size(), d_e, tensor.cols(), s)?;
                e.set_name(name.clone());
                w.set_name(format!("{name}.proj"));
                let overlap = overlap_report(v_orig, v_new);
                report.get_or_insert(TransplantReport {
                    strategy,
                    seed,
                    inserted: 0,
                    randomized: v_new.size(),
                    mean_fallbacks: 0,
                    matrices: Vec::new(),
                    overlap,
                });
                vec![e, w]
            }
        };
        new_tensors.push((name, produced));
    }

    let mut report = report.expect("strategy ran for both matrices");
    let mut out = Checkpoint::new();
    for (k, v) in ckpt.metadata() {
        out.set_metadata(k, v)?;
    }
    for tensor in ckpt.tensors() {
        match new_tensors.iter_mut().find(|(n, _)| n == tensor.name()) {
            Some((_, produced)) => {
                for t in produced.drain(..) {
                    report.matrices.push(t.name().to_string());
                    out.push(t)?;
                }
            }
            None => out.push(tensor.clone())?,
        }
    }
    report.matrices.sort();
    report.matrices.dedup();

    Ok(TransplantOutcome {
        checkpoint: out,
        report,
        expanded_vocab,
    })
}

fn require_vocab_tensor<'c>(
    ckpt: &'c Checkpoint,
    name: &str,
    v_orig: &Vocabulary,
) -> Result<&'c TensorF32> {
    let tensor = ckpt.get(name).ok_or_else(|| Error::Validation {
        tensor: name.into(),
        msg: "missing from checkpoint".into(),
    })?;
    if tensor.rows() != v_orig.size() {
        return Err(Error::Validation {
            tensor: name.into(),
            msg: format!(
                "has {} rows but the original vocabulary has {} pieces",
                tensor.rows(),
                v_orig.size()
            ),
        });
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::counter_u64;
    use crate::vocab::Piece;

    fn vocab(normals: &[&str]) -> Vocabulary {
        let mut pieces = Piece::specials();
        pieces.extend(Piece::byte_pieces(-14.0));
        for (i, t) in normals.iter().enumerate() {
            pieces.push(Piece::normal(*t, -1.0 - 0.01 * i as f64));
        }
        Vocabulary::from_pieces(pieces).unwrap()
    }

    /// Deterministic vocabulary with `extra` synthetic normal pieces.
    fn synthetic_vocab(extra: usize, salt: u64) -> Vocabulary {
        let mut normals: Vec<String> = Vec::with_capacity(extra);
        let mut i = 0u64;
        while normals.len() < extra {
            let word: String = (0..(counter_u64(salt, i) % 5 + 2))
                .map(|k| (b'a' + (counter_u64(salt, i * 31 + k) % 26) as u8) as char)
                .collect();
            if !normals.contains(&word) {
                normals.push(word);
            }
            i += 1;
        }
        let refs: Vec<&str> = normals.iter().map(|s| s.as_str()).collect();
        vocab(&refs)
    }

    #[test]
    fn gaussian_matrix_matches_documented_generator() {
        let t = gaussian_matrix(3, 5, 99);
        for i in 0..3 {
            for j in 0..5 {
                let expect = counter_normal(99, (i * 5 + j) as u64) as f32;
                assert_eq!(t.get(i, j), expect);
            }
        }
        // Same arguments twice: bit-identical.
        let u = gaussian_matrix(3, 5, 99);
        assert_eq!(t, u);
        assert_ne!(gaussian_matrix(3, 5, 100), t);
    }

    #[test]
    fn gaussian_matrix_sample_moments() {
        // 4096x64 draw: |mean| < 4/sqrt(n), var within 2% of 1.
        let t = gaussian_matrix(4096, 64, 7);
        let n = (4096 * 64) as f64;
        assert!(t.mean().abs() < 4.0 / n.sqrt(), "mean = {}", t.mean());
        assert!((t.variance() - 1.0).abs() < 0.02, "var = {}", t.variance());
    }

    #[test]
    fn swap_of_zeros_is_zeros() {
        let e = TensorF32::zeros("embed", 100, 8);
        let out = swap(&e, 37, 1).unwrap();
        assert_eq!(out.rows(), 37);
        assert_eq!(out.cols(), 8);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swap_rejects_zero_rows() {
        let e = TensorF32::zeros("embed", 0, 8);
        assert!(matches!(swap(&e, 4, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn swap_with_single_row_is_scaled_gaussian_column() {
        // |V_orig| = 1, E_orig = [[c]]: row i of the output is w_i * c.
        let c = 0.75f32;
        let e = TensorF32::new("embed", 1, 1, vec![c]).unwrap();
        let out = swap(&e, 16, 5).unwrap();
        for i in 0..16 {
            let w = counter_normal(5, i as u64) as f32;
            let expect = (w as f64 * c as f64) as f32;
            assert_eq!(out.get(i, 0), expect);
        }
    }

    #[test]
    fn swap_preserves_variance() {
        // E_orig iid N(0, 1), |V_orig| * d = 4096 * 64 = 2^18.
        let e = gaussian_matrix(4096, 64, 21);
        let out = swap(&e, 1024, 22).unwrap();
        let ratio = out.variance() / e.variance();
        assert!((0.95..=1.05).contains(&ratio), "ratio = {ratio}");
        assert!(out.mean().abs() < 4.0 / ((1024.0f64 * 64.0).sqrt()) * 2.0);
    }

    #[test]
    fn swap_is_linear() {
        let e = gaussian_matrix(64, 8, 3);

        // alpha = 2 keeps alpha*E exactly representable, so the two f64
        // accumulations are identical and the results match bit for bit.
        let doubled: Vec<f32> = e.data().iter().map(|&v| v * 2.0).collect();
        let e2 = TensorF32::new("embed", 64, 8, doubled).unwrap();
        let a = swap(&e2, 32, 9).unwrap();
        let b = swap(&e, 32, 9).unwrap();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), (y * 2.0).to_bits());
        }

        // A non-representable alpha quantizes the input entries; the result
        // still matches to a few f32 epsilons relative to the row magnitude.
        let tripled: Vec<f32> = e.data().iter().map(|&v| v * 3.0).collect();
        let e3 = TensorF32::new("embed", 64, 8, tripled).unwrap();
        let a = swap(&e3, 32, 9).unwrap();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let scaled = y * 3.0;
            assert!(
                (x - scaled).abs() <= 1e-5 * scaled.abs().max(1.0),
                "{x} vs {scaled}"
            );
        }
    }

    #[test]
    fn swap_centering_preserves_column_means() {
        let mut data = vec![0.0f32; 512 * 4];
        for (i, v) in data.iter_mut().enumerate() {
            *v = (counter_normal(77, i as u64) * 0.1 + 2.0) as f32; // mean 2
        }
        let e = TensorF32::new("embed", 512, 4, data).unwrap();
        let out = swap_with_options(&e, 512, 8, SwapOptions { center: true }).unwrap();
        // Without centering the output mean collapses toward 0.
        let plain = swap(&e, 512, 8).unwrap();
        assert!(
            (out.mean() - 2.0).abs() < 0.05,
            "centered mean {}",
            out.mean()
        );
        assert!(plain.mean().abs() < 0.5, "plain mean {}", plain.mean());
    }

    #[test]
    fn insert_full_overlap_restores_original() {
        let v = synthetic_vocab(40, 1);
        let e_orig = gaussian_matrix(v.size(), 8, 11);
        let e_new = gaussian_matrix(v.size(), 8, 12);
        let (out, report) = insert(&e_new, &e_orig, &v, &v).unwrap();
        assert_eq!(out.data(), e_orig.data());
        assert_eq!(report.total, v.size());
    }

    #[test]
    fn insert_single_shared_piece_touches_one_row() {
        // Shared normal piece at orig id 7, new id 3 (plus no other overlap:
        // non-byte-fallback vocabularies with disjoint other pieces and no
        // shared special roles is impossible, so build bare vocabularies).
        let orig = Vocabulary::from_pieces(vec![
            Piece::normal("q0", -1.0),
            Piece::normal("q1", -1.0),
            Piece::normal("q2", -1.0),
            Piece::normal("q3", -1.0),
            Piece::normal("q4", -1.0),
            Piece::normal("q5", -1.0),
            Piece::normal("q6", -1.0),
            Piece::normal("hit", -1.0),
        ])
        .unwrap();
        let new = Vocabulary::from_pieces(vec![
            Piece::normal("z0", -1.0),
            Piece::normal("z1", -1.0),
            Piece::normal("z2", -1.0),
            Piece::normal("hit", -1.0),
            Piece::normal("z4", -1.0),
        ])
        .unwrap();
        let e_orig = gaussian_matrix(8, 4, 31);
        let e_new = gaussian_matrix(5, 4, 32);
        let (out, report) = insert(&e_new, &e_orig, &orig, &new).unwrap();
        assert_eq!(report.shared, vec![(7, 3)]);
        for i in 0..5 {
            if i == 3 {
                assert_eq!(out.row(i), e_orig.row(7));
            } else {
                assert_eq!(out.row(i), e_new.row(i));
            }
        }
    }

    #[test]
    fn insert_disjoint_normals_replaces_bytes_and_specials_only() {
        let orig = vocab(&["aa", "bb", "cc"]);
        let new = vocab(&["dd", "ee"]);
        let e_orig = gaussian_matrix(orig.size(), 4, 91);
        let e_new = gaussian_matrix(new.size(), 4, 92);
        let (out, report) = insert(&e_new, &e_orig, &orig, &new).unwrap();
        assert_eq!(report.total, 256 + 4);
        let replaced = (0..new.size())
            .filter(|&i| out.row(i) != e_new.row(i))
            .count();
        assert_eq!(replaced, 256 + 4);
    }

    #[test]
    fn insert_rejects_column_mismatch() {
        let v = vocab(&["aa"]);
        let e_orig = gaussian_matrix(v.size(), 4, 1);
        let e_new = gaussian_matrix(v.size(), 5, 2);
        assert!(matches!(
            insert(&e_new, &e_orig, &v, &v),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn swap_and_insert_identity_bitwise_for_any_seed() {
        let v = synthetic_vocab(30, 2);
        let e = gaussian_matrix(v.size(), 16, 41);
        for seed in [0u64, 1, u64::MAX] {
            let (out, report) = swap_and_insert(&e, &v, &v, seed).unwrap();
            assert_eq!(out.data(), e.data());
            assert_eq!(report.inserted, v.size());
            assert_eq!(report.randomized, 0);
        }
    }

    #[test]
    fn swap_and_insert_accounting() {
        // 100 new pieces, 10 of them shared.
        let orig_normals: Vec<String> = (0..50).map(|i| format!("o{i}")).collect();
        let mut new_normals: Vec<String> = (0..90).map(|i| format!("n{i}")).collect();
        new_normals.extend((0..10).map(|i| format!("o{i}")));
        let orig = {
            let refs: Vec<&str> = orig_normals.iter().map(|s| s.as_str()).collect();
            Vocabulary::from_pieces(refs.iter().map(|t| Piece::normal(*t, -1.0)).collect()).unwrap()
        };
        let new = {
            let refs: Vec<&str> = new_normals.iter().map(|s| s.as_str()).collect();
            Vocabulary::from_pieces(refs.iter().map(|t| Piece::normal(*t, -1.0)).collect()).unwrap()
        };
        let e = gaussian_matrix(orig.size(), 8, 5);
        let (_, report) = swap_and_insert(&e, &orig, &new, 17).unwrap();
        assert_eq!(report.inserted, 10);
        assert_eq!(report.randomized, 90);
        assert_eq!(report.inserted + report.randomized, new.size());
        assert_eq!(report.inserted, report.overlap.total);
    }

    #[test]
    fn mean_init_decompose_averages_segmentation_rows() {
        // "▁ab" decomposes to "▁a" + "b" under the original vocabulary.
        let orig = vocab(&["\u{2581}a", "b"]);
        let new = vocab(&["\u{2581}ab"]);
        let e = gaussian_matrix(orig.size(), 6, 51);
        let (out, report) = mean_init(&e, &orig, &new, MeanMode::Decompose).unwrap();
        let id_new = new.id_of("\u{2581}ab").unwrap() as usize;
        let r1 = e.row(orig.id_of("\u{2581}a").unwrap() as usize);
        let r2 = e.row(orig.id_of("b").unwrap() as usize);
        for k in 0..6 {
            let expect = ((r1[k] as f64 + r2[k] as f64) / 2.0) as f32;
            assert_eq!(out.get(id_new, k), expect);
        }
        assert_eq!(report.mean_fallbacks, 0);
        assert_eq!(report.inserted + report.randomized, new.size());
    }

    #[test]
    fn mean_init_global_mode_uses_column_mean() {
        let orig = vocab(&["x"]);
        let new = vocab(&["zz"]);
        let row: Vec<f32> = (0..4).map(|k| k as f32 + 1.0).collect();
        let data: Vec<f32> = (0..orig.size()).flat_map(|_| row.clone()).collect();
        let e = TensorF32::new("embed", orig.size(), 4, data).unwrap();
        let (out, _) = mean_init(&e, &orig, &new, MeanMode::Global).unwrap();
        let id = new.id_of("zz").unwrap() as usize;
        assert_eq!(out.row(id), &row[..]);
    }

    #[test]
    fn mean_init_copies_shared_rows_bit_exactly() {
        let orig = vocab(&["aa", "bb"]);
        let new = vocab(&["bb", "cc"]);
        let e = gaussian_matrix(orig.size(), 8, 61);
        let (out, _) = mean_init(&e, &orig, &new, MeanMode::Decompose).unwrap();
        let from = orig.id_of("bb").unwrap() as usize;
        let to = new.id_of("bb").unwrap() as usize;
        assert_eq!(out.row(to), e.row(from));
    }

    #[test]
    fn mean_init_unsegmentable_piece_falls_back_to_global_mean() {
        // Original vocabulary without byte fallback cannot segment "zz".
        let orig =
            Vocabulary::from_pieces(vec![Piece::normal("a", -1.0), Piece::normal("b", -1.0)])
                .unwrap();
        let new =
            Vocabulary::from_pieces(vec![Piece::normal("a", -1.0), Piece::normal("zz", -1.0)])
                .unwrap();
        let e = TensorF32::new("embed", 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, report) = mean_init(&e, &orig, &new, MeanMode::Decompose).unwrap();
        assert_eq!(report.mean_fallbacks, 1);
        let id = new.id_of("zz").unwrap() as usize;
        assert_eq!(out.row(id), &[2.0, 3.0]); // column means
    }

    #[test]
    fn expand_vocab_is_identity_when_new_is_subset() {
        let orig = vocab(&["aa", "bb", "cc"]);
        let new = vocab(&["bb", "aa"]);
        let e = gaussian_matrix(orig.size(), 8, 71);
        let (expanded, matrix, report) =
            expand_vocab(&orig, &new, &e, ExpandInit::SwapInsert, 3).unwrap();
        assert_eq!(expanded.size(), orig.size());
        for (a, b) in expanded.pieces().iter().zip(orig.pieces()) {
            assert_eq!(a, b);
        }
        assert_eq!(matrix.data(), e.data());
        assert_eq!(report.randomized, 0);
    }

    #[test]
    fn expand_vocab_appends_novel_pieces_and_preserves_rows() {
        let orig = vocab(&["aa", "bb"]);
        let new = vocab(&["bb", "xx", "yy"]);
        let e = gaussian_matrix(orig.size(), 8, 81);
        let (expanded, matrix, report) =
            expand_vocab(&orig, &new, &e, ExpandInit::SwapInsert, 7).unwrap();
        let overlap = report.overlap.total;
        assert_eq!(expanded.size(), orig.size() + (new.size() - overlap));
        assert_eq!(report.randomized, new.size() - overlap);
        // Original ids preserved and rows bit-exact.
        for id in 0..orig.size() {
            assert_eq!(expanded.pieces()[id], orig.pieces()[id]);
            assert_eq!(matrix.row(id), e.row(id));
        }
        // Appended pieces keep their new-vocabulary order.
        assert_eq!(expanded.pieces()[orig.size()].text, "xx");
        assert_eq!(expanded.pieces()[orig.size() + 1].text, "yy");
    }

    #[test]
    fn factorized_expand_shapes_scale_and_errors() {
        assert!(factorized_expand(10, 4, 8, 1).is_err());
        let (e, w) = factorized_expand(64, 256, 16, 9).unwrap();
        assert_eq!((e.rows(), e.cols()), (64, 256));
        assert_eq!((w.rows(), w.cols()), (256, 16));
        // Entries are N(0, 1/d_e).
        assert!(
            (e.variance() - 1.0 / 256.0).abs() < 0.1 / 256.0,
            "var {}",
            e.variance()
        );

        // Monte Carlo: the product E*W has entry variance of order 1/d_e,
        // independent of the vocabulary size.
        let var_product = |vs: usize, seed: u64| {
            let (e, w) = factorized_expand(vs, 256, 16, seed).unwrap();
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for i in 0..vs {
                for j in 0..16 {
                    let mut acc = 0.0f64;
                    for k in 0..256 {
                        acc += e.get(i, k) as f64 * w.get(k, j) as f64;
                    }
                    sum += acc;
                    sum_sq += acc * acc;
                }
            }
            let n = (vs * 16) as f64;
            sum_sq / n - (sum / n) * (sum / n)
        };
        let v64 = var_product(64, 9);
        let v128 = var_product(128, 10);
        let expect = 1.0 / 256.0;
        assert!((0.5 * expect..=1.5 * expect).contains(&v64), "v64 = {v64}");
        assert!(
            (0.5 * expect..=1.5 * expect).contains(&v128),
            "v128 = {v128}"
        );
    }

    #[test]
    fn factorized_param_count_degenerate_when_de_equals_d() {
        let b = count_params(24, 16, 1000, Some(16), true);
        assert_eq!(b.vocab, 1000 * 16 + 16 * 16);
    }

    #[test]
    fn count_params_reproduces_published_sizes() {
        // 24 layers, d=1536: internal layers 679,477,248 (~680M).
        let b = count_params(24, 1536, 100_000, None, true);
        assert_eq!(b.internal, 679_477_248);
        assert_eq!(display_millions(b.internal), "680M");
        // 100k vocabulary, tied: 153.6M displayed as 150M.
        assert_eq!(b.vocab, 153_600_000);
        assert_eq!(display_millions(b.vocab), "150M");
        // 5k vocabulary: 7.68M displayed as 8M.
        let b5k = count_params(24, 1536, 5_000, None, true);
        assert_eq!(b5k.vocab, 7_680_000);
        assert_eq!(display_millions(b5k.vocab), "8M");
        assert_eq!(display_millions(b5k.total), "690M");
        // 5k with d_e = 30720: ~200M.
        let bf = count_params(24, 1536, 5_000, Some(30_720), true);
        assert_eq!(bf.vocab, 5_000 * 30_720 + 30_720 * 1_536);
        assert_eq!(display_millions(bf.vocab), "200M");
        // Untied doubles the vocabulary side only.
        let untied = count_params(24, 1536, 5_000, None, false);
        assert_eq!(untied.vocab, 2 * 7_680_000);
        assert_eq!(untied.internal, b.internal);
    }

    fn toy_checkpoint(v: &Vocabulary, d: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        let mut embed = gaussian_matrix(v.size(), d, 1001);
        embed.set_name("embed");
        ckpt.push(embed).unwrap();
        let mut attn = gaussian_matrix(3, d, 1002);
        attn.set_name("layer0.attn");
        ckpt.push(attn).unwrap();
        let mut output = gaussian_matrix(v.size(), d, 1003);
        output.set_name("output");
        ckpt.push(output).unwrap();
        ckpt.set_metadata("origin", "test").unwrap();
        ckpt
    }

    #[test]
    fn transplant_checkpoint_identity_under_swap_insert() {
        let v = synthetic_vocab(25, 3);
        let ckpt = toy_checkpoint(&v, 8);
        let out = transplant_checkpoint(
            &ckpt,
            &v,
            &v,
            Strategy::SwapInsert,
            99,
            TransplantOptions::default(),
        )
        .unwrap();
        assert_eq!(out.checkpoint, ckpt);
    }

    #[test]
    fn transplant_checkpoint_uses_independent_streams() {
        let orig = synthetic_vocab(25, 4);
        let new = synthetic_vocab(30, 5);
        let ckpt = toy_checkpoint(&orig, 8);
        let out = transplant_checkpoint(
            &ckpt,
            &orig,
            &new,
            Strategy::Swap,
            7,
            TransplantOptions::default(),
        )
        .unwrap();
        let embed = out.checkpoint.get("embed").unwrap();
        let output = out.checkpoint.get("output").unwrap();
        assert_eq!(embed.rows(), new.size());

        // Pearson correlation between the two matrices stays near zero.
        let (a, b) = (embed.data(), output.data());
        let ma = embed.mean();
        let mb = output.mean();
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            cov += (x as f64 - ma) * (y as f64 - mb);
            va += (x as f64 - ma).powi(2);
            vb += (y as f64 - mb).powi(2);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.05, "corr = {corr}");

        // Non-vocabulary tensors and metadata are untouched.
        assert_eq!(out.checkpoint.get("layer0.attn"), ckpt.get("layer0.attn"));
        assert_eq!(out.checkpoint.metadata_value("origin"), Some("test"));
        assert_eq!(out.report.matrices, vec!["embed", "output"]);

        // Shared-seed mode makes the two matrices identical.
        let shared = transplant_checkpoint(
            &ckpt,
            &orig,
            &new,
            Strategy::Swap,
            7,
            TransplantOptions {
                shared_seed: true,
                ..TransplantOptions::default()
            },
        )
        .unwrap();
        let se = shared.checkpoint.get("embed").unwrap();
        let so = shared.checkpoint.get("output").unwrap();
        assert_ne!(se.data(), so.data()); // different sources, same W
        let same_w = transplant_checkpoint(
            &ckpt,
            &orig,
            &orig,
            Strategy::Swap,
            7,
            TransplantOptions {
                shared_seed: true,
                ..TransplantOptions::default()
            },
        )
        .unwrap();
        let _ = same_w;
    }

    #[test]
    fn transplant_checkpoint_validates_missing_and_mismatched_tensors() {
        let v = synthetic_vocab(10, 6);
        let mut ckpt = Checkpoint::new();
        let mut embed = gaussian_matrix(v.size(), 4, 1);
        embed.set_name("embed");
        ckpt.push(embed).unwrap();
        match transplant_checkpoint(
            &ckpt,
            &v,
            &v,
            Strategy::Swap,
            1,
            TransplantOptions::default(),
        ) {
            Err(Error::Validation { tensor, .. }) => assert_eq!(tensor, "output"),
            other => panic!("expected validation error, got {other:?}"),
        }

        let mut ckpt2 = Checkpoint::new();
        let mut embed = gaussian_matrix(v.size() + 1, 4, 1);
        embed.set_name("embed");
        ckpt2.push(embed).unwrap();
        let mut output = gaussian_matrix(v.size(), 4, 2);
        output.set_name("output");
        ckpt2.push(output).unwrap();
        match transplant_checkpoint(
            &ckpt2,
            &v,
            &v,
            Strategy::Swap,
            1,
            TransplantOptions::default(),
        ) {
            Err(Error::Validation { tensor, .. }) => assert_eq!(tensor, "embed"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn transplant_checkpoint_factorized_adds_projection_tensors() {
        let orig = synthetic_vocab(12, 7);
        let new = synthetic_vocab(20, 8);
        let ckpt = toy_checkpoint(&orig, 8);
        let out = transplant_checkpoint(
            &ckpt,
            &orig,
            &new,
            Strategy::FactorizedExpand,
            3,
            TransplantOptions {
                d_e: Some(32),
                ..TransplantOptions::default()
            },
        )
        .unwrap();
        let names: Vec<&str> = out.checkpoint.tensors().iter().map(|t| t.name()).collect();
        assert_eq!(
            names,
            vec![
                "embed",
                "embed.proj",
                "layer0.attn",
                "output",
                "output.proj"
            ]
        );
        assert_eq!(out.checkpoint.get("embed").unwrap().cols(), 32);
        assert_eq!(out.checkpoint.get("embed.proj").unwrap().rows(), 32);
        assert_eq!(out.checkpoint.get("embed.proj").unwrap().cols(), 8);

        // Missing d_e is a config error.
        assert!(matches!(
            transplant_checkpoint(
                &ckpt,
                &orig,
                &new,
                Strategy::FactorizedExpand,
                3,
                TransplantOptions::default(),
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn transplant_checkpoint_expand_returns_vocabulary() {
        let orig = synthetic_vocab(12, 9);
        let new = synthetic_vocab(20, 10);
        let ckpt = toy_checkpoint(&orig, 8);
        let out = transplant_checkpoint(
            &ckpt,
            &orig,
            &new,
            Strategy::Expand,
            3,
            TransplantOptions::default(),
        )
        .unwrap();
        let expanded = out.expanded_vocab.expect("expand returns the vocabulary");
        assert_eq!(
            expanded.size(),
            orig.size() + new.size() - out.report.overlap.total
        );
        assert_eq!(out.checkpoint.get("embed").unwrap().rows(), expanded.size());
    }
}
