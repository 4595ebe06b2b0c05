//! Multiple-choice scoring by normalized likelihood.
//!
//! The harness is backend-agnostic: anything that can assign a log
//! probability to each continuation token implements [`LmBackend`]. The
//! bundled [`UnigramBackend`] scores tokens by their vocabulary log
//! probability (a context-free unigram language model), which makes the
//! whole pipeline runnable without a trained network.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::viterbi_segment;
use crate::vocab::Vocabulary;

/// One multiple-choice task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalTask {
    pub prompt: String,
    pub candidates: Vec<String>,
    pub gold: usize,
}

/// Length normalization applied to a candidate's total log probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Divide by the candidate's token count.
    PerToken,
    /// Divide by the candidate's UTF-8 byte count.
    PerByte,
    /// No normalization.
    None,
}

/// A source of token-level log probabilities.
///
/// `context` is the tokenized prompt; `continuation` the tokenized
/// candidate. Backends with real context must score the continuation tokens
/// conditioned on everything before them and return one value per
/// continuation token.
pub trait LmBackend {
    fn token_logprobs(&self, context: &[u32], continuation: &[u32]) -> Vec<f64>;
}

/// Context-free reference backend: each token scores its piece log
/// probability.
pub struct UnigramBackend<'a> {
    vocab: &'a Vocabulary,
}

impl<'a> UnigramBackend<'a> {
    pub fn new(vocab: &'a Vocabulary) -> Self {
        UnigramBackend { vocab }
    }
}

impl LmBackend for UnigramBackend<'_> {
    fn token_logprobs(&self, _context: &[u32], continuation: &[u32]) -> Vec<f64> {
        continuation
            .iter()
            .map(|&id| self.vocab.piece(id).log_prob)
            .collect()
    }
}

/// Score one candidate: sum of continuation token log probabilities,
/// normalized per [`Norm`].
pub fn score_candidate(
    lm: &dyn LmBackend,
    vocab: &Vocabulary,
    prompt: &str,
    candidate: &str,
    norm: Norm,
) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::Eval("empty candidate".into()));
    }
    let context = viterbi_segment(vocab, prompt)?;
    let continuation = viterbi_segment(vocab, candidate)?;
    let logprobs = lm.token_logprobs(&context.ids, &continuation.ids);
    debug_assert_eq!(logprobs.len(), continuation.len());
    let total: f64 = logprobs.iter().sum();
    Ok(match norm {
        Norm::PerToken => total / continuation.len() as f64,
        Norm::PerByte => total / candidate.len() as f64,
        Norm::None => total,
    })
}

/// Scores, selections, and accuracy over a task set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Argmax candidate index per task; ties go to the lowest index.
    pub selections: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

/// Evaluate every task: pick the argmax-scored candidate and compare with
/// the gold index.
pub fn eval_task_set(
    lm: &dyn LmBackend,
    vocab: &Vocabulary,
    tasks: &[EvalTask],
    norm: Norm,
) -> Result<EvalOutcome> {
    if tasks.is_empty() {
        return Err(Error::Eval("task set is empty".into()));
    }
    let mut selections = Vec::with_capacity(tasks.len());
    let mut scores = Vec::with_capacity(tasks.len());
    let mut correct = 0usize;
    for task in tasks {
        let task_scores: Vec<f64> = task
            .candidates
            .iter()
            .map(|c| score_candidate(lm, vocab, &task.prompt, c, norm))
            .collect::<Result<_>>()?;
        let mut best = 0usize;
        for (i, &s) in task_scores.iter().enumerate() {
            if s > task_scores[best] {
                best = i;
            }
        }
        if best == task.gold {
            correct += 1;
        }
        selections.push(best);
        scores.push(task_scores);
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / tasks.len() as f64,
        selections,
        scores,
    })
}

/// Load tasks from JSON lines: one object per line with fields
/// `prompt`, `candidates`, `gold`. Blank lines are skipped. Validation
/// errors carry 1-based line numbers.
pub fn load_tasks(reader: impl BufRead) -> Result<Vec<EvalTask>> {
    let mut tasks = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: EvalTask = serde_json::from_str(&line).map_err(|e| Error::TaskParse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if task.candidates.len() < 2 {
            return Err(Error::TaskParse {
                line: line_no,
                msg: format!("need at least 2 candidates, got {}", task.candidates.len()),
            });
        }
        if task.candidates.iter().any(|c| c.is_empty()) {
            return Err(Error::TaskParse {
                line: line_no,
                msg: "empty candidate".into(),
            });
        }
        if task.gold >= task.candidates.len() {
            return Err(Error::TaskParse {
                line: line_no,
                msg: format!(
                    "gold index {} out of range for {} candidates",
                    task.gold,
                    task.candidates.len()
                ),
            });
        }
        tasks.push(task);
    }
    Ok(tasks)
}
