//! Frame-word similarity and batched text-video similarity matrices.

use std::ops::Range;

use rayon::prelude::*;

use crate::diffmath::{l2_normalize, Tape, Tensor, Var};
use crate::encoders::Sequences;
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Which parameter set produced a similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelTag {
    Current,
    Previous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `values[i][j] = sim(text i, video j)`.
    pub values: Tensor,
    pub tag: ModelTag,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    /// CSV dump, one row per query.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.values.rows() {
            let row: Vec<String> = self.values.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn normalized_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::EmptySequence);
    }
    (0..x.rows()).map(|r| l2_normalize(x.row(r))).collect()
}

fn sim_of_unit_rows(words: &[Vec<f64>], frames: &[Vec<f64>]) -> f64 {
    let cos: Vec<Vec<f64>> = words
        .iter()
        .map(|w| {
            frames
                .iter()
                .map(|f| w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
                .collect()
        })
        .collect();
    let word_term = cos
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / words.len() as f64;
    let frame_term = (0..frames.len())
        .map(|m| cos.iter().map(|row| row[m]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / frames.len() as f64;
    0.5 * (word_term + frame_term)
}

/// Symmetric max-over-alignment cosine similarity between the rows of
/// `words` (N x D) and `frames` (M x D).
pub fn frame_word_sim(words: &Tensor, frames: &Tensor) -> Result<f64> {
    if words.cols() != frames.cols() {
        return Err(Error::ShapeMismatch(format!(
            "word width {} vs frame width {}",
            words.cols(),
            frames.cols()
        )));
    }
    Ok(sim_of_unit_rows(&normalized_rows(words)?, &normalized_rows(frames)?))
}

/// `Q x G` matrix of [`frame_word_sim`] between feature sequences. Rows are
/// evaluated in parallel and assembled in query order.
pub fn cross_sim(words: &[Tensor], frames: &[Tensor]) -> Result<Tensor> {
    let w: Vec<Vec<Vec<f64>>> = words.iter().map(normalized_rows).collect::<Result<_>>()?;
    let f: Vec<Vec<Vec<f64>>> = frames.iter().map(normalized_rows).collect::<Result<_>>()?;
    if let (Some(a), Some(b)) = (words.first(), frames.first()) {
        if a.cols() != b.cols() {
            return Err(Error::ShapeMismatch(format!(
                "word width {} vs frame width {}",
                a.cols(),
                b.cols()
            )));
        }
    }
    let rows: Vec<Vec<f64>> = w
        .par_iter()
        .map(|wi| f.iter().map(|fj| sim_of_unit_rows(wi, fj)).collect())
        .collect();
    Ok(Tensor::matrix(
        words.len(),
        frames.len(),
        rows.into_iter().flatten().collect(),
    ))
}

fn split(x: &Tensor, segments: &[Range<usize>]) -> Vec<Tensor> {
    segments
        .iter()
        .map(|s| x.slice_rows(s.start, s.len()))
        .collect()
}

/// Encoder outputs for each raw token sequence.
pub fn encode_texts(texts: &[&Tensor], state: &ModelState) -> Result<Vec<Tensor>> {
    let seqs = Sequences::stack(texts)?;
    let mut tape = Tape::no_grad();
    let h = state.text.forward(&mut tape, &seqs)?;
    Ok(split(tape.value(h), &seqs.segments))
}

/// Encoder outputs for each raw frame sequence.
pub fn encode_videos(videos: &[&Tensor], state: &ModelState) -> Result<Vec<Tensor>> {
    let seqs = Sequences::stack(videos)?;
    let mut tape = Tape::no_grad();
    let h = state.video.forward(&mut tape, &seqs)?;
    Ok(split(tape.value(h), &seqs.segments))
}

/// Exact `B x B` similarity matrix of raw text and video samples under `state`.
pub fn sim_matrix(
    texts: &[&Tensor],
    videos: &[&Tensor],
    state: &ModelState,
    tag: ModelTag,
) -> Result<SimilarityMatrix> {
    if texts.len() != videos.len() {
        return Err(Error::BatchSizeMismatch(texts.len(), videos.len()));
    }
    if texts.is_empty() {
        return Err(Error::EmptySequence);
    }
    let words = encode_texts(texts, state)?;
    let frames = encode_videos(videos, state)?;
    Ok(SimilarityMatrix {
        values: cross_sim(&words, &frames)?,
        tag,
    })
}

/// Differentiable similarity matrix between stacked word features (rows
/// grouped by `text_segs`) and stacked frame features (grouped by
/// `video_segs`).
pub fn sim_on_tape(
    tape: &mut Tape,
    words: Var,
    frames: Var,
    text_segs: &[Range<usize>],
    video_segs: &[Range<usize>],
) -> Result<Var> {
    let w = tape.normalize_rows(words)?;
    let f = tape.normalize_rows(frames)?;
    let ft = tape.transpose(f);
    let cos = tape.matmul(w, ft);
    Ok(tape.block_max_sim(cos, text_segs, video_segs))
}
