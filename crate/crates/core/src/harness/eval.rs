//! Decoding a corpus and scoring it.

use serde::{Deserialize, Serialize};

use super::metrics::{corpus_bleu, token_accuracy};
use crate::error::Result;
use crate::model::{translate_batch, DecodeOptions, ModelConfig, Pair};
use crate::tensor::{BinaryMask, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub bleu: f64,
}

pub fn decode_corpus(
    model: &ModelConfig,
    params: &ParamStore,
    mask: Option<&BinaryMask>,
    corpus: &[Pair],
    decode: &DecodeOptions,
) -> Result<Vec<Vec<u32>>> {
    let sources: Vec<Vec<u32>> = corpus.iter().map(|p| p.src.clone()).collect();
    translate_batch(model, params, mask, &sources, decode)
}

pub fn score(hyps: &[Vec<u32>], corpus: &[Pair]) -> Result<Scores> {
    let refs: Vec<Vec<u32>> = corpus.iter().map(|p| p.tgt.clone()).collect();
    Ok(Scores {
        accuracy: token_accuracy(hyps, &refs)?,
        bleu: corpus_bleu(hyps, &refs, 4)?,
    })
}

pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore,
    mask: Option<&BinaryMask>,
    corpus: &[Pair],
    decode: &DecodeOptions,
) -> Result<Scores> {
    let hyps = decode_corpus(model, params, mask, corpus, decode)?;
    score(&hyps, corpus)
}
