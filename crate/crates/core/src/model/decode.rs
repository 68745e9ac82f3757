//! Batched beam search.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::transformer::{decoder_graph, encoder_graph, has_adapters};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub beam_width: usize,
    /// Exponent of the length normalizer `((5 + len) / 6)^alpha`.
    pub length_penalty: f64,
    /// Sentences decoded per packed graph.
    pub chunk_size: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_width: 4,
            length_penalty: 0.6,
            chunk_size: 64,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        DecodeOptions {
            beam_width: 1,
            length_penalty: 0.0,
            ..Default::default()
        }
    }
}

/// A completed hypothesis: generated tokens (without the end marker) and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Length-normalized score used for the final ranking.
    pub score: f64,
    /// True when the hypothesis ended with the end-of-sequence token.
    pub ended: bool,
}

pub fn length_normalizer(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone)]
struct Live {
    tokens: Vec<u32>,
    log_prob: f64,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Decode every source; returns the best hypothesis tokens for each.
pub fn translate_batch(
    config: &ModelConfig,
    params: &ParamStore,
    mask: Option<&BinaryMask>,
    sources: &[Vec<u32>],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<u32>>> {
    Ok(beam_search(config, params, mask, sources, opts)?
        .into_iter()
        .map(|mut hyps| hyps.swap_remove(0).tokens)
        .collect())
}

/// Decode a single source sentence.
pub fn translate(
    config: &ModelConfig,
    params: &ParamStore,
    mask: Option<&BinaryMask>,
    src: &[u32],
    beam_width: usize,
    length_penalty: f64,
) -> Result<Vec<u32>> {
    let opts = DecodeOptions {
        beam_width,
        length_penalty,
        chunk_size: 1,
    };
    Ok(translate_batch(config, params, mask, &[src.to_vec()], &opts)?.remove(0))
}

/// Full beam search. For each source returns all finished hypotheses sorted
/// best-first by normalized score.
pub fn beam_search(
    config: &ModelConfig,
    params: &ParamStore,
    mask: Option<&BinaryMask>,
    sources: &[Vec<u32>],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<Hypothesis>>> {
    if opts.beam_width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let masked;
    let params = match mask {
        Some(m) => {
            masked = params.masked(m)?;
            &masked
        }
        None => params,
    };
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(opts.chunk_size.max(1)) {
        out.extend(search_chunk(config, params, chunk, opts)?);
    }
    Ok(out)
}

fn search_chunk(
    config: &ModelConfig,
    params: &ParamStore,
    sources: &[Vec<u32>],
    opts: &DecodeOptions,
) -> Result<Vec<Vec<Hypothesis>>> {
    let adapters = has_adapters(params);
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let (eg, ei, mem) = encoder_graph(config, &refs, adapters)?;
    let memory = eg.forward(params, &ei)?.take(mem);
    let src_lens: Vec<usize> = sources.iter().map(Vec::len).collect();

    let k = opts.beam_width;
    let eos = config.eos();
    let mut live: Vec<Vec<Live>> = vec![
        vec![Live {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        sources.len()
    ];
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); sources.len()];
    let finish = |tokens: Vec<u32>, log_prob: f64, ended: bool| {
        let len = tokens.len() + usize::from(ended);
        Hypothesis {
            score: log_prob / length_normalizer(len, opts.length_penalty),
            tokens,
            log_prob,
            ended,
        }
    };

    // The decoder input is `bos + tokens`, so at most `max_len - 1` tokens precede the end marker.
    for step in 0..config.max_len {
        let mut prefixes: Vec<Vec<u32>> = Vec::new();
        let mut owner: Vec<(usize, usize)> = Vec::new();
        for (s, beams) in live.iter().enumerate() {
            for (b, h) in beams.iter().enumerate() {
                let mut p = Vec::with_capacity(h.tokens.len() + 1);
                p.push(config.bos());
                p.extend_from_slice(&h.tokens);
                prefixes.push(p);
                owner.push((s, b));
            }
        }
        if prefixes.is_empty() {
            break;
        }
        let prefix_refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let source_of: Vec<usize> = owner.iter().map(|&(s, _)| s).collect();
        let (dg, di, logits) =
            decoder_graph(config, &prefix_refs, &src_lens, &source_of, memory.clone(), adapters)?;
        let logits = dg.forward(params, &di)?.take(logits);
        let vocab = config.vocab_size;

        // candidates per source: (log_prob, beam index, token)
        let mut cands: Vec<Vec<(f64, usize, u32)>> = vec![Vec::new(); sources.len()];
        let mut row = 0;
        for (i, p) in prefixes.iter().enumerate() {
            row += p.len();
            let last = &logits.data()[(row - 1) * vocab..row * vocab];
            let lp = log_softmax(last);
            let (s, b) = owner[i];
            let base = live[s][b].log_prob;
            for (tok, &l) in lp.iter().enumerate() {
                // The begin marker is never generated.
                if tok as u32 == config.bos() {
                    continue;
                }
                cands[s].push((base + l, b, tok as u32));
            }
        }

        let last_step = step + 1 == config.max_len;
        for (s, mut c) in cands.into_iter().enumerate() {
            if c.is_empty() {
                continue;
            }
            c.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut next = Vec::with_capacity(k);
            for (lp, b, tok) in c {
                if next.len() == k || finished[s].len() >= k {
                    break;
                }
                let mut tokens = live[s][b].tokens.clone();
                if tok == eos {
                    finished[s].push(finish(tokens, lp, true));
                } else {
                    tokens.push(tok);
                    next.push(Live { tokens, log_prob: lp });
                }
            }
            if finished[s].len() >= k {
                next.clear();
            }
            if last_step || tokens_exhausted(&next, config) {
                for h in next.drain(..) {
                    finished[s].push(finish(h.tokens, h.log_prob, false));
                }
            }
            live[s] = next;
        }
    }

    for f in &mut finished {
        f.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(finished)
}

/// Live hypotheses whose next decoder input would exceed `max_len`.
fn tokens_exhausted(next: &[Live], config: &ModelConfig) -> bool {
    next.first()
        .is_some_and(|h| h.tokens.len() + 1 >= config.max_len)
}
