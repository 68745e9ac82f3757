//! Pre-norm transformer encoder-decoder built on [`Graph`].
//!
//! Sequences of a batch are packed row-wise; attention is restricted to each
//! sequence's own rows through [`Segment`]s. The source/target embedding
//! table is shared and tied to the output projection, which only adds a bias.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdapterConfig, ModelConfig, ParamGroup, ParamGroupTag, Side};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Graph, Inputs, NodeId, ParamStore, Segment, Tensor};

const LN_EPS: f64 = 1e-5;

/// One parallel sentence pair of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl Pair {
    pub fn new(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        Pair { src, tgt }
    }
}

pub const EMBEDDING: &str = "embed.table";
pub const OUTPUT_BIAS: &str = "out.bias";

fn side_prefix(side: Side) -> &'static str {
    match side {
        Side::Encoder => "enc",
        Side::Decoder => "dec",
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn put(&mut self, name: String, t: Tensor, tag: ParamGroupTag) {
        self.store.insert(name, t, Some(tag)).expect("unique parameter names");
    }

    fn layer_norm(&mut self, prefix: &str, d: usize, side: Side, layer: Option<usize>) {
        let tag = ParamGroupTag::new(ParamGroup::LayerNorm, Some(side), layer);
        self.put(format!("{prefix}.gain"), Tensor::full(&[d], 1.0), tag);
        self.put(format!("{prefix}.bias"), Tensor::zeros(&[d]), tag);
    }

    fn attention(&mut self, prefix: &str, d: usize, side: Side, layer: usize) {
        let tag = ParamGroupTag::new(ParamGroup::Attention, Some(side), Some(layer));
        for w in ["q", "k", "v", "o"] {
            let t = glorot(self.rng, d, d);
            self.put(format!("{prefix}.w{w}"), t, tag);
            self.put(format!("{prefix}.b{w}"), Tensor::zeros(&[d]), tag);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize, side: Side, layer: usize) {
        let tag = ParamGroupTag::new(ParamGroup::Ffn, Some(side), Some(layer));
        let w1 = glorot(self.rng, d, f);
        self.put(format!("{prefix}.w1"), w1, tag);
        self.put(format!("{prefix}.b1"), Tensor::zeros(&[f]), tag);
        let w2 = glorot(self.rng, f, d);
        self.put(format!("{prefix}.w2"), w2, tag);
        self.put(format!("{prefix}.b2"), Tensor::zeros(&[d]), tag);
    }
}

/// Deterministic initialization: Glorot-uniform matrices, zero biases, unit
/// layer-norm gains. Every entry is tagged.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, v) = (config.model_dim, config.ffn_dim, config.vocab_size);
    let mut init = Init {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let bound = (3.0 / d as f64).sqrt();
    let table = (0..v * d).map(|_| init.rng.gen_range(-bound..bound)).collect();
    init.put(
        EMBEDDING.into(),
        Tensor::from_parts(vec![v, d], table),
        ParamGroupTag::new(ParamGroup::Embedding, None, None),
    );
    for l in 0..config.num_layers {
        let p = format!("enc.{l}");
        init.layer_norm(&format!("{p}.ln1"), d, Side::Encoder, Some(l));
        init.attention(&format!("{p}.self"), d, Side::Encoder, l);
        init.layer_norm(&format!("{p}.ln2"), d, Side::Encoder, Some(l));
        init.ffn(&format!("{p}.ffn"), d, f, Side::Encoder, l);
    }
    init.layer_norm("enc.final_ln", d, Side::Encoder, None);
    for l in 0..config.num_layers {
        let p = format!("dec.{l}");
        init.layer_norm(&format!("{p}.ln1"), d, Side::Decoder, Some(l));
        init.attention(&format!("{p}.self"), d, Side::Decoder, l);
        init.layer_norm(&format!("{p}.ln2"), d, Side::Decoder, Some(l));
        init.attention(&format!("{p}.cross"), d, Side::Decoder, l);
        init.layer_norm(&format!("{p}.ln3"), d, Side::Decoder, Some(l));
        init.ffn(&format!("{p}.ffn"), d, f, Side::Decoder, l);
    }
    init.layer_norm("dec.final_ln", d, Side::Decoder, None);
    init.put(
        OUTPUT_BIAS.into(),
        Tensor::zeros(&[v]),
        ParamGroupTag::new(ParamGroup::OutputProjection, None, None),
    );
    Ok(init.store)
}

fn adapter_prefix(side: Side, layer: usize) -> String {
    format!("{}.{layer}.adapter", side_prefix(side))
}

pub fn has_adapters(params: &ParamStore) -> bool {
    params.contains(&format!("{}.down", adapter_prefix(Side::Encoder, 0)))
}

/// Add a residual bottleneck adapter after every block on both sides. The
/// up-projection starts at zero, so the adapted model computes the same
/// function as before.
pub fn attach_adapters(
    params: &ParamStore,
    model: &ModelConfig,
    config: &AdapterConfig,
    seed: u64,
) -> Result<ParamStore> {
    config.validate(model)?;
    if has_adapters(params) {
        return Err(Error::contract("adapters are already attached"));
    }
    if !params.contains(EMBEDDING) {
        return Err(Error::contract("adapters need a store from init_params"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, b) = (model.model_dim, config.bottleneck_dim);
    let mut out = params.clone();
    for side in [Side::Encoder, Side::Decoder] {
        for l in 0..model.num_layers {
            let p = adapter_prefix(side, l);
            let tag = Some(ParamGroupTag::new(ParamGroup::Adapter, Some(side), Some(l)));
            out.insert(format!("{p}.down"), glorot(&mut rng, d, b), tag)?;
            out.insert(format!("{p}.down_bias"), Tensor::zeros(&[b]), tag)?;
            out.insert(format!("{p}.up"), Tensor::zeros(&[b, d]), tag)?;
            out.insert(format!("{p}.up_bias"), Tensor::zeros(&[d]), tag)?;
        }
    }
    Ok(out)
}

/// Sinusoidal position encodings for the given per-sequence lengths, packed.
fn position_encodings(lens: &[usize], d: usize) -> Tensor {
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * d);
    for &len in lens {
        for pos in 0..len {
            for i in 0..d {
                let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = pos as f64 / rate;
                data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::from_parts(vec![total, d], data)
}

fn self_segments(lens: &[usize]) -> Arc<[Segment]> {
    let mut off = 0;
    lens.iter()
        .map(|&len| {
            let s = Segment {
                q_start: off,
                q_len: len,
                k_start: off,
                k_len: len,
            };
            off += len;
            s
        })
        .collect()
}

/// Query rows of sequence `i` attend to key block `key_of[i]` of `key_lens`.
fn cross_segments(q_lens: &[usize], key_lens: &[usize], key_of: &[usize]) -> Arc<[Segment]> {
    let mut key_offsets = Vec::with_capacity(key_lens.len());
    let mut off = 0;
    for &l in key_lens {
        key_offsets.push(off);
        off += l;
    }
    let mut q_off = 0;
    q_lens
        .iter()
        .zip(key_of)
        .map(|(&len, &k)| {
            let s = Segment {
                q_start: q_off,
                q_len: len,
                k_start: key_offsets[k],
                k_len: key_lens[k],
            };
            q_off += len;
            s
        })
        .collect()
}

fn ids_tensor(ids: &[u32]) -> Tensor {
    Tensor::vector(ids.iter().map(|&i| f64::from(i)).collect())
}

/// Graph-building helpers shared by training and decoding.
struct Builder<'a> {
    g: &'a mut Graph,
    config: &'a ModelConfig,
    adapters: bool,
}

impl Builder<'_> {
    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> NodeId {
        let w = self.g.param(w);
        let b = self.g.param(b);
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gain = self.g.param(&format!("{prefix}.gain"));
        let bias = self.g.param(&format!("{prefix}.bias"));
        let y = self.g.layer_norm(x, gain, bias, LN_EPS);
        self.g.named(y, prefix)
    }

    fn attention(&mut self, prefix: &str, q_in: NodeId, kv_in: NodeId, causal: bool, seg: &Arc<[Segment]>) -> NodeId {
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let a = self.g.attention(q, k, v, self.config.heads, causal, seg.clone());
        self.g.named(a, format!("{prefix}.attention"));
        self.linear(a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = self.g.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn adapter(&mut self, side: Side, layer: usize, x: NodeId) -> NodeId {
        if !self.adapters {
            return x;
        }
        let p = adapter_prefix(side, layer);
        let h = self.linear(x, &format!("{p}.down"), &format!("{p}.down_bias"));
        let h = self.g.relu(h);
        let h = self.linear(h, &format!("{p}.up"), &format!("{p}.up_bias"));
        self.g.add(x, h)
    }

    fn embed(&mut self, ids: NodeId, lens: &[usize]) -> NodeId {
        let table = self.g.param(EMBEDDING);
        let e = self.g.embedding(table, ids);
        let e = self.g.scale(e, (self.config.model_dim as f64).sqrt());
        let pe = self.g.constant(position_encodings(lens, self.config.model_dim));
        self.g.add(e, pe)
    }

    fn encoder(&mut self, ids: NodeId, lens: &[usize]) -> NodeId {
        let seg = self_segments(lens);
        let mut x = self.embed(ids, lens);
        for l in 0..self.config.num_layers {
            let p = format!("enc.{l}");
            let h = self.layer_norm(x, &format!("{p}.ln1"));
            let a = self.attention(&format!("{p}.self"), h, h, false, &seg);
            x = self.g.add(x, a);
            let h = self.layer_norm(x, &format!("{p}.ln2"));
            let f = self.ffn(&format!("{p}.ffn"), h);
            x = self.g.add(x, f);
            x = self.adapter(Side::Encoder, l, x);
        }
        let m = self.layer_norm(x, "enc.final_ln");
        self.g.named(m, "memory")
    }

    fn decoder(&mut self, ids: NodeId, lens: &[usize], memory: NodeId, cross: &Arc<[Segment]>) -> NodeId {
        let seg = self_segments(lens);
        let mut x = self.embed(ids, lens);
        for l in 0..self.config.num_layers {
            let p = format!("dec.{l}");
            let h = self.layer_norm(x, &format!("{p}.ln1"));
            let a = self.attention(&format!("{p}.self"), h, h, true, &seg);
            x = self.g.add(x, a);
            let h = self.layer_norm(x, &format!("{p}.ln2"));
            let c = self.attention(&format!("{p}.cross"), h, memory, false, cross);
            x = self.g.add(x, c);
            let h = self.layer_norm(x, &format!("{p}.ln3"));
            let f = self.ffn(&format!("{p}.ffn"), h);
            x = self.g.add(x, f);
            x = self.adapter(Side::Decoder, l, x);
        }
        let h = self.layer_norm(x, "dec.final_ln");
        let table = self.g.param(EMBEDDING);
        let logits = self.g.matmul_nt(h, table);
        let bias = self.g.param(OUTPUT_BIAS);
        let logits = self.g.add_row(logits, bias);
        self.g.named(logits, "logits")
    }
}

/// A training/evaluation graph for a batch of pairs under teacher forcing.
pub struct BatchGraph {
    pub graph: Graph,
    pub inputs: Inputs,
    pub logits: NodeId,
    pub loss: NodeId,
    /// Target ids, one per logit row.
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GraphOptions {
    pub adapters: bool,
    pub label_smoothing: f64,
}

impl GraphOptions {
    pub fn for_params(params: &ParamStore) -> Self {
        GraphOptions {
            adapters: has_adapters(params),
            label_smoothing: 0.0,
        }
    }
}

fn check_tokens(config: &ModelConfig, seq: &[u32], what: &str) -> Result<()> {
    if let Some(&t) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::contract(format!(
            "{what}: token id {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Teacher-forced graph: decoder input is `bos + tgt`, targets are `tgt + eos`.
pub fn batch_graph(config: &ModelConfig, pairs: &[Pair], opts: GraphOptions) -> Result<BatchGraph> {
    if pairs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut src_ids = Vec::new();
    let mut src_lens = Vec::new();
    let mut tgt_in = Vec::new();
    let mut tgt_lens = Vec::new();
    let mut targets = Vec::new();
    for p in pairs {
        check_tokens(config, &p.src, "source")?;
        check_tokens(config, &p.tgt, "target")?;
        if p.src.is_empty() || p.src.len() > config.max_len || p.tgt.len() + 1 > config.max_len {
            return Err(Error::contract(format!(
                "pair lengths {}/{} exceed max_len {} or source is empty",
                p.src.len(),
                p.tgt.len(),
                config.max_len
            )));
        }
        src_ids.extend_from_slice(&p.src);
        src_lens.push(p.src.len());
        tgt_in.push(config.bos());
        tgt_in.extend_from_slice(&p.tgt);
        targets.extend_from_slice(&p.tgt);
        targets.push(config.eos());
        tgt_lens.push(p.tgt.len() + 1);
    }
    let mut graph = Graph::new();
    let (logits, loss) = {
        let mut b = Builder {
            g: &mut graph,
            config,
            adapters: opts.adapters,
        };
        let src = b.g.input("src_ids", None);
        let memory = b.encoder(src, &src_lens);
        let tgt = b.g.input("tgt_ids", None);
        let key_of: Vec<usize> = (0..pairs.len()).collect();
        let cross = cross_segments(&tgt_lens, &src_lens, &key_of);
        let logits = b.decoder(tgt, &tgt_lens, memory, &cross);
        let t = b.g.input("targets", None);
        let loss = b.g.cross_entropy(logits, t, opts.label_smoothing);
        (logits, b.g.named(loss, "nll"))
    };
    let mut inputs = Inputs::new();
    inputs.insert("src_ids".into(), ids_tensor(&src_ids));
    inputs.insert("tgt_ids".into(), ids_tensor(&tgt_in));
    inputs.insert("targets".into(), ids_tensor(&targets));
    Ok(BatchGraph {
        graph,
        inputs,
        logits,
        loss,
        targets,
    })
}

/// Encoder-only graph for a list of sources. Returns the graph, its inputs and the memory node.
pub(crate) fn encoder_graph(
    config: &ModelConfig,
    sources: &[&[u32]],
    adapters: bool,
) -> Result<(Graph, Inputs, NodeId)> {
    let mut ids = Vec::new();
    let mut lens = Vec::new();
    for s in sources {
        check_tokens(config, s, "source")?;
        if s.is_empty() || s.len() > config.max_len {
            return Err(Error::contract(format!("source length {} outside 1..={}", s.len(), config.max_len)));
        }
        ids.extend_from_slice(s);
        lens.push(s.len());
    }
    let mut graph = Graph::new();
    let memory = {
        let mut b = Builder {
            g: &mut graph,
            config,
            adapters,
        };
        let src = b.g.input("src_ids", None);
        b.encoder(src, &lens)
    };
    let mut inputs = Inputs::new();
    inputs.insert("src_ids".into(), ids_tensor(&ids));
    Ok((graph, inputs, memory))
}

/// Decoder graph over packed prefixes; prefix `i` attends to source block `source_of[i]`
/// of the packed `memory` input.
pub(crate) fn decoder_graph(
    config: &ModelConfig,
    prefixes: &[&[u32]],
    source_lens: &[usize],
    source_of: &[usize],
    memory: Tensor,
    adapters: bool,
) -> Result<(Graph, Inputs, NodeId)> {
    let mut ids = Vec::new();
    let mut lens = Vec::new();
    for p in prefixes {
        check_tokens(config, p, "target prefix")?;
        if p.is_empty() || p.len() > config.max_len {
            return Err(Error::contract(format!("prefix length {} outside 1..={}", p.len(), config.max_len)));
        }
        ids.extend_from_slice(p);
        lens.push(p.len());
    }
    let mut graph = Graph::new();
    let logits = {
        let mut b = Builder {
            g: &mut graph,
            config,
            adapters,
        };
        let mem = b.g.input("memory", None);
        let tgt = b.g.input("tgt_ids", None);
        let cross = cross_segments(&lens, source_lens, source_of);
        b.decoder(tgt, &lens, mem, &cross)
    };
    let mut inputs = Inputs::new();
    inputs.insert("memory".into(), memory);
    inputs.insert("tgt_ids".into(), ids_tensor(&ids));
    Ok((graph, inputs, logits))
}

/// Logits `[tgt_len, vocab]` for one source and decoder input. With `apply_mask`
/// the model behaves exactly as if its parameters were multiplied by the mask.
pub fn transformer_forward(
    config: &ModelConfig,
    params: &ParamStore,
    src: &[u32],
    tgt_prefix: &[u32],
    apply_mask: Option<&BinaryMask>,
) -> Result<Tensor> {
    let masked;
    let params = match apply_mask {
        Some(m) => {
            masked = params.masked(m)?;
            &masked
        }
        None => params,
    };
    let adapters = has_adapters(params);
    let (eg, ei, mem) = encoder_graph(config, &[src], adapters)?;
    let memory = eg.forward(params, &ei)?.take(mem);
    let (dg, di, logits) = decoder_graph(config, &[tgt_prefix], &[src.len()], &[0], memory, adapters)?;
    Ok(dg.forward(params, &di)?.take(logits))
}

/// Mean token-level negative log-likelihood of `targets` under `logits`.
pub fn nll_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::shape(
            "nll_loss",
            format!("logits {:?} vs {} targets", logits.shape(), targets.len()),
        ));
    }
    let mut g = Graph::new();
    let l = g.input("logits", None);
    let t = g.input("targets", None);
    let loss = g.cross_entropy(l, t, 0.0);
    let mut inputs = Inputs::new();
    inputs.insert("logits".into(), logits.clone());
    inputs.insert("targets".into(), ids_tensor(targets));
    Ok(g.forward(&ParamStore::new(), &inputs)?.get(loss).data()[0])
}

/// Closed-form parameter count of [`init_params`].
pub fn parameter_count(config: &ModelConfig) -> usize {
    let (l, d, f, v) = (config.num_layers, config.model_dim, config.ffn_dim, config.vocab_size);
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let enc = l * (2 * ln + attn + ffn) + ln;
    let dec = l * (3 * ln + 2 * attn + ffn) + ln;
    v * d + enc + dec + v
}
