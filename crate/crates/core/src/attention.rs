//! Causal multi-head attention with an explicit key/value cache, KV
//! injection at a placeholder span, and block-sparse masks for packing
//! several steps into one sequence.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Role of a cached position inside one step's prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SegmentKind {
    CurrentObs,
    Memory,
    Instruction,
    Sentinel,
    ActionQuery,
}

/// Keys and values of one layer, `[positions x heads * head_dim]`. Head `h`
/// occupies columns `h * head_dim .. (h + 1) * head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

impl LayerKv {
    pub fn empty(width: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, width]),
            values: Tensor::zeros(&[0, width]),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, span: Range<usize>) -> Result<LayerKv> {
        Ok(LayerKv {
            keys: self.keys.slice_rows(span.start, span.len())?,
            values: self.values.slice_rows(span.start, span.len())?,
        })
    }

    /// Keys and values of a single head.
    pub fn head(&self, head: usize, head_dim: usize) -> (Tensor, Tensor) {
        let pick = |t: &Tensor| {
            let c = t.cols();
            let data = (0..t.rows())
                .flat_map(|r| t.data()[r * c + head * head_dim..r * c + (head + 1) * head_dim].iter().copied())
                .collect();
            Tensor::from_parts(vec![t.rows(), head_dim], data)
        };
        (pick(&self.keys), pick(&self.values))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub heads: usize,
    pub head_dim: usize,
    pub layers: Vec<LayerKv>,
    pub segments: Vec<SegmentKind>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            heads,
            head_dim,
            layers: (0..layers).map(|_| LayerKv::empty(heads * head_dim)).collect(),
            segments: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Appends one block of positions to every layer.
    pub fn append(&mut self, blocks: &[LayerKv], kinds: &[SegmentKind]) -> Result<()> {
        if blocks.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "cache has {} layers, append supplied {}",
                self.layers.len(),
                blocks.len()
            )));
        }
        for b in blocks {
            if b.keys.shape() != b.values.shape() || b.len() != kinds.len() || b.keys.cols() != self.width() {
                return Err(Error::dim("kv append", b.keys.shape(), &[kinds.len(), self.width()]));
            }
        }
        for (layer, b) in self.layers.iter_mut().zip(blocks) {
            layer.keys = Tensor::concat_rows(&[&layer.keys, &b.keys])?;
            layer.values = Tensor::concat_rows(&[&layer.values, &b.values])?;
        }
        self.segments.extend_from_slice(kinds);
        Ok(())
    }

    /// Per-layer blocks for a position span.
    pub fn read_span(&self, span: Range<usize>) -> Result<Vec<LayerKv>> {
        if span.end > self.len() {
            return Err(Error::Index {
                what: "cache span",
                index: span.end,
                bound: self.len(),
            });
        }
        self.layers.iter().map(|l| l.span(span.clone())).collect()
    }
}

/// Replaces the keys/values of `placeholder` with `external`, layer by layer.
/// All other positions are untouched.
pub fn inject_kv(cache: &KvCache, placeholder: Range<usize>, external: &[LayerKv]) -> Result<KvCache> {
    if placeholder.end > cache.len() {
        return Err(Error::MemoryProtocol(format!(
            "placeholder {placeholder:?} exceeds cache length {}",
            cache.len()
        )));
    }
    if external.len() != cache.layers.len() {
        return Err(Error::MemoryProtocol(format!(
            "external memory has {} layers, cache has {}",
            external.len(),
            cache.layers.len()
        )));
    }
    let mut out = cache.clone();
    for (layer, ext) in out.layers.iter_mut().zip(external) {
        if ext.len() != placeholder.len() || ext.values.rows() != placeholder.len() {
            return Err(Error::MemoryProtocol(format!(
                "placeholder span has {} positions, external block has {}",
                placeholder.len(),
                ext.len()
            )));
        }
        if ext.keys.cols() != cache.width() || ext.values.cols() != cache.width() {
            return Err(Error::MemoryProtocol(format!(
                "external block width {} does not match cache width {}",
                ext.keys.cols(),
                cache.width()
            )));
        }
        let w = cache.width();
        let (s, e) = (placeholder.start * w, placeholder.end * w);
        layer.keys.data_mut()[s..e].copy_from_slice(ext.keys.data());
        layer.values.data_mut()[s..e].copy_from_slice(ext.values.data());
    }
    Ok(out)
}

/// Step-block structure of a packed sequence.
///
/// `allowed(i, j)` holds iff `j <= i` and either `i` and `j` fall in the same
/// step block or `j` lies in one of the shared spans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSparseMask {
    offsets: Vec<usize>,
    shared: Vec<Range<usize>>,
}

impl BlockSparseMask {
    /// Plain causal mask over `n` positions.
    pub fn causal(n: usize) -> Self {
        Self {
            offsets: vec![0, n],
            shared: Vec::new(),
        }
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn shared_spans(&self) -> &[Range<usize>] {
        &self.shared
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn steps(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn block(&self, step: usize) -> Range<usize> {
        self.offsets[step]..self.offsets[step + 1]
    }

    pub fn step_of(&self, pos: usize) -> usize {
        self.offsets.partition_point(|&o| o <= pos) - 1
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        j <= i && (self.step_of(i) == self.step_of(j) || self.shared.iter().any(|s| s.contains(&j)))
    }

    /// Dense row-major allowed matrix for queries `q` against keys `k`.
    pub fn dense(&self, q: Range<usize>, k: Range<usize>) -> Vec<bool> {
        let mut out = Vec::with_capacity(q.len() * k.len());
        for i in q {
            for j in k.clone() {
                out.push(self.allowed(i, j));
            }
        }
        out
    }

    /// Key positions a query in `step` may see, ascending.
    fn key_set(&self, step: usize) -> Vec<usize> {
        let block = self.block(step);
        let mut keys: Vec<usize> = self
            .shared
            .iter()
            .flat_map(|s| s.clone())
            .filter(|&j| j < block.start)
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.extend(block);
        keys
    }
}

/// Builds the packing mask for consecutive steps of the given lengths.
/// `shared_prefix_spans` are position ranges every later step may attend to.
pub fn build_pack_mask(step_lengths: &[usize], shared_prefix_spans: &[Range<usize>]) -> Result<BlockSparseMask> {
    if step_lengths.is_empty() {
        return Err(Error::Argument("packing needs at least one step".into()));
    }
    if let Some(i) = step_lengths.iter().position(|&l| l == 0) {
        return Err(Error::Argument(format!("step {i} has zero length")));
    }
    let mut offsets = vec![0];
    for &l in step_lengths {
        offsets.push(offsets.last().unwrap() + l);
    }
    let total = *offsets.last().unwrap();
    for s in shared_prefix_spans {
        if s.start > s.end || s.end > total {
            return Err(Error::Argument(format!("shared span {s:?} outside 0..{total}")));
        }
    }
    Ok(BlockSparseMask {
        offsets,
        shared: shared_prefix_spans.to_vec(),
    })
}

/// Scaled dot-product attention on a tape.
///
/// `q` holds the queries for the last `q.rows` positions of the key
/// sequence; `k` and `v` cover every position of `mask`. Work is split per
/// step block so disallowed blocks are never materialised.
pub fn attend_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: &BlockSparseMask,
) -> Result<Var> {
    let (nq, width) = {
        let t = tape.value(q);
        (t.rows(), t.cols())
    };
    let nk = tape.value(k).rows();
    if heads == 0 || width % heads != 0 || tape.value(k).cols() != width || tape.value(v).cols() != width {
        return Err(Error::Config(format!(
            "head layout mismatch: {heads} heads, query width {width}, key width {}, value width {}",
            tape.value(k).cols(),
            tape.value(v).cols()
        )));
    }
    if mask.total() != nk || tape.value(v).rows() != nk || nq > nk {
        return Err(Error::Config(format!(
            "mask covers {} positions, keys {nk}, values {}, queries {nq}",
            mask.total(),
            tape.value(v).rows()
        )));
    }
    let head_dim = width / heads;
    let q_off = nk - nq;
    let qs = tape.scale(q, 1.0 / (head_dim as f64).sqrt());

    let mut head_cols: Vec<Var> = Vec::with_capacity(heads);
    let mut per_head_k = Vec::with_capacity(heads);
    let mut per_head_v = Vec::with_capacity(heads);
    let mut per_head_q = Vec::with_capacity(heads);
    for h in 0..heads {
        if heads == 1 {
            per_head_q.push(qs);
            per_head_k.push(k);
            per_head_v.push(v);
        } else {
            per_head_q.push(tape.slice_cols(qs, h * head_dim, head_dim)?);
            per_head_k.push(tape.slice_cols(k, h * head_dim, head_dim)?);
            per_head_v.push(tape.slice_cols(v, h * head_dim, head_dim)?);
        }
    }

    for h in 0..heads {
        let mut blocks = Vec::new();
        for step in 0..mask.steps() {
            let block = mask.block(step);
            let qr = block.start.max(q_off)..block.end;
            if qr.is_empty() {
                continue;
            }
            let keys = mask.key_set(step);
            let contiguous = keys.first() == Some(&block.start);
            let (kb, vb) = if contiguous {
                (
                    tape.slice_rows(per_head_k[h], block.start, block.len())?,
                    tape.slice_rows(per_head_v[h], block.start, block.len())?,
                )
            } else {
                (tape.embedding(per_head_k[h], &keys)?, tape.embedding(per_head_v[h], &keys)?)
            };
            let qb = tape.slice_rows(per_head_q[h], qr.start - q_off, qr.len())?;
            let scores = tape.matmul_nt(qb, kb)?;
            // key_set only holds this block and shared keys, so the mask
            // predicate reduces to causality here.
            debug_assert!(qr.clone().all(|i| keys.iter().all(|&j| mask.allowed(i, j) == (j <= i))));
            let mut allowed = Vec::with_capacity(qr.len() * keys.len());
            for i in qr.clone() {
                allowed.extend(keys.iter().map(|&j| j <= i));
            }
            let probs = tape.softmax_rows_masked(scores, &allowed)?;
            blocks.push(tape.matmul(probs, vb)?);
        }
        head_cols.push(tape.concat_rows(&blocks)?);
    }
    tape.concat_cols(&head_cols)
}

/// Attention of `queries` (the newest `queries.rows` positions) over a
/// cached layer under `mask`.
pub fn attend(queries: &Tensor, kv: &LayerKv, heads: usize, mask: &BlockSparseMask) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let k = tape.constant(kv.keys.clone());
    let v = tape.constant(kv.values.clone());
    let out = attend_on_tape(&mut tape, q, k, v, heads, mask)?;
    Ok(tape.value(out).clone())
}
