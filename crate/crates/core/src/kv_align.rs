//! KV-cache realignment between heterogeneous prefill and decode instances.
//!
//! A shard is a dense 4-D tensor over the axes `layer`, `kv_head`, `token`
//! and `head_dim`, stored in a vendor-specific axis order. The token axis is
//! padded with zeros up to a whole number of page-attention blocks; only the
//! first `valid_tokens` tokens carry data.
//!
//! Transfers go through a canonical wire order `(layer, kv_head, token,
//! head_dim)`: the sender flattens into it, the receiver restores from it
//! into its own order. Tensor-parallel shards are head-contiguous, so rank
//! `r` of degree `tp` owns heads `[r*H/tp, (r+1)*H/tp)`.
//!
//! Elements are opaque `dtype_bytes`-wide little-endian values. The only
//! value-level transform is [`cast_dtype`] between IEEE half and single
//! precision.
//!
//! # Shard file format
//!
//! [`encode_shard`] writes a 56-byte little-endian header followed by the
//! payload:
//!
//! | offset | size | field                                          |
//! |-------:|-----:|------------------------------------------------|
//! | 0      | 4    | magic `b"KVSH"`                                |
//! | 4      | 2    | format version (`1`)                           |
//! | 6      | 1    | `dtype_bytes`                                  |
//! | 7      | 1    | reserved, zero                                 |
//! | 8      | 4    | axis order, outermost first (0 layer, 1 kv_head, 2 token, 3 head_dim) |
//! | 12     | 4    | `tp_rank`                                      |
//! | 16     | 4    | `tp_degree`                                    |
//! | 20     | 4    | first kv head (inclusive)                      |
//! | 24     | 4    | last kv head (exclusive)                       |
//! | 28     | 4    | `num_layers`                                   |
//! | 32     | 4    | `head_dim`                                     |
//! | 36     | 4    | `valid_tokens`                                 |
//! | 40     | 4    | `block_size`                                   |
//! | 44     | 4    | reserved, zero                                 |
//! | 48     | 8    | payload length in bytes                        |
//! | 56     | n    | payload                                        |

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("buffer length {actual} does not match expected {expected} bytes")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("tp degree {degree} does not divide num_kv_heads {heads}")]
    IndivisibleHeads { degree: u32, heads: u32 },
    #[error("missing source shard for tp rank {rank}")]
    MissingShard { rank: u32 },
    #[error("shard for tp rank {rank} is inconsistent: {reason}")]
    InconsistentShard { rank: u32, reason: String },
    #[error("unsupported dtype cast {src}-byte -> {dst}-byte")]
    UnsupportedCast { src: u32, dst: u32 },
    #[error("pipeline-parallel degrees differ (prefill {prefill}, decode {decode}); only tensor-parallel realignment is supported")]
    PipelineMismatch { prefill: u32, decode: u32 },
    #[error("malformed shard file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvAxis {
    Layer,
    KvHead,
    Token,
    HeadDim,
}

impl KvAxis {
    pub const CANONICAL: [KvAxis; 4] = [KvAxis::Layer, KvAxis::KvHead, KvAxis::Token, KvAxis::HeadDim];

    pub fn canonical_order() -> Vec<KvAxis> {
        Self::CANONICAL.to_vec()
    }

    fn index(self) -> usize {
        self as usize
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::CANONICAL.get(code as usize).copied()
    }

    /// Returns the order as an array if `axes` is a permutation of all four axes.
    pub fn order_from_slice(axes: &[KvAxis]) -> Option<[KvAxis; 4]> {
        let order: [KvAxis; 4] = axes.try_into().ok()?;
        let mut seen = [false; 4];
        for a in order {
            if std::mem::replace(&mut seen[a.index()], true) {
                return None;
            }
        }
        Some(order)
    }

    /// All 24 axis orders, in lexicographic order.
    pub fn all_orders() -> Vec<[KvAxis; 4]> {
        let mut out = Vec::with_capacity(24);
        for a in Self::CANONICAL {
            for b in Self::CANONICAL {
                for c in Self::CANONICAL {
                    for d in Self::CANONICAL {
                        if let Some(o) = Self::order_from_slice(&[a, b, c, d]) {
                            out.push(o);
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for KvAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KvAxis::Layer => "layer",
            KvAxis::KvHead => "kv_head",
            KvAxis::Token => "token",
            KvAxis::HeadDim => "head_dim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KvLayout {
    pub axis_order: [KvAxis; 4],
    pub block_size: u32,
    pub dtype_bytes: u32,
}

impl KvLayout {
    pub fn new(axis_order: [KvAxis; 4], block_size: u32, dtype_bytes: u32) -> Result<Self, AlignError> {
        let layout = KvLayout { axis_order, block_size, dtype_bytes };
        layout.validate()?;
        Ok(layout)
    }

    pub fn canonical(block_size: u32, dtype_bytes: u32) -> Self {
        KvLayout { axis_order: KvAxis::CANONICAL, block_size, dtype_bytes }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if KvAxis::order_from_slice(&self.axis_order).is_none() {
            return Err(AlignError::InvalidLayout(format!(
                "axis order {:?} is not a permutation",
                self.axis_order
            )));
        }
        if self.block_size == 0 {
            return Err(AlignError::InvalidLayout("block_size must be >= 1".into()));
        }
        if self.dtype_bytes == 0 {
            return Err(AlignError::InvalidLayout("dtype_bytes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.axis_order == KvAxis::CANONICAL
    }

    /// Token count rounded up to whole blocks.
    pub fn padded_tokens(&self, valid_tokens: u32) -> u32 {
        valid_tokens.div_ceil(self.block_size) * self.block_size
    }

    pub fn with_order(self, axis_order: [KvAxis; 4]) -> Self {
        KvLayout { axis_order, ..self }
    }
}

/// Extents of a physical KV tensor, indexed by axis (tokens already padded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvShape {
    pub layers: u32,
    pub heads: u32,
    pub tokens: u32,
    pub head_dim: u32,
}

impl KvShape {
    fn extents(&self) -> [usize; 4] {
        [self.layers as usize, self.heads as usize, self.tokens as usize, self.head_dim as usize]
    }

    pub fn elements(&self) -> usize {
        self.extents().iter().product()
    }

    /// Element strides per axis (indexed like [`KvAxis::CANONICAL`]) for the given order.
    fn strides(&self, order: &[KvAxis; 4]) -> [usize; 4] {
        let ext = self.extents();
        let mut strides = [0; 4];
        let mut acc = 1;
        for axis in order.iter().rev() {
            strides[axis.index()] = acc;
            acc *= ext[axis.index()];
        }
        strides
    }
}

/// Copies the box `extent` starting at `src_origin` in `src` to `dst_origin` in `dst`.
/// Strides and origins are in elements, indexed by canonical axis.
#[allow(clippy::too_many_arguments)]
fn copy_box(
    src: &[u8],
    src_strides: [usize; 4],
    src_origin: [usize; 4],
    dst: &mut [u8],
    dst_strides: [usize; 4],
    dst_origin: [usize; 4],
    extent: [usize; 4],
    elem: usize,
) {
    let offset = |strides: [usize; 4], idx: [usize; 4]| -> usize {
        strides.iter().zip(idx).map(|(s, i)| s * i).sum()
    };
    let contiguous = src_strides[3] == 1 && dst_strides[3] == 1;
    for l in 0..extent[0] {
        for h in 0..extent[1] {
            for t in 0..extent[2] {
                let s = offset(src_strides, [src_origin[0] + l, src_origin[1] + h, src_origin[2] + t, src_origin[3]]);
                let d = offset(dst_strides, [dst_origin[0] + l, dst_origin[1] + h, dst_origin[2] + t, dst_origin[3]]);
                if contiguous {
                    let n = extent[3] * elem;
                    dst[d * elem..d * elem + n].copy_from_slice(&src[s * elem..s * elem + n]);
                } else {
                    for k in 0..extent[3] {
                        let (si, di) = ((s + k * src_strides[3]) * elem, (d + k * dst_strides[3]) * elem);
                        dst[di..di + elem].copy_from_slice(&src[si..si + elem]);
                    }
                }
            }
        }
    }
}

fn permute(src: &[u8], from: &[KvAxis; 4], to: &[KvAxis; 4], shape: KvShape, elem: usize) -> Vec<u8> {
    if from == to {
        return src.to_vec();
    }
    let mut out = vec![0u8; src.len()];
    copy_box(src, shape.strides(from), [0; 4], &mut out, shape.strides(to), [0; 4], shape.extents(), elem);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvShard {
    pub tp_rank: u32,
    pub tp_degree: u32,
    pub kv_head_range: Range<u32>,
    pub num_layers: u32,
    pub head_dim: u32,
    pub valid_tokens: u32,
    pub layout: KvLayout,
    pub payload: Vec<u8>,
}

impl KvShard {
    /// Builds a shard, checking the payload length against the padded shape.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tp_rank: u32,
        tp_degree: u32,
        kv_head_range: Range<u32>,
        num_layers: u32,
        head_dim: u32,
        valid_tokens: u32,
        layout: KvLayout,
        payload: Vec<u8>,
    ) -> Result<Self, AlignError> {
        let shard = KvShard { tp_rank, tp_degree, kv_head_range, num_layers, head_dim, valid_tokens, layout, payload };
        shard.validate()?;
        Ok(shard)
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        self.layout.validate()?;
        if self.tp_degree == 0 || self.tp_rank >= self.tp_degree {
            return Err(AlignError::InconsistentShard {
                rank: self.tp_rank,
                reason: format!("rank outside degree {}", self.tp_degree),
            });
        }
        if self.kv_head_range.start > self.kv_head_range.end {
            return Err(AlignError::InconsistentShard { rank: self.tp_rank, reason: "inverted head range".into() });
        }
        let expected = self.byte_len();
        if self.payload.len() != expected {
            return Err(AlignError::LengthMismatch { expected, actual: self.payload.len() });
        }
        Ok(())
    }

    pub fn shape(&self) -> KvShape {
        KvShape {
            layers: self.num_layers,
            heads: self.kv_head_range.len() as u32,
            tokens: self.layout.padded_tokens(self.valid_tokens),
            head_dim: self.head_dim,
        }
    }

    fn byte_len(&self) -> usize {
        self.shape().elements() * self.layout.dtype_bytes as usize
    }

    /// Reads one element by logical index (head index is absolute).
    pub fn element(&self, layer: u32, head: u32, token: u32, dim: u32) -> &[u8] {
        let strides = self.shape().strides(&self.layout.axis_order);
        let idx = [layer, head - self.kv_head_range.start, token, dim];
        let off: usize = strides.iter().zip(idx).map(|(s, i)| s * i as usize).sum();
        let elem = self.layout.dtype_bytes as usize;
        &self.payload[off * elem..(off + 1) * elem]
    }
}

/// Linearizes a shard into canonical axis order. The returned layout is the
/// shard's own, which together with [`KvShard::shape`] inverts the operation
/// through [`restore`].
pub fn flatten(shard: &KvShard) -> (Vec<u8>, KvLayout) {
    let bytes = permute(
        &shard.payload,
        &shard.layout.axis_order,
        &KvAxis::CANONICAL,
        shard.shape(),
        shard.layout.dtype_bytes as usize,
    );
    (bytes, shard.layout)
}

/// Lays a canonical-order buffer out in `target`'s axis order.
pub fn restore(buffer: &[u8], target: &KvLayout, shape: KvShape) -> Result<Vec<u8>, AlignError> {
    target.validate()?;
    let expected = shape.elements() * target.dtype_bytes as usize;
    if buffer.len() != expected {
        return Err(AlignError::LengthMismatch { expected, actual: buffer.len() });
    }
    Ok(permute(buffer, &KvAxis::CANONICAL, &target.axis_order, shape, target.dtype_bytes as usize))
}

/// Logical dimensions of a KV tensor apart from its token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KvDims {
    pub layers: u32,
    pub heads: u32,
    pub head_dim: u32,
}

impl KvDims {
    fn with_tokens(self, tokens: u32) -> KvShape {
        KvShape { layers: self.layers, heads: self.heads, tokens, head_dim: self.head_dim }
    }
}

/// Re-pads the token axis from `src`'s block size to `dst`'s. Tokens past
/// `valid_tokens` are never read; destination padding is zero-filled.
pub fn remap_block_size(
    payload: &[u8],
    src: &KvLayout,
    dst: &KvLayout,
    valid_tokens: u32,
    dims: KvDims,
) -> Result<Vec<u8>, AlignError> {
    src.validate()?;
    dst.validate()?;
    if src.axis_order != dst.axis_order || src.dtype_bytes != dst.dtype_bytes {
        return Err(AlignError::InvalidLayout("layouts may differ only in block_size".into()));
    }
    let src_shape = dims.with_tokens(src.padded_tokens(valid_tokens));
    let elem = src.dtype_bytes as usize;
    if payload.len() != src_shape.elements() * elem {
        return Err(AlignError::LengthMismatch { expected: src_shape.elements() * elem, actual: payload.len() });
    }
    if src.block_size == dst.block_size {
        return Ok(payload.to_vec());
    }
    let dst_shape = dims.with_tokens(dst.padded_tokens(valid_tokens));
    let mut out = vec![0u8; dst_shape.elements() * elem];
    let mut extent = src_shape.extents();
    extent[2] = valid_tokens as usize;
    copy_box(
        payload,
        src_shape.strides(&src.axis_order),
        [0; 4],
        &mut out,
        dst_shape.strides(&dst.axis_order),
        [0; 4],
        extent,
        elem,
    );
    Ok(out)
}

/// Converts between 2-byte (IEEE binary16) and 4-byte (binary32) floats.
/// Widening is exact; narrowing rounds to nearest, ties to even. Equal
/// widths of any size pass through unchanged.
pub fn cast_dtype(payload: &[u8], src_bytes: u32, dst_bytes: u32) -> Result<Vec<u8>, AlignError> {
    if src_bytes == dst_bytes && src_bytes > 0 {
        return Ok(payload.to_vec());
    }
    let supported = |b| b == 2 || b == 4;
    if !supported(src_bytes) || !supported(dst_bytes) {
        return Err(AlignError::UnsupportedCast { src: src_bytes, dst: dst_bytes });
    }
    if !payload.len().is_multiple_of(src_bytes as usize) {
        return Err(AlignError::LengthMismatch {
            expected: payload.len() / src_bytes as usize * src_bytes as usize,
            actual: payload.len(),
        });
    }
    Ok(match (src_bytes, dst_bytes) {
        (2, 4) => payload
            .chunks_exact(2)
            .flat_map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32().to_le_bytes())
            .collect(),
        (4, 2) => payload
            .chunks_exact(4)
            .flat_map(|c| f16::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).to_le_bytes())
            .collect(),
        _ => payload.to_vec(),
    })
}

/// One copy in a repartition: heads `src_heads` (absolute indices) of source
/// rank `src_rank` land at head offset `dst_head_offset` inside destination
/// rank `dst_rank`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub src_rank: u32,
    pub src_heads: Range<u32>,
    pub dst_rank: u32,
    pub dst_head_offset: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepartitionKind {
    Identity,
    Merge,
    Split,
    General,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepartitionPlan {
    pub src_degree: u32,
    pub dst_degree: u32,
    pub num_kv_heads: u32,
    /// Sorted by `(dst_rank, dst_head_offset)`.
    pub entries: Vec<PlanEntry>,
}

fn head_range(rank: u32, degree: u32, heads: u32) -> Range<u32> {
    let per = heads / degree;
    rank * per..(rank + 1) * per
}

impl RepartitionPlan {
    pub fn kind(&self) -> RepartitionKind {
        use std::cmp::Ordering::*;
        match self.src_degree.cmp(&self.dst_degree) {
            Equal => RepartitionKind::Identity,
            Greater if self.src_degree.is_multiple_of(self.dst_degree) => RepartitionKind::Merge,
            Less if self.dst_degree.is_multiple_of(self.src_degree) => RepartitionKind::Split,
            _ => RepartitionKind::General,
        }
    }

    pub fn src_heads(&self, rank: u32) -> Range<u32> {
        head_range(rank, self.src_degree, self.num_kv_heads)
    }

    pub fn dst_heads(&self, rank: u32) -> Range<u32> {
        head_range(rank, self.dst_degree, self.num_kv_heads)
    }

    pub fn entries_for(&self, dst_rank: u32) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(move |e| e.dst_rank == dst_rank)
    }

    /// Checks that every destination shard is covered exactly once and that
    /// no entry spans two source shards.
    pub fn validate(&self) -> Result<(), AlignError> {
        for dst in 0..self.dst_degree {
            let width = self.dst_heads(dst).len() as u32;
            let mut covered = vec![false; width as usize];
            for e in self.entries_for(dst) {
                let src = self.src_heads(e.src_rank);
                if e.src_heads.start < src.start || e.src_heads.end > src.end || e.src_heads.is_empty() {
                    return Err(AlignError::InvalidLayout(format!(
                        "entry {e:?} is not inside source rank {}",
                        e.src_rank
                    )));
                }
                for k in 0..e.src_heads.len() as u32 {
                    let slot = (e.dst_head_offset + k) as usize;
                    if slot >= covered.len() || std::mem::replace(&mut covered[slot], true) {
                        return Err(AlignError::InvalidLayout(format!("destination rank {dst} slot {slot} covered twice or out of range")));
                    }
                    // The head landing there must be the one the destination owns.
                    if e.src_heads.start + k != self.dst_heads(dst).start + e.dst_head_offset + k {
                        return Err(AlignError::InvalidLayout(format!("entry {e:?} misplaces heads")));
                    }
                }
            }
            if covered.iter().any(|c| !c) {
                return Err(AlignError::InvalidLayout(format!("destination rank {dst} not fully covered")));
            }
        }
        Ok(())
    }
}

/// Plans which head ranges each decode rank reads from which prefill rank.
///
/// Works by intersecting head ranges, which reduces to whole-shard merges when
/// `tp_p` is a multiple of `tp_d` and to contiguous splits in the opposite case.
pub fn plan_repartition(tp_p: u32, tp_d: u32, num_kv_heads: u32) -> Result<RepartitionPlan, AlignError> {
    for degree in [tp_p, tp_d] {
        if degree == 0 || !num_kv_heads.is_multiple_of(degree) {
            return Err(AlignError::IndivisibleHeads { degree, heads: num_kv_heads });
        }
    }
    let mut entries = Vec::new();
    for dst in 0..tp_d {
        let want = head_range(dst, tp_d, num_kv_heads);
        for src in 0..tp_p {
            let have = head_range(src, tp_p, num_kv_heads);
            let lo = want.start.max(have.start);
            let hi = want.end.min(have.end);
            if lo < hi {
                entries.push(PlanEntry { src_rank: src, src_heads: lo..hi, dst_rank: dst, dst_head_offset: lo - want.start });
            }
        }
    }
    Ok(RepartitionPlan { src_degree: tp_p, dst_degree: tp_d, num_kv_heads, entries })
}

/// Rejects transfers between instances whose pipeline-parallel degrees differ.
pub fn check_pipeline_alignment(pp_p: u32, pp_d: u32) -> Result<(), AlignError> {
    if pp_p == pp_d {
        Ok(())
    } else {
        Err(AlignError::PipelineMismatch { prefill: pp_p, decode: pp_d })
    }
}

/// Realigns prefill shards into decode shards with layout `target`
/// (axis order, block size and dtype).
pub fn apply_repartition(
    shards: &[KvShard],
    plan: &RepartitionPlan,
    target: &KvLayout,
) -> Result<Vec<KvShard>, AlignError> {
    target.validate()?;
    let by_rank: BTreeMap<u32, &KvShard> = shards.iter().map(|s| (s.tp_rank, s)).collect();
    let mut sources = Vec::with_capacity(plan.src_degree as usize);
    for rank in 0..plan.src_degree {
        let shard = *by_rank.get(&rank).ok_or(AlignError::MissingShard { rank })?;
        shard.validate()?;
        let inconsistent = |reason: String| AlignError::InconsistentShard { rank, reason };
        if shard.tp_degree != plan.src_degree {
            return Err(inconsistent(format!("degree {} but plan expects {}", shard.tp_degree, plan.src_degree)));
        }
        if shard.kv_head_range != plan.src_heads(rank) {
            return Err(inconsistent(format!("heads {:?} but plan expects {:?}", shard.kv_head_range, plan.src_heads(rank))));
        }
        sources.push(shard);
    }
    let first = sources[0];
    for s in &sources[1..] {
        if (s.num_layers, s.head_dim, s.valid_tokens, s.layout.dtype_bytes)
            != (first.num_layers, first.head_dim, first.valid_tokens, first.layout.dtype_bytes)
        {
            return Err(AlignError::InconsistentShard { rank: s.tp_rank, reason: "dimensions differ from rank 0".into() });
        }
    }
    let (layers, head_dim, valid) = (first.num_layers, first.head_dim, first.valid_tokens);

    // Source shards in canonical order, target block size and dtype.
    let staged: Vec<Vec<u8>> = sources
        .iter()
        .map(|s| {
            let (flat, layout) = flatten(s);
            let canon = layout.with_order(KvAxis::CANONICAL);
            let dims = KvDims { layers, heads: s.kv_head_range.len() as u32, head_dim };
            let reblocked = remap_block_size(&flat, &canon, &KvLayout { block_size: target.block_size, ..canon }, valid, dims)?;
            cast_dtype(&reblocked, layout.dtype_bytes, target.dtype_bytes)
        })
        .collect::<Result<_, _>>()?;

    let tokens = target.padded_tokens(valid);
    let elem = target.dtype_bytes as usize;
    (0..plan.dst_degree)
        .map(|dst| {
            let heads = plan.dst_heads(dst);
            let shape = KvShape { layers, heads: heads.len() as u32, tokens, head_dim };
            let mut canon = vec![0u8; shape.elements() * elem];
            for e in plan.entries_for(dst) {
                let src_range = plan.src_heads(e.src_rank);
                let src_shape = KvShape { heads: src_range.len() as u32, ..shape };
                copy_box(
                    &staged[e.src_rank as usize],
                    src_shape.strides(&KvAxis::CANONICAL),
                    [0, (e.src_heads.start - src_range.start) as usize, 0, 0],
                    &mut canon,
                    shape.strides(&KvAxis::CANONICAL),
                    [0, e.dst_head_offset as usize, 0, 0],
                    [layers as usize, e.src_heads.len(), tokens as usize, head_dim as usize],
                    elem,
                );
            }
            let payload = restore(&canon, target, shape)?;
            KvShard::new(dst, plan.dst_degree, heads, layers, head_dim, valid, *target, payload)
        })
        .collect()
}

const MAGIC: &[u8; 4] = b"KVSH";
const VERSION: u16 = 1;
pub const SHARD_HEADER_LEN: usize = 56;

/// Serializes a shard using the format documented at module level.
pub fn encode_shard(shard: &KvShard) -> Vec<u8> {
    let mut out = Vec::with_capacity(SHARD_HEADER_LEN + shard.payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(shard.layout.dtype_bytes as u8);
    out.push(0);
    out.extend(shard.layout.axis_order.iter().map(|a| a.index() as u8));
    for v in [
        shard.tp_rank,
        shard.tp_degree,
        shard.kv_head_range.start,
        shard.kv_head_range.end,
        shard.num_layers,
        shard.head_dim,
        shard.valid_tokens,
        shard.layout.block_size,
        0,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(shard.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&shard.payload);
    out
}

pub fn decode_shard(bytes: &[u8]) -> Result<KvShard, AlignError> {
    let malformed = |m: &str| AlignError::Malformed(m.to_string());
    if bytes.len() < SHARD_HEADER_LEN {
        return Err(malformed("shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(AlignError::Malformed(format!("unsupported version {version}")));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let mut order = [KvAxis::Layer; 4];
    for (slot, code) in order.iter_mut().zip(&bytes[8..12]) {
        *slot = KvAxis::from_code(*code).ok_or_else(|| malformed("bad axis code"))?;
    }
    let layout = KvLayout::new(order, u32_at(40), bytes[6] as u32)?;
    let len = u64::from_le_bytes(bytes[48..56].try_into().unwrap()) as usize;
    if bytes.len() != SHARD_HEADER_LEN + len {
        return Err(AlignError::LengthMismatch { expected: SHARD_HEADER_LEN + len, actual: bytes.len() });
    }
    KvShard::new(
        u32_at(12),
        u32_at(16),
        u32_at(20)..u32_at(24),
        u32_at(28),
        u32_at(32),
        u32_at(36),
        layout,
        bytes[SHARD_HEADER_LEN..].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Element value encoding its logical coordinates, one byte per element.
    fn tag(l: u32, h: u32, t: u32, d: u32) -> u8 {
        (l * 64 + h * 16 + t * 2 + d) as u8
    }

    /// Builds a shard by evaluating `value` at every logical index, using an
    /// explicit nested loop per physical position.
    fn build_shard(
        rank: u32,
        degree: u32,
        heads: Range<u32>,
        layers: u32,
        head_dim: u32,
        valid: u32,
        layout: KvLayout,
        value: impl Fn(u32, u32, u32, u32) -> Vec<u8>,
    ) -> KvShard {
        let tokens = layout.padded_tokens(valid);
        let ext = |a: KvAxis| match a {
            KvAxis::Layer => layers,
            KvAxis::KvHead => heads.len() as u32,
            KvAxis::Token => tokens,
            KvAxis::HeadDim => head_dim,
        };
        let o = layout.axis_order;
        let mut payload = Vec::new();
        for i0 in 0..ext(o[0]) {
            for i1 in 0..ext(o[1]) {
                for i2 in 0..ext(o[2]) {
                    for i3 in 0..ext(o[3]) {
                        let mut idx = [0u32; 4];
                        for (a, i) in o.iter().zip([i0, i1, i2, i3]) {
                            idx[a.index()] = i;
                        }
                        if idx[2] < valid {
                            payload.extend(value(idx[0], heads.start + idx[1], idx[2], idx[3]));
                        } else {
                            payload.extend(vec![0u8; layout.dtype_bytes as usize]);
                        }
                    }
                }
            }
        }
        KvShard::new(rank, degree, heads, layers, head_dim, valid, layout, payload).unwrap()
    }

    #[test]
    fn flatten_canonical_is_identity() {
        let layout = KvLayout::canonical(2, 1);
        let s = build_shard(0, 1, 0..2, 2, 2, 2, layout, |l, h, t, d| vec![tag(l, h, t, d)]);
        assert_eq!(flatten(&s).0, s.payload);
    }

    #[test]
    fn flatten_token_major_matches_nested_loops() {
        use KvAxis::*;
        let layout = KvLayout::new([Token, Layer, KvHead, HeadDim], 1, 1).unwrap();
        let s = build_shard(0, 1, 0..2, 2, 1, 2, layout, |l, h, t, d| vec![tag(l, h, t, d)]);
        // Physical order is (token, layer, head).
        assert_eq!(s.payload, vec![tag(0, 0, 0, 0), tag(0, 1, 0, 0), tag(1, 0, 0, 0), tag(1, 1, 0, 0),
                                   tag(0, 0, 1, 0), tag(0, 1, 1, 0), tag(1, 0, 1, 0), tag(1, 1, 1, 0)]);
        let mut oracle = Vec::new();
        for l in 0..2 {
            for h in 0..2 {
                for t in 0..2 {
                    oracle.push(tag(l, h, t, 0));
                }
            }
        }
        assert_eq!(flatten(&s).0, oracle);
    }

    #[test]
    fn restore_length_mismatch() {
        let shape = KvShape { layers: 2, heads: 2, tokens: 2, head_dim: 1 };
        let err = restore(&[0u8; 7], &KvLayout::canonical(1, 1), shape).unwrap_err();
        assert_eq!(err, AlignError::LengthMismatch { expected: 8, actual: 7 });
        assert_eq!(restore(&[5u8; 8], &KvLayout::canonical(1, 1), shape).unwrap(), vec![5u8; 8]);
    }

    #[test]
    fn restore_composes_through_intermediate_layout() {
        let shape = KvShape { layers: 2, heads: 3, tokens: 2, head_dim: 2 };
        let canon: Vec<u8> = (0..shape.elements() as u8).collect();
        let orders = KvAxis::all_orders();
        for l1 in &orders {
            let mid = restore(&canon, &KvLayout::canonical(1, 1).with_order(*l1), shape).unwrap();
            let back = permute(&mid, l1, &KvAxis::CANONICAL, shape, 1);
            for l2 in &orders {
                let target = KvLayout::canonical(1, 1).with_order(*l2);
                assert_eq!(restore(&back, &target, shape).unwrap(), restore(&canon, &target, shape).unwrap());
            }
        }
    }

    #[test]
    fn plan_merge_four_to_two() {
        let plan = plan_repartition(4, 2, 8).unwrap();
        assert_eq!(plan.kind(), RepartitionKind::Merge);
        let srcs = |d| plan.entries_for(d).map(|e| e.src_rank).collect::<Vec<_>>();
        assert_eq!(srcs(0), vec![0, 1]);
        assert_eq!(srcs(1), vec![2, 3]);
        assert!(plan.entries.iter().all(|e| e.src_heads == plan.src_heads(e.src_rank)));
        plan.validate().unwrap();
    }

    #[test]
    fn plan_split_two_to_four() {
        let plan = plan_repartition(2, 4, 8).unwrap();
        assert_eq!(plan.kind(), RepartitionKind::Split);
        assert_eq!(plan.entries.len(), 4);
        for src in 0..2 {
            let parts: Vec<_> = plan.entries.iter().filter(|e| e.src_rank == src).map(|e| e.src_heads.clone()).collect();
            assert_eq!(parts, vec![src * 4..src * 4 + 2, src * 4 + 2..src * 4 + 4]);
        }
        plan.validate().unwrap();
    }

    #[test]
    fn plan_identity_and_general() {
        let plan = plan_repartition(4, 4, 8).unwrap();
        assert_eq!(plan.kind(), RepartitionKind::Identity);
        assert!(plan.entries.iter().all(|e| e.src_rank == e.dst_rank && e.dst_head_offset == 0));
        assert_eq!(plan.entries.len(), 4);

        let plan = plan_repartition(2, 3, 6).unwrap();
        assert_eq!(plan.kind(), RepartitionKind::General);
        plan.validate().unwrap();
        assert_eq!(plan.entries.iter().map(|e| e.src_heads.len()).sum::<usize>(), 6);

        assert_eq!(plan_repartition(3, 1, 8).unwrap_err(), AlignError::IndivisibleHeads { degree: 3, heads: 8 });
    }

    fn tp_shards(degree: u32, heads: u32, layers: u32, head_dim: u32, valid: u32, layout: KvLayout) -> Vec<KvShard> {
        (0..degree)
            .map(|r| build_shard(r, degree, head_range(r, degree, heads), layers, head_dim, valid, layout, |l, h, t, d| vec![tag(l, h, t, d)]))
            .collect()
    }

    #[test]
    fn identity_repartition_is_byte_identical() {
        use KvAxis::*;
        let layout = KvLayout::new([HeadDim, Token, Layer, KvHead], 4, 1).unwrap();
        let shards = tp_shards(2, 4, 2, 2, 6, layout);
        let out = apply_repartition(&shards, &plan_repartition(2, 2, 4).unwrap(), &layout).unwrap();
        assert_eq!(out, shards);
    }

    #[test]
    fn merge_then_split_round_trips() {
        let layout = KvLayout::canonical(4, 1);
        let shards = tp_shards(4, 8, 2, 2, 5, layout);
        let merged = apply_repartition(&shards, &plan_repartition(4, 2, 8).unwrap(), &layout).unwrap();
        let split = apply_repartition(&merged, &plan_repartition(2, 4, 8).unwrap(), &layout).unwrap();
        assert_eq!(split, shards);
    }

    #[test]
    fn merge_with_block_change_preserves_tokens() {
        use KvAxis::*;
        let src = KvLayout::new([Token, KvHead, Layer, HeadDim], 16, 1).unwrap();
        let dst = KvLayout::new([Layer, Token, KvHead, HeadDim], 8, 1).unwrap();
        let shards = tp_shards(4, 8, 2, 2, 13, src);
        let out = apply_repartition(&shards, &plan_repartition(4, 2, 8).unwrap(), &dst).unwrap();
        for s in &out {
            assert_eq!(s.shape().tokens, 16);
            for l in 0..2 {
                for h in s.kv_head_range.clone() {
                    for t in 0..16 {
                        for d in 0..2 {
                            let want = if t < 13 { tag(l, h, t, d) } else { 0 };
                            assert_eq!(s.element(l, h, t, d), &[want]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn missing_shard_named() {
        let layout = KvLayout::canonical(1, 1);
        let mut shards = tp_shards(4, 8, 1, 1, 2, layout);
        shards.remove(2);
        let err = apply_repartition(&shards, &plan_repartition(4, 2, 8).unwrap(), &layout).unwrap_err();
        assert_eq!(err, AlignError::MissingShard { rank: 2 });
    }

    #[test]
    fn block_remap_four_to_two() {
        let src = KvLayout::canonical(4, 1);
        let dst = KvLayout::canonical(2, 1);
        let dims = KvDims { layers: 1, heads: 1, head_dim: 1 };
        let payload = vec![1, 2, 3, 4, 5, 6, 0, 0];
        let out = remap_block_size(&payload, &src, &dst, 6, dims).unwrap();
        assert_eq!(out, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn block_remap_two_to_four_pads() {
        let src = KvLayout::canonical(2, 1);
        let dst = KvLayout::canonical(4, 1);
        let dims = KvDims { layers: 1, heads: 1, head_dim: 1 };
        let out = remap_block_size(&[1, 2, 3, 4, 5, 6], &src, &dst, 6, dims).unwrap();
        assert_eq!(out, vec![1, 2, 3, 4, 5, 6, 0, 0]);
        // Garbage in the source padding must not leak.
        let src4 = KvLayout::canonical(4, 1);
        let dst8 = KvLayout::canonical(8, 1);
        let out = remap_block_size(&[1, 2, 3, 9, 9, 9, 9, 9], &KvLayout::canonical(8, 1), &src4, 3, dims).unwrap();
        assert_eq!(out, vec![1, 2, 3, 0]);
        assert_eq!(remap_block_size(&[1, 2, 3, 0], &src4, &dst8, 3, dims).unwrap(), vec![1, 2, 3, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn block_remap_rejects_order_change() {
        use KvAxis::*;
        let a = KvLayout::canonical(2, 1);
        let b = KvLayout::new([Token, Layer, KvHead, HeadDim], 4, 1).unwrap();
        let dims = KvDims { layers: 1, heads: 1, head_dim: 1 };
        assert!(matches!(remap_block_size(&[0, 0], &a, &b, 2, dims), Err(AlignError::InvalidLayout(_))));
    }

    #[test]
    fn cast_same_and_unsupported() {
        let p = vec![1u8, 2, 3, 4];
        assert_eq!(cast_dtype(&p, 2, 2).unwrap(), p);
        assert_eq!(cast_dtype(&p, 4, 4).unwrap(), p);
        assert_eq!(cast_dtype(&p, 1, 1).unwrap(), p);
        assert_eq!(cast_dtype(&p, 1, 2).unwrap_err(), AlignError::UnsupportedCast { src: 1, dst: 2 });
        assert_eq!(cast_dtype(&p, 4, 2).unwrap().len() / 2, 1);
        assert_eq!(cast_dtype(&p, 2, 4).unwrap().len() / 4, 2);
    }

    #[test]
    fn narrowing_rounds_half_to_even() {
        // 1 + 2^-11 sits exactly between 1.0 and the next half (1 + 2^-10).
        let mid = 1.0f32 + 2f32.powi(-11);
        let out = cast_dtype(&mid.to_le_bytes(), 4, 2).unwrap();
        assert_eq!(u16::from_le_bytes([out[0], out[1]]), 0x3c00);
        let mid_odd = 1.0f32 + 3.0 * 2f32.powi(-11);
        let out = cast_dtype(&mid_odd.to_le_bytes(), 4, 2).unwrap();
        assert_eq!(u16::from_le_bytes([out[0], out[1]]), 0x3c02);
    }

    #[test]
    fn pipeline_mismatch_rejected() {
        assert!(check_pipeline_alignment(2, 2).is_ok());
        assert_eq!(check_pipeline_alignment(1, 2).unwrap_err(), AlignError::PipelineMismatch { prefill: 1, decode: 2 });
    }

    #[test]
    fn shard_file_header_layout() {
        use KvAxis::*;
        let layout = KvLayout::new([Token, Layer, KvHead, HeadDim], 4, 2).unwrap();
        let s = build_shard(1, 2, 2..4, 1, 1, 3, layout, |_, h, t, _| vec![h as u8, t as u8]);
        let bytes = encode_shard(&s);
        assert_eq!(&bytes[0..4], b"KVSH");
        assert_eq!(&bytes[4..8], &[1, 0, 2, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 1, 3]);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &[2, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(&bytes[40..44], &4u32.to_le_bytes());
        assert_eq!(&bytes[48..56], &16u64.to_le_bytes());
        assert_eq!(decode_shard(&bytes).unwrap(), s);
        assert!(matches!(decode_shard(&bytes[..bytes.len() - 1]), Err(AlignError::LengthMismatch { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_shard(&bad), Err(AlignError::Malformed(_))));
    }

    fn arb_layout() -> impl Strategy<Value = KvLayout> {
        (0usize..24, 1u32..5, prop::sample::select(vec![1u32, 2, 4]))
            .prop_map(|(o, b, d)| KvLayout::new(KvAxis::all_orders()[o], b, d).unwrap())
    }

    proptest! {
        #[test]
        fn flatten_restore_round_trip(layout in arb_layout(), layers in 1u32..4, heads in 1u32..4,
                                      valid in 0u32..9, head_dim in 1u32..4, seed in any::<u64>()) {
            let n = (layers * heads * layout.padded_tokens(valid) * head_dim * layout.dtype_bytes) as usize;
            let payload: Vec<u8> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let s = KvShard::new(0, 1, 0..heads, layers, head_dim, valid, layout, payload).unwrap();
            let (flat, desc) = flatten(&s);
            prop_assert_eq!(restore(&flat, &desc, s.shape()).unwrap(), s.payload);
        }

        #[test]
        fn shard_codec_round_trip(layout in arb_layout(), valid in 0u32..9, seed in any::<u8>()) {
            let n = (2 * layout.padded_tokens(valid) * layout.dtype_bytes) as usize;
            let s = KvShard::new(0, 4, 2..3, 2, 1, valid, layout, vec![seed; n]).unwrap();
            prop_assert_eq!(decode_shard(&encode_shard(&s)).unwrap(), s);
        }
    }
}
