"""Frame-blocked attention masks, multi-head attention and the KV cache."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import BoundsError, ConfigError, ContractError, DataIOError, DimensionError, OrderingError
from .tensor import Tensor


class MaskKind(str, enum.Enum):
    CAUSAL_FULL2 = "causal_full2"
    FULL = "full"
    MIXED = "mixed"


@dataclass(frozen=True)
class FrameLayout:
    tokens_per_frame: int
    num_frames: int

    @property
    def num_tokens(self) -> int:
        return self.tokens_per_frame * self.num_frames


@dataclass(frozen=True)
class AttentionMask:
    kind: MaskKind
    layout: FrameLayout
    allow: np.ndarray = field(repr=False)
    prefix_frames: int | None = None

    def token_mask(self) -> np.ndarray:
        t = self.layout.tokens_per_frame
        return np.kron(self.allow, np.ones((t, t), dtype=bool)).astype(bool)


def build_mask(kind, layout: FrameLayout, prefix_frames: int | None = None) -> AttentionMask:
    """Frame-level allow matrix; ``allow[i, j]`` means frame i may read frame j."""
    try:
        kind = MaskKind(kind)
    except ValueError:
        raise ConfigError(f"unknown mask kind {kind!r}") from None
    n = layout.num_frames
    if n < 1:
        raise ConfigError("mask needs at least one frame")
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    if kind is MaskKind.FULL:
        allow = np.ones((n, n), dtype=bool)
    elif kind is MaskKind.CAUSAL_FULL2:
        allow = (j <= i) | ((i < 2) & (j < 2))
    else:
        if prefix_frames is None:
            raise ConfigError("mixed mask requires prefix_frames")
        if not 0 <= prefix_frames <= n:
            raise ConfigError(f"prefix_frames={prefix_frames} outside [0, {n}]")
        p = prefix_frames
        allow = (j <= i) | ((i < p) & (j < p))
    allow.flags.writeable = False
    return AttentionMask(kind, layout, allow, prefix_frames if kind is MaskKind.MIXED else None)


class AttentionWeights(NamedTuple):
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[n, d]`` -> ``[heads, n, d/heads]``."""
    n, d = x.shape
    if d % heads:
        raise ConfigError(f"d_model={d} not divisible by heads={heads}")
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def attend(qh: Tensor, kh: Tensor, vh: Tensor, token_mask=None) -> Tensor:
    """Scaled dot-product on head-split tensors ``[..., n, dh]``."""
    dh = qh.shape[-1]
    scores = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dh))
    return T.matmul(T.softmax_rows(scores, token_mask), vh)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None,
                        weights: AttentionWeights | None = None) -> Tensor:
    """Masked multi-head attention over token rows.

    ``mask`` may be an :class:`AttentionMask` (expanded to tokens) or a boolean
    token matrix.  With ``weights`` the inputs go through the q/k/v projections
    and the concatenated heads through the output projection; without, the
    projections are identities.
    """
    if q.shape[-1] % heads:
        raise ConfigError(f"d_model={q.shape[-1]} not divisible by heads={heads}")
    if weights is not None:
        q = T.linear(q, weights.wq, weights.bq)
        k = T.linear(k, weights.wk, weights.bk)
        v = T.linear(v, weights.wv, weights.bv)
    tok = mask.token_mask() if isinstance(mask, AttentionMask) else mask
    out = merge_heads(attend(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads), tok))
    if weights is not None:
        out = T.linear(out, weights.wo, weights.bo)
    return out


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


class KVCache:
    """Per-layer, per-frame key/value blocks shaped ``[tokens, heads, d_head]``.

    Blocks hold the projected keys and values that enter inter-frame attention.
    Instances are treated as immutable: the update functions return new caches
    that share unchanged blocks with the original.
    """

    __slots__ = ("layers", "frame_ids")

    def __init__(self, layers: Sequence[Sequence[tuple]] | None = None,
                 frame_ids: Sequence[int] = ()):
        self.layers = [list(blocks) for blocks in (layers or [])]
        self.frame_ids = list(frame_ids)
        if self.layers and any(len(b) != len(self.frame_ids) for b in self.layers):
            raise ContractError("every layer must hold one block per frame")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise OrderingError("frame ids must be strictly increasing")

    @classmethod
    def empty(cls, num_layers: int) -> "KVCache":
        return cls([[] for _ in range(num_layers)], [])

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_frames(self) -> int:
        return len(self.frame_ids)

    def layer_kv(self, layer: int):
        """Concatenated ``(K, V)`` of all cached frames for ``layer``, or None."""
        if not 0 <= layer < self.num_layers:
            raise BoundsError(f"layer {layer} not in cache of {self.num_layers} layers")
        blocks = self.layers[layer]
        if not blocks:
            return None
        return (np.concatenate([b[0] for b in blocks], axis=0),
                np.concatenate([b[1] for b in blocks], axis=0))

    def block_shape(self):
        for blocks in self.layers:
            if blocks:
                return blocks[0][0].shape
        return None

    def equals(self, other: "KVCache") -> bool:
        """Bitwise equality of ids and every block."""
        if self.frame_ids != other.frame_ids or self.num_layers != other.num_layers:
            return False
        return all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                   for la, lb in zip(self.layers, other.layers) for a, b in zip(la, lb))

    def __repr__(self):
        return f"KVCache(layers={self.num_layers}, frames={self.frame_ids})"


def _freeze_block(kv):
    k, v = (np.array(a) for a in kv)
    if k.shape != v.shape or k.ndim != 3:
        raise DimensionError("K and V blocks must share a [tokens, heads, d_head] shape")
    k.flags.writeable = False
    v.flags.writeable = False
    return k, v


def cache_append(cache: KVCache, frame_id: int, blocks: Sequence[tuple]) -> KVCache:
    """Append one frame's ``(K, V)`` per layer."""
    if cache.frame_ids and frame_id <= cache.frame_ids[-1]:
        raise OrderingError(f"frame {frame_id} does not follow {cache.frame_ids[-1]}")
    if len(blocks) != cache.num_layers:
        raise ContractError(f"got {len(blocks)} layer blocks for a {cache.num_layers}-layer cache")
    ref = cache.block_shape()
    new_layers = []
    for layer, kv in zip(cache.layers, blocks):
        k, v = _freeze_block(kv)
        if ref is not None and k.shape != ref:
            raise DimensionError(f"block shape {k.shape} != cached {ref}")
        new_layers.append(layer + [(k, v)])
    return KVCache(new_layers, cache.frame_ids + [frame_id])


def cache_replace_prefix(cache: KVCache, new_blocks: KVCache) -> KVCache:
    """Swap the first ``new_blocks.num_frames`` frames' blocks in every layer.

    The suffix blocks are carried over untouched (same array objects).
    """
    n = new_blocks.num_frames
    if n > cache.num_frames:
        raise BoundsError(f"cannot replace {n} frames of a {cache.num_frames}-frame cache")
    if n == 0:
        return cache
    if new_blocks.num_layers != cache.num_layers:
        raise ContractError("layer count mismatch in prefix replacement")
    ref = cache.block_shape()
    layers = []
    for old, new in zip(cache.layers, new_blocks.layers):
        fresh = [_freeze_block(kv) for kv in new]
        if any(k.shape != ref for k, _ in fresh):
            raise DimensionError("replacement block shape mismatch")
        layers.append(fresh + old[n:])
    return KVCache(layers, cache.frame_ids)


def incremental_attention(q_new: Tensor, cache: KVCache, layer: int, self_kv=None, heads: int | None = None) -> Tensor:
    """Queries of one new frame attend over all cached frames plus the frame itself.

    ``q_new`` is ``[tokens, d]`` (projected queries); ``self_kv`` holds the new
    frame's projected ``(K, V)`` as ``[tokens, d]`` tensors.  Returns the
    concatenated head outputs, ``[tokens, d]``, before any output projection.
    """
    cached = cache.layer_kv(layer) if cache.num_layers else None
    if cached is None and self_kv is None:
        raise ContractError("nothing to attend to: empty cache and no self K/V")
    if heads is None:
        if cache.block_shape() is None:
            raise ContractError("heads must be given when the cache is empty")
        heads = cache.block_shape()[1]
    n, d = q_new.shape
    dh = d // heads
    parts_k, parts_v = [], []
    if cached is not None:
        ck, cv = cached
        parts_k.append(Tensor._wrap(ck.reshape(-1, d).astype(q_new.dtype)))
        parts_v.append(Tensor._wrap(cv.reshape(-1, d).astype(q_new.dtype)))
    if self_kv is not None:
        parts_k.append(self_kv[0])
        parts_v.append(self_kv[1])
    k = T.concat(parts_k, 0) if len(parts_k) > 1 else parts_k[0]
    v = T.concat(parts_v, 0) if len(parts_v) > 1 else parts_v[0]
    if k.shape[1] != d or dh * heads != d:
        raise DimensionError("query and key widths disagree")
    return merge_heads(attend(split_heads(q_new, heads), split_heads(k, heads), split_heads(v, heads)))


# ---------------------------------------------------------------------------
# snapshot file
# ---------------------------------------------------------------------------

KV_MAGIC = b"SFKV"
KV_VERSION = 1
_KV_HEADER = struct.Struct("<4sIIIIII")


def save_cache(cache: KVCache, path) -> None:
    """Write ``cache`` as a little-endian binary snapshot.

    Layout: header (magic, version, layers, frames, tokens, heads, d_head as
    u32), the frame ids as int64, then float32 K then V for each frame of each
    layer (layer-major, frame-minor).
    """
    shape = cache.block_shape() or (0, 0, 0)
    header = _KV_HEADER.pack(KV_MAGIC, KV_VERSION, cache.num_layers, cache.num_frames, *shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.asarray(cache.frame_ids, dtype="<i8").tobytes())
            for blocks in cache.layers:
                for k, v in blocks:
                    fh.write(np.asarray(k, dtype="<f4").tobytes())
                    fh.write(np.asarray(v, dtype="<f4").tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write cache snapshot: {e}") from e


def load_cache(path) -> KVCache:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read cache snapshot: {e}") from e
    if len(raw) < _KV_HEADER.size:
        raise DataIOError("truncated cache snapshot")
    magic, version, L, F, t, h, dh = _KV_HEADER.unpack_from(raw)
    if magic != KV_MAGIC or version != KV_VERSION:
        raise DataIOError("not a KV cache snapshot (bad magic/version)")
    off = _KV_HEADER.size
    ids = np.frombuffer(raw, dtype="<i8", count=F, offset=off).tolist()
    off += 8 * F
    n = t * h * dh
    if len(raw) != off + 2 * 4 * n * L * F:
        raise DataIOError("cache snapshot size does not match its header")
    layers = []
    for _ in range(L):
        blocks = []
        for _ in range(F):
            k = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t, h, dh)
            off += 4 * n
            v = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(t, h, dh)
            off += 4 * n
            blocks.append((k, v))
        layers.append(blocks)
    return KVCache(layers, ids)
