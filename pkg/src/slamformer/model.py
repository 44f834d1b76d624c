"""The shared transformer: patch encoder, backbone with cached inter-frame
attention, map-token re-entry and the pose / pointmap heads."""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .attention import AttentionMask, KVCache, attend, incremental_attention, merge_heads, split_heads
from .errors import ConfigError, ContractError, DataIOError, DimensionError
from .geometry import SE3Pose
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    d_model: int = 64
    heads: int = 4
    patch: int = 8
    registers: int = 2
    image_hw: tuple = (32, 32)
    token_type_embedding: bool = True
    mlp_ratio: int = 4
    freeze_pose_head: bool = False

    def __post_init__(self):
        H, W = self.image_hw
        object.__setattr__(self, "image_hw", (int(H), int(W)))
        if min(self.layers, self.d_model, self.heads, self.patch, self.mlp_ratio) < 1 or self.registers < 0:
            raise ConfigError("model sizes must be positive")
        if H % self.patch or W % self.patch:
            raise ConfigError(f"image {H}x{W} not divisible by patch {self.patch}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def grid(self):
        return self.image_hw[0] // self.patch, self.image_hw[1] // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def tokens_per_frame(self) -> int:
        return self.num_patches + self.registers

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class ImageFrame:
    pixels: np.ndarray
    timestamp: float = 0.0
    frame_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DimensionError(f"image must be HxWx3, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ConfigError("pixel values must lie in [0, 1]")
        self.pixels = px


@dataclass
class MapTokens:
    tokens: Tensor
    frame_index: int
    origin: str = "frontend"


@dataclass
class FramePrediction:
    pointmap: np.ndarray
    confidence: np.ndarray
    pose: SE3Pose
    frame_index: int = 0

    @property
    def depth(self) -> np.ndarray:
        return self.pointmap[..., 2]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

_ATTN = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, p = cfg.d_model, cfg.patch
    hid = cfg.mlp_ratio * d
    shapes = {
        "patch_embed.w": (3 * p * p, d),
        "patch_embed.b": (d,),
        "pos_embed": (cfg.num_patches, d),
        "registers": (cfg.registers, d),
        "reentry.w": (d, d),
        "reentry.b": (d,),
        "type_embed": (d,),
    }
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        for part in ("intra", "inter"):
            shapes[pre + f"ln_{part}.g"] = (d,)
            shapes[pre + f"ln_{part}.b"] = (d,)
            for n in _ATTN:
                shapes[pre + f"{part}.{n}"] = (d, d) if n[0] == "w" else (d,)
        shapes[pre + "ln_mlp.g"] = (d,)
        shapes[pre + "ln_mlp.b"] = (d,)
        shapes[pre + "mlp.w1"] = (d, hid)
        shapes[pre + "mlp.b1"] = (hid,)
        shapes[pre + "mlp.w2"] = (hid, d)
        shapes[pre + "mlp.b2"] = (d,)
    for head, out in (("pose_head", 7), ("pmap_head", p * p * 4)):
        shapes[head + ".ln.g"] = (d,)
        shapes[head + ".ln.b"] = (d,)
        shapes[head + ".w1"] = (d, d)
        shapes[head + ".b1"] = (d,)
        shapes[head + ".w2"] = (d, out)
        shapes[head + ".b2"] = (out,)
    return shapes


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dtype = dtype or T.get_dtype()
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and name != "registers":
            arr = np.zeros(shape)
        elif name in ("pos_embed", "registers", "type_embed"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        params[name] = arr
    params["pose_head.w2"] = params["pose_head.w2"] * 0.1
    params["pose_head.b2"] = np.array([0, 0, 0, 1, 0, 0, 0], dtype=np.float64)
    params["pmap_head.w2"] = params["pmap_head.w2"] * 0.1
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


class SlamFormer:
    """Configuration plus named parameter arrays.

    ``weights()`` hands out :class:`Tensor` views of the parameters; pass
    ``requires_grad=True`` to get fresh leaves for a training step.
    """

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, params=None):
        self.cfg = cfg or ModelConfig()
        self.params = dict(params) if params is not None else init_parameters(self.cfg, seed)
        expected = parameter_shapes(self.cfg)
        if set(expected) != set(self.params):
            raise ConfigError("parameter names do not match the configuration")
        for k, shp in expected.items():
            if tuple(self.params[k].shape) != shp:
                raise ConfigError(f"parameter {k} has shape {self.params[k].shape}, expected {shp}")
        self._frozen = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "SlamFormer":
        return SlamFormer(self.cfg, params={k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "SlamFormer":
        return SlamFormer(self.cfg, params={k: v.copy() for k, v in self.params.items()})

    def trainable(self) -> list[str]:
        names = list(self.params)
        if self.cfg.freeze_pose_head:
            names = [n for n in names if not n.startswith("pose_head.")]
        return names

    def weights(self, requires_grad: bool = False) -> dict[str, Tensor]:
        if not requires_grad:
            if self._frozen is None:
                self._frozen = {k: Tensor(v, dtype=v.dtype) for k, v in self.params.items()}
            return self._frozen
        train = set(self.trainable())
        return {k: Tensor(v, requires_grad=k in train, dtype=v.dtype) for k, v in self.params.items()}

    def set_params(self, params: Mapping[str, np.ndarray]) -> None:
        for k, v in params.items():
            if k not in self.params or self.params[k].shape != np.shape(v):
                raise ConfigError(f"bad parameter update for {k}")
            self.params[k] = np.asarray(v, dtype=self.params[k].dtype)
        self._frozen = None

    # convenience wrappers with the model's own weights
    def encode(self, frame: ImageFrame, w=None) -> Tensor:
        return encode_image(frame, self.cfg, w or self.weights())

    def reenter(self, m: MapTokens, w=None) -> Tensor:
        return reenter_map_tokens(m, self.cfg, w or self.weights())

    def forward(self, frames, mask: AttentionMask, cache: KVCache | None = None, w=None):
        return backbone_forward(frames, mask, self.cfg, w or self.weights(), cache)

    def decode_pose(self, tokens: Tensor, w=None) -> SE3Pose:
        q, t = pose_head(tokens, self.cfg, w or self.weights())
        return SE3Pose(q.data, t.data)

    def decode(self, tokens: Tensor, frame_index: int = 0, w=None) -> FramePrediction:
        w = w or self.weights()
        q, t = pose_head(tokens, self.cfg, w)
        P, conf = pointmap_head(tokens, self.cfg, w)
        return FramePrediction(np.asarray(P.data, dtype=np.float64), np.asarray(conf.data, dtype=np.float64),
                               SE3Pose(q.data, t.data), frame_index)


# ---------------------------------------------------------------------------
# patching
# ---------------------------------------------------------------------------


def fold_patches(grid: np.ndarray, patch: int) -> np.ndarray:
    """``(H, W, c)`` image to ``(num_patches, patch*patch*c)`` rows, row-major patches."""
    H, W, c = grid.shape
    gh, gw = H // patch, W // patch
    return grid.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)


def unfold_patches(rows, cfg: ModelConfig, channels: int):
    """Inverse of :func:`fold_patches`; works on numpy arrays and Tensors."""
    gh, gw = cfg.grid
    p = cfg.patch
    H, W = cfg.image_hw
    if isinstance(rows, Tensor):
        if rows.shape != (gh * gw, p * p * channels):
            raise ContractError(f"patch rows {rows.shape} do not match the grid")
        x = T.reshape(rows, (gh, gw, p, p, channels))
        return T.reshape(T.transpose(x, (0, 2, 1, 3, 4)), (H, W, channels))
    rows = np.asarray(rows)
    return rows.reshape(gh, gw, p, p, channels).transpose(0, 2, 1, 3, 4).reshape(H, W, channels)


# ---------------------------------------------------------------------------
# token producers
# ---------------------------------------------------------------------------


def encode_image(frame: ImageFrame, cfg: ModelConfig, w) -> Tensor:
    """Toy patch encoder: flatten patches, project, add positions, append registers."""
    if frame.pixels.shape != (*cfg.image_hw, 3):
        raise ConfigError(f"image {frame.pixels.shape} does not match model input {cfg.image_hw}")
    rows = Tensor(fold_patches(frame.pixels, cfg.patch), dtype=w["patch_embed.w"].dtype)
    tok = T.linear(rows, w["patch_embed.w"], w["patch_embed.b"])
    tok = T.add(tok, w["pos_embed"])
    if cfg.registers:
        tok = T.concat([tok, w["registers"]], axis=0)
    return tok


def reenter_map_tokens(m: MapTokens | Tensor, cfg: ModelConfig, w) -> Tensor:
    """Feed map tokens back into the backbone (backend input).

    With ``token_type_embedding`` off this is the identity; otherwise a learned
    projection plus a map-token type vector.
    """
    tok = m.tokens if isinstance(m, MapTokens) else m
    if tok.shape != (cfg.tokens_per_frame, cfg.d_model):
        raise DimensionError(f"map tokens {tok.shape} do not match the configuration")
    if not cfg.token_type_embedding:
        return tok
    out = T.linear(tok, w["reentry.w"], w["reentry.b"])
    return T.add(out, T.expand(w["type_embed"], out.shape))


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


def _attn_proj(h, w, pre):
    return (T.linear(h, w[pre + "wq"], w[pre + "bq"]),
            T.linear(h, w[pre + "wk"], w[pre + "bk"]),
            T.linear(h, w[pre + "wv"], w[pre + "bv"]))


def backbone_forward(frames, mask: AttentionMask, cfg: ModelConfig, w, cache: KVCache | None = None):
    """Run ``frames`` (list of ``[tokens, d]`` tensors) through all layers.

    ``mask`` governs attention among the given frames.  When ``cache`` holds
    frames, every given frame additionally attends to all cached frames.
    Returns the per-frame output tokens and, per layer, the ``(K, V)`` blocks
    captured at the inter-frame attention input for each given frame.
    """
    n = len(frames)
    tpf = cfg.tokens_per_frame
    d, H = cfg.d_model, cfg.heads
    if mask.layout.num_frames != n or mask.layout.tokens_per_frame != tpf:
        raise ContractError("mask layout does not match the frames")
    if any(f.shape != (tpf, d) for f in frames):
        raise ContractError("frame token block has the wrong shape")
    cached = 0
    if cache is not None:
        if cache.num_layers != cfg.layers:
            raise ContractError(f"cache has {cache.num_layers} layers, model has {cfg.layers}")
        cached = cache.num_frames
        shp = cache.block_shape()
        if shp is not None and shp != (tpf, H, cfg.d_head):
            raise ContractError("cache blocks do not match the token layout")

    tok_mask = mask.token_mask()
    if cached:
        tok_mask = np.concatenate([np.ones((n * tpf, cached * tpf), dtype=bool), tok_mask], axis=1)
    x = T.concat(frames, axis=0) if n > 1 else frames[0]
    blocks = []
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        # frame attention: all-to-all within each frame
        h = T.layer_norm(x, w[pre + "ln_intra.g"], w[pre + "ln_intra.b"])
        q, k, v = _attn_proj(h, w, pre + "intra.")
        q, k, v = (T.transpose(T.reshape(a, (n, tpf, H, cfg.d_head)), (0, 2, 1, 3)) for a in (q, k, v))
        o = attend(q, k, v)
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (n * tpf, d))
        x = T.add(x, T.linear(o, w[pre + "intra.wo"], w[pre + "intra.bo"]))

        # inter-frame attention, cache-aware
        h = T.layer_norm(x, w[pre + "ln_inter.g"], w[pre + "ln_inter.b"])
        q, k, v = _attn_proj(h, w, pre + "inter.")
        kb = k.data.reshape(n, tpf, H, cfg.d_head)
        vb = v.data.reshape(n, tpf, H, cfg.d_head)
        blocks.append([(kb[f], vb[f]) for f in range(n)])
        if cached and n == 1:
            o = incremental_attention(q, cache, i, (k, v), heads=H)
        else:
            if cached:
                ck, cv = cache.layer_kv(i)
                k = T.concat([Tensor._wrap(ck.reshape(-1, d).astype(k.dtype)), k], 0)
                v = T.concat([Tensor._wrap(cv.reshape(-1, d).astype(v.dtype)), v], 0)
            o = merge_heads(attend(split_heads(q, H), split_heads(k, H), split_heads(v, H), tok_mask))
        x = T.add(x, T.linear(o, w[pre + "inter.wo"], w[pre + "inter.bo"]))

        h = T.layer_norm(x, w[pre + "ln_mlp.g"], w[pre + "ln_mlp.b"])
        h = T.gelu(T.linear(h, w[pre + "mlp.w1"], w[pre + "mlp.b1"]))
        x = T.add(x, T.linear(h, w[pre + "mlp.w2"], w[pre + "mlp.b2"]))

    outs = [x] if n == 1 else [x[f * tpf:(f + 1) * tpf] for f in range(n)]
    return outs, blocks


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

QUAT_EPS = 1e-6


def pose_head(tokens: Tensor, cfg: ModelConfig, w):
    """Mean of the register tokens -> MLP -> (unit quaternion xyzw, translation)."""
    if cfg.registers:
        pooled_src = tokens[cfg.num_patches:]
    else:
        pooled_src = tokens
    h = T.layer_norm(pooled_src, w["pose_head.ln.g"], w["pose_head.ln.b"])
    h = T.mean(h, axis=0)
    h = T.reshape(h, (1, cfg.d_model))
    h = T.gelu(T.linear(h, w["pose_head.w1"], w["pose_head.b1"]))
    out = T.reshape(T.linear(h, w["pose_head.w2"], w["pose_head.b2"]), (7,))
    q = out[:4]
    if float(np.linalg.norm(q.data)) < 1e-12:
        log.warning("pose head produced a zero quaternion; perturbing before normalisation")
        q = T.add(q, Tensor([0.0, 0.0, 0.0, QUAT_EPS], dtype=q.dtype))
    q = T.div(q, T.norm(q))
    return q, out[4:]


def pointmap_head(tokens: Tensor, cfg: ModelConfig, w):
    """Per-patch MLP unfolded to a ``(H, W, 3)`` pointmap and ``(H, W)`` confidence.

    Each pixel gets raw ``(u, v, w, c)``: depth ``z = exp(w)``, ``x = u z``,
    ``y = v z`` and confidence ``1 + exp(c)``.  Register tokens are ignored.
    """
    if tokens.shape[0] != cfg.tokens_per_frame:
        raise ContractError("token count does not match the patch grid")
    h = T.layer_norm(tokens[:cfg.num_patches], w["pmap_head.ln.g"], w["pmap_head.ln.b"])
    h = T.gelu(T.linear(h, w["pmap_head.w1"], w["pmap_head.b1"]))
    raw = unfold_patches(T.linear(h, w["pmap_head.w2"], w["pmap_head.b2"]), cfg, 4)
    z = T.exp(raw[..., 2])
    P = T.stack([T.mul(raw[..., 0], z), T.mul(raw[..., 1], z), z], axis=-1)
    conf = T.add(T.exp(raw[..., 3]), 1.0)
    return P, conf


def confidence_from_raw(c):
    return 1.0 + np.exp(np.asarray(c, dtype=np.float64))


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

WT_MAGIC = b"SFWT"
WT_VERSION = 1
_WT_HEADER = struct.Struct("<4sIIIIIIIIII")


def save_checkpoint(model: SlamFormer, path) -> None:
    """Binary little-endian checkpoint: header with the config, then named float32 blocks."""
    c = model.cfg
    header = _WT_HEADER.pack(WT_MAGIC, WT_VERSION, c.layers, c.d_model, c.heads, c.patch, c.registers,
                             c.image_hw[0], c.image_hw[1], int(c.token_type_embedding), c.mlp_ratio)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<I", len(model.params)))
            for name in sorted(model.params):
                arr = np.asarray(model.params[name], dtype="<f4")
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint: {e}") from e


def load_checkpoint(path, freeze_pose_head: bool = False) -> SlamFormer:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read checkpoint: {e}") from e
    try:
        magic, version, L, d, h, p, r, H, W, tte, ratio = _WT_HEADER.unpack_from(raw)
        if magic != WT_MAGIC or version != WT_VERSION:
            raise DataIOError("not a weight checkpoint (bad magic/version)")
        cfg = ModelConfig(L, d, h, p, r, (H, W), bool(tte), ratio, freeze_pose_head)
        off = _WT_HEADER.size
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(T.get_dtype())
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataIOError(f"truncated or corrupt checkpoint: {e}") from e
    if off != len(raw):
        raise DataIOError("trailing bytes in checkpoint")
    return SlamFormer(cfg, params=params)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
