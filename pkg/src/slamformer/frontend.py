"""Causal online operation: keyframe detection, two-frame initialisation and
cache-driven tracking and mapping."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import FrameLayout, KVCache, MaskKind, build_mask, cache_append
from .errors import ConfigError, ContractError
from .geometry import SE3Pose, relative_pose
from .model import FramePrediction, ImageFrame, MapTokens, SlamFormer


@dataclass(frozen=True)
class FrontendConfig:
    tau: float = 0.05
    max_frames: int | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")


@dataclass
class TokenMapState:
    maps: list
    keyframes: list
    cache: KVCache
    last_keyframe_image: ImageFrame

    @property
    def cardinality(self) -> int:
        return len(self.keyframes)

    def check(self) -> None:
        if not (len(self.maps) == len(self.keyframes) == self.cache.num_frames):
            raise ContractError("token map, keyframe set and cache disagree in size")
        if self.cache.frame_ids != list(self.keyframes):
            raise ContractError("cache frame ids differ from keyframe indices")


def _pair_outputs(model: SlamFormer, a: ImageFrame, b: ImageFrame):
    layout = FrameLayout(model.cfg.tokens_per_frame, 2)
    toks = [model.encode(a), model.encode(b)]
    return model.forward(toks, build_mask(MaskKind.CAUSAL_FULL2, layout))


def detect_keyframe(prev_kf: ImageFrame, candidate: ImageFrame, model: SlamFormer, tau: float):
    """Pair pass over (last keyframe, candidate) without the cache.

    Returns ``(is_keyframe, relative_pose)`` where the relative pose is
    ``g_prev^-1 g_candidate`` from the pose head.
    """
    outs, _ = _pair_outputs(model, prev_kf, candidate)
    g_prev = model.decode_pose(outs[0])
    g_cand = model.decode_pose(outs[1])
    rel = relative_pose(g_prev, g_cand)
    return bool(np.linalg.norm(rel.translation) > tau), rel


def initialize_map(first: ImageFrame, second: ImageFrame, model: SlamFormer):
    """Joint pass over the first two keyframes; returns the state and both predictions."""
    outs, blocks = _pair_outputs(model, first, second)
    cache = KVCache([[layer[0], layer[1]] for layer in blocks], [first.frame_index, second.frame_index])
    maps = [MapTokens(outs[0], first.frame_index), MapTokens(outs[1], second.frame_index)]
    state = TokenMapState(maps, [first.frame_index, second.frame_index], cache, second)
    state.check()
    preds = [model.decode(o, f.frame_index) for o, f in zip(outs, (first, second))]
    return state, preds


def track_and_map(frame: ImageFrame, state: TokenMapState, model: SlamFormer):
    """Encode ``frame`` against the whole cache, append it to the token map.

    Returns ``(prediction, new_state)``; ``state`` itself is left untouched.
    """
    if state.cache.num_frames < 2:
        raise ContractError("frontend state is not initialised")
    if state.keyframes and frame.frame_index <= state.keyframes[-1]:
        raise ContractError("frame index does not follow the last keyframe")
    layout = FrameLayout(model.cfg.tokens_per_frame, 1)
    outs, blocks = model.forward([model.encode(frame)], build_mask(MaskKind.CAUSAL_FULL2, layout), state.cache)
    cache = cache_append(state.cache, frame.frame_index, [layer[0] for layer in blocks])
    new = TokenMapState(state.maps + [MapTokens(outs[0], frame.frame_index)],
                        state.keyframes + [frame.frame_index], cache, frame)
    new.check()
    return model.decode(outs[0], frame.frame_index), new
