"""Global refinement of the token map and cache write-back to the frontend."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from .attention import FrameLayout, KVCache, MaskKind, build_mask, cache_replace_prefix
from .errors import ConfigError, ContractError
from .frontend import TokenMapState
from .model import MapTokens, SlamFormer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendConfig:
    period: int = 8
    run_mid: bool = True
    run_end: bool = True

    def __post_init__(self):
        if self.run_mid and self.period < 1:
            raise ConfigError("backend period must be >= 1")


def should_trigger(keyframes_since_last: int, cfg: BackendConfig) -> bool:
    return cfg.run_mid and keyframes_since_last >= cfg.period


def refine_map(maps, model: SlamFormer):
    """Full-attention pass over all map tokens.

    Returns ``(refined, cache)`` in input order, or ``None`` when fewer than
    two map tokens are available.
    """
    maps = list(maps)
    if len(maps) < 2:
        log.info("backend skipped: %d map token set(s)", len(maps))
        return None
    layout = FrameLayout(model.cfg.tokens_per_frame, len(maps))
    toks = [model.reenter(m) for m in maps]
    outs, blocks = model.forward(toks, build_mask(MaskKind.FULL, layout))
    ids = [m.frame_index for m in maps]
    refined = [MapTokens(o, i, "backend") for o, i in zip(outs, ids)]
    return refined, KVCache(blocks, ids)


def share_cache(state: TokenMapState, refined, backend_cache: KVCache) -> TokenMapState:
    """Swap the refined prefix into the frontend state.

    Keyframes the backend did not see (the suffix) keep their tokens and
    cache blocks.
    """
    n = backend_cache.num_frames
    if backend_cache.frame_ids != state.keyframes[:n] or len(refined) != n:
        raise ContractError("backend frames are not a prefix of the frontend keyframes")
    cache = cache_replace_prefix(state.cache, backend_cache)
    new = TokenMapState(list(refined) + state.maps[n:], list(state.keyframes), cache,
                        state.last_keyframe_image)
    new.check()
    return new
