import logging

import numpy as np
import pytest

from conftest import random_frames
from slamformer.attention import FrameLayout, KVCache, MaskKind, build_mask
from slamformer.backend import BackendConfig, refine_map, share_cache, should_trigger
from slamformer.errors import ConfigError, ContractError
from slamformer.frontend import FrontendConfig, detect_keyframe, initialize_map, track_and_map
from slamformer.model import ImageFrame, MapTokens


def test_identical_frame_is_not_a_keyframe(toy_model):
    f = random_frames(1)[0]
    again = ImageFrame(f.pixels, 1.0, 1)
    is_kf, rel = detect_keyframe(f, again, toy_model, 1e-6)
    assert not is_kf and np.linalg.norm(rel.translation) < 1e-6


def test_tiny_tau_fires_on_distinct_frames(toy_model):
    a, b = random_frames(2)
    assert detect_keyframe(a, b, toy_model, 1e-12)[0]


def test_tau_must_be_positive():
    with pytest.raises(ConfigError):
        FrontendConfig(tau=0.0)


def test_initialize_matches_batch_and_swaps(toy_model):
    a, b = random_frames(2, seed=3)
    state, preds = initialize_map(a, b, toy_model)
    assert state.cardinality == 2 and len(state.maps) == 2 and state.cache.num_frames == 2
    mask = build_mask(MaskKind.CAUSAL_FULL2, FrameLayout(18, 2))
    _, blocks = toy_model.forward([toy_model.encode(a), toy_model.encode(b)], mask)
    for layer in range(4):
        for f in range(2):
            assert np.array_equal(state.cache.layers[layer][f][0], blocks[layer][f][0])
    b2 = ImageFrame(b.pixels, 0.0, 0)
    a2 = ImageFrame(a.pixels, 0.1, 1)
    swapped, _ = initialize_map(b2, a2, toy_model)
    assert np.allclose(swapped.maps[0].tokens.data, state.maps[1].tokens.data, atol=1e-5)
    assert np.allclose(swapped.maps[1].tokens.data, state.maps[0].tokens.data, atol=1e-5)


def test_track_grows_state_and_keeps_input(toy_model):
    frames = random_frames(5, seed=4)
    state, _ = initialize_map(frames[0], frames[1], toy_model)
    s = state
    for k, f in enumerate(frames[2:], 1):
        pred, s = track_and_map(f, s, toy_model)
        assert s.cardinality == k + 2
        assert pred.frame_index == f.frame_index
    assert state.cardinality == 2
    with pytest.raises(ContractError):
        track_and_map(frames[2], s, toy_model)


def test_backend_trigger_rule():
    cfg = BackendConfig(period=8)
    assert not should_trigger(7, cfg) and should_trigger(8, cfg)
    off = BackendConfig(period=8, run_mid=False)
    assert not any(should_trigger(c, off) for c in range(20))


def test_refine_map_shapes_and_permutation(toy_model):
    frames = random_frames(3, seed=5)
    state, _ = initialize_map(frames[0], frames[1], toy_model)
    _, state = track_and_map(frames[2], state, toy_model)
    refined, cache = refine_map(state.maps, toy_model)
    assert cache.num_frames == 3 and [m.origin for m in refined] == ["backend"] * 3
    perm = [2, 0, 1]
    maps = [MapTokens(state.maps[i].tokens, 10 + j) for j, i in enumerate(perm)]
    out, _ = refine_map(maps, toy_model)
    for j, i in enumerate(perm):
        assert np.allclose(out[j].tokens.data, refined[i].tokens.data, atol=1e-5)


def test_refine_map_needs_two(toy_model, caplog):
    f = random_frames(1)[0]
    with caplog.at_level(logging.INFO):
        assert refine_map([MapTokens(toy_model.encode(f), 0)], toy_model) is None


def test_refinement_change_is_measured_not_asserted(toy_model, caplog):
    frames = random_frames(3, seed=6)
    state, _ = initialize_map(frames[0], frames[1], toy_model)
    once, _ = refine_map(state.maps, toy_model)
    twice, _ = refine_map(once, toy_model)
    change = max(float(np.max(np.abs(a.tokens.data - b.tokens.data))) for a, b in zip(once, twice))
    logging.getLogger(__name__).info("second refinement changed tokens by %.3g", change)
    assert np.isfinite(change)


def test_full_length_share_adopts_backend_cache(toy_model):
    frames = random_frames(3, seed=7)
    state, _ = initialize_map(frames[0], frames[1], toy_model)
    _, state = track_and_map(frames[2], state, toy_model)
    refined, cache = refine_map(state.maps, toy_model)
    shared = share_cache(state, refined, cache)
    assert shared.cache.equals(cache)
    assert [m.origin for m in shared.maps] == ["backend"] * 3


def test_share_rejects_non_prefix(toy_model):
    frames = random_frames(3, seed=8)
    state, _ = initialize_map(frames[0], frames[1], toy_model)
    _, state = track_and_map(frames[2], state, toy_model)
    refined, cache = refine_map(state.maps[1:], toy_model)
    with pytest.raises(ContractError):
        share_cache(state, refined, cache)
