"""Three-mode training iteration and a small optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import FrameLayout, MaskKind, build_mask
from .errors import ConfigError, ContractError
from .geometry import solve_scale
from .losses import ClipTargets, LossConfig, LossReport, TensorPrediction, joint_objective, mode_loss
from .model import SlamFormer, encode_image, pointmap_head, pose_head, reenter_map_tokens
from .tensor import GradTape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    prefix: int | None = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")


class Optimizer:
    """Momentum SGD or Adam over a model's named parameters."""

    def __init__(self, model: SlamFormer, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.state: dict[str, tuple] = {}
        self.steps = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.cfg.lr == 0:
            return
        self.steps += 1
        lr, upd = self.cfg.lr, {}
        for name, g in grads.items():
            p = self.model.params[name]
            if self.cfg.optimizer == "sgd":
                m = self.state.get(name, (np.zeros_like(p),))[0]
                m = self.cfg.momentum * m + g
                self.state[name] = (m,)
                upd[name] = p - lr * m
            else:
                m, v = self.state.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[name] = (m, v)
                mh = m / (1 - 0.9 ** self.steps)
                vh = v / (1 - 0.999 ** self.steps)
                upd[name] = p - lr * mh / (np.sqrt(vh) + 1e-8)
        self.model.set_params(upd)


def predict_t(tokens: Tensor, model: SlamFormer, w) -> TensorPrediction:
    q, t = pose_head(tokens, model.cfg, w)
    P, conf = pointmap_head(tokens, model.cfg, w)
    return TensorPrediction(P, conf, q, t)


@dataclass
class Frozen:
    """Values treated as constants in differentiation: per-mode scales and the
    map tokens fed to modes 2 and 3."""
    scales: tuple
    map_tokens: list


def _scale(preds, targets: ClipTargets) -> float:
    P = np.stack([p.pointmap.data for p in preds])
    return solve_scale(P, targets.pointmaps, targets.depth, targets.valid).scale


def default_prefix(n: int) -> int:
    return min(max(2, n // 2), n - 1)


def clip_objective(model: SlamFormer, w, frames, targets: ClipTargets, loss_cfg: LossConfig,
                   prefix: int | None = None, frozen: Frozen | None = None):
    """All three modes on one clip with weights ``w``.

    Returns ``(L_all, parts, frozen)``; ``parts`` holds the per-mode losses and
    details.  Pass the returned ``frozen`` back in to re-evaluate the objective
    with identical constants (used by finite-difference checks).
    """
    n = len(frames)
    if n < 3:
        raise ContractError("training clips need at least 3 frames")
    if len(targets) != n:
        raise ContractError("clip frames and targets differ in length")
    cfg = model.cfg
    p = default_prefix(n) if prefix is None else prefix
    if not 2 <= p < n:
        raise ConfigError(f"mode-2 prefix {p} must lie in [2, {n - 1}]")
    tpf = cfg.tokens_per_frame
    img_tok = [encode_image(f, cfg, w) for f in frames]
    details = [{}, {}, {}]
    scales = list(frozen.scales) if frozen else []

    def run(tokens, mask, k):
        outs, _ = model.forward(tokens, mask, w=w)
        preds = [predict_t(o, model, w) for o in outs]
        if frozen is None:
            scales.append(_scale(preds, targets))
        return outs, mode_loss(preds, targets, scales[k], loss_cfg, details[k])

    # mode 1: frontend, causal with the first two frames mutual
    outs1, l1 = run(img_tok, build_mask(MaskKind.CAUSAL_FULL2, FrameLayout(tpf, n)), 0)
    maps = frozen.map_tokens if frozen else [o.data for o in outs1]
    map_t = [Tensor._wrap(m) for m in maps]
    # mode 2: refined prefix plus causal frontend frames in one pass
    toks2 = [reenter_map_tokens(m, cfg, w) for m in map_t[:p]] + img_tok[p:]
    _, l2 = run(toks2, build_mask(MaskKind.MIXED, FrameLayout(tpf, n), p), 1)
    # mode 3: backend over all map tokens
    toks3 = [reenter_map_tokens(m, cfg, w) for m in map_t]
    _, l3 = run(toks3, build_mask(MaskKind.FULL, FrameLayout(tpf, n)), 2)
    total = joint_objective(l1, l2, l3, loss_cfg.beta)
    parts = {"l1": l1, "l2": l2, "l3": l3, "details": details}
    return total, parts, Frozen(tuple(scales), maps)


def training_iteration(frames, targets: ClipTargets, model: SlamFormer, cfg: TrainConfig,
                       optimizer: Optimizer | None = None) -> LossReport:
    """One forward of all three modes, one backward on ``L_all``, one step."""
    if targets is None or targets.depth is None:
        raise ContractError("training needs ground-truth depth and poses")
    optimizer = optimizer or Optimizer(model, cfg)
    w = model.weights(requires_grad=True)
    with GradTape() as tape:
        total, parts, frozen = clip_objective(model, w, frames, targets, cfg.loss, cfg.prefix)
    grads = T.backward(total, tape)
    by_name = {k: grads[t] for k, t in w.items() if t in grads}
    optimizer.step(by_name)
    d = parts["details"]
    per_frame = {f"mode{k + 1}.{kind}": d[k][f"{kind}_frames"] for k in range(3) for kind in ("depth", "pmap")}
    return LossReport(
        L_depth=sum(x["depth"] for x in d), L_pmap=sum(x["pmap"] for x in d), L_cam=sum(x["cam"] for x in d),
        L_mode1=parts["l1"].item(), L_mode2=parts["l2"].item(), L_mode3=parts["l3"].item(),
        L_all=total.item(), scales=frozen.scales, per_frame=per_frame)


def gradients(model: SlamFormer, frames, targets, loss_cfg: LossConfig, prefix=None):
    """Named gradients of ``L_all`` without taking a step (diagnostics)."""
    w = model.weights(requires_grad=True)
    with GradTape() as tape:
        total, _, frozen = clip_objective(model, w, frames, targets, loss_cfg, prefix)
    grads = T.backward(total, tape)
    return {k: grads[t] for k, t in w.items() if t in grads}, total.item(), frozen
