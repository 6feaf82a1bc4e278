"""Online adaptation: entropy and symmetric cross-entropy losses, paired-view
pseudo-labeling, the block-selective adaptation step with logit ensembling,
and the source-only / BN-recalibration / entropy-on-BN baselines.

One adaptation step on a test batch runs, in order: (1) pseudo-labels from
the EMA teacher on the batch and its horizontal flip, (2) one entropy
minimization step restricted to the selected blocks, (3) one consistency step
over all parameters against the pseudo-labels, (4) an EMA teacher update,
then the reported prediction ensembles student and teacher logits from fresh
forwards of the updated models. Gradients never flow into the teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import ImageBatch, augment_views, flip_width
from .nn import BlockNet, clone_model, ema_update, forward
from .optim import AdamState, adam_step
from .tensor import Rng, Tape, Tensor, pause_recording

__all__ = [
    "AdaptConfig",
    "AdaptState",
    "StepOutput",
    "entropy_loss",
    "cross_entropy",
    "sce_loss",
    "paired_pseudo_label",
    "pseudo_label_from_views",
    "entropy_min_step",
    "consistency_step",
    "dplot_step",
    "tent_step",
    "bn1_step",
    "source_step",
    "warmup",
    "init_adapt_state",
    "method_step",
    "METHODS",
]

METHODS = ("source", "bn1", "tent", "tent+selection", "dplot")

_SIMPLEX_TOL = 1e-4


def _check_simplex(t: Tensor, what: str) -> None:
    rows = t.data.sum(axis=-1)
    if np.any(np.abs(rows - 1.0) > _SIMPLEX_TOL) or t.data.min() < -1e-6:
        raise ValueError(f"{what} rows are not probability distributions")


def entropy_loss(probs: Tensor) -> Tensor:
    """Mean Shannon entropy of probability rows (log clamped at 1e-12)."""
    _check_simplex(probs, "entropy_loss input")
    per_row = ops.sum_(ops.mul(probs, ops.log_clamped(probs)), axis=-1)
    return ops.neg(ops.mean(per_row))


def cross_entropy(p: Tensor, q: Tensor) -> Tensor:
    """CE(p, q) = -sum_c p_c log q_c, averaged over the batch."""
    if p.shape != q.shape:
        raise ops.ShapeError(f"cross_entropy shapes differ: {p.shape} vs {q.shape}")
    per_row = ops.sum_(ops.mul(p, ops.log_clamped(q)), axis=-1)
    return ops.neg(ops.mean(per_row))


def sce_loss(a: Tensor, b: Tensor) -> Tensor:
    """Symmetric cross-entropy: (CE(a,b) + CE(b,a)) / 2, batch mean."""
    if a.shape != b.shape:
        raise ops.ShapeError(f"sce_loss shapes differ: {a.shape} vs {b.shape}")
    return ops.scale(ops.add(cross_entropy(a, b), cross_entropy(b, a)), 0.5)


def paired_pseudo_label(teacher: BlockNet, batch: ImageBatch) -> tuple[Tensor, Tensor, Tensor]:
    """Average the teacher's softmax over the batch and its horizontal flip.

    Returns (pseudo-labels, teacher logits on x, teacher logits on flipped x).
    No gradient is ever recorded through the teacher.
    """
    with pause_recording():
        _, logits = forward(teacher, batch.x, bn_mode="batch")
        _, logits_f = forward(teacher, flip_width(batch.x), bn_mode="batch")
        probs = ops.softmax(logits)
        probs_f = ops.softmax(logits_f)
        pseudo = Tensor._wrap((probs.data + probs_f.data) * 0.5)
    return pseudo, logits, logits_f


def pseudo_label_from_views(teacher: BlockNet, views: list[ImageBatch]) -> Tensor:
    """Average the teacher's softmax over an arbitrary list of views."""
    with pause_recording():
        acc = None
        for v in views:
            _, logits = forward(teacher, v.x, bn_mode="batch")
            p = ops.softmax(logits).data
            acc = p if acc is None else acc + p
    return Tensor._wrap(acc / len(views))


@dataclass
class AdaptConfig:
    """Hyperparameters and composition flags for the adaptation step.

    ``entropy_scope`` picks which parameters entropy minimization touches:
    full parameters of the selected blocks ("blocks"), BN affine parameters of
    every layer ("bn-affine"), or BN affine parameters of the selected blocks
    only ("bn-affine-selected"). The defaults are the full method; the
    composition flags exist for the ablation variants.
    """

    selected_blocks: tuple[int, ...] = ()
    lr_entropy: float = 1e-3
    lr_consistency: float = 1e-4
    ema_decay: float = 0.999
    ensemble: bool = True
    use_consistency: bool = True
    use_teacher: bool = True
    paired_entropy: bool = True
    entropy_scope: str = "blocks"
    prediction_timing: str = "post"  # "post" (fresh forwards) | "pre" (reuse)
    pseudo_label_menu: str = "paired"
    pseudo_label_views: int = 8

    def __post_init__(self):
        # lr 0 is allowed: frozen configurations are useful as diagnostics
        if self.lr_entropy < 0 or self.lr_consistency < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.entropy_scope not in ("blocks", "bn-affine", "bn-affine-selected"):
            raise ValueError(f"unknown entropy_scope: {self.entropy_scope!r}")
        if self.prediction_timing not in ("post", "pre"):
            raise ValueError(f"unknown prediction_timing: {self.prediction_timing!r}")
        self.selected_blocks = tuple(int(b) for b in self.selected_blocks)


@dataclass
class AdaptState:
    """Single-owner state of one adaptation run."""

    student: BlockNet
    teacher: BlockNet | None
    opt_entropy: AdamState
    opt_consistency: AdamState | None
    cfg: AdaptConfig
    method: str = "dplot"
    step: int = 0
    rng: Rng = field(default_factory=lambda: Rng(0))


@dataclass
class StepOutput:
    logits: Tensor  # reported (possibly ensembled) logits, N x C
    pred: np.ndarray
    diagnostics: dict


def init_adapt_state(model: BlockNet, cfg: AdaptConfig, method: str = "dplot", rng: Rng | None = None) -> AdaptState:
    """Fresh adaptation state; the student starts as a copy of the model and
    the teacher (when used) is initialized from the student."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    cfg = _coerce_cfg(cfg, method)
    if cfg.entropy_scope in ("blocks", "bn-affine-selected") and not cfg.selected_blocks:
        if method != "source" and method != "bn1":
            raise ValueError(f"method {method!r} needs a non-empty selected block set")
    student = clone_model(model)
    teacher = clone_model(student) if (method == "dplot" and cfg.use_teacher) else None
    opt_entropy = AdamState(lr=cfg.lr_entropy)
    opt_consistency = AdamState(lr=cfg.lr_consistency) if (method == "dplot" and cfg.use_consistency) else None
    return AdaptState(student, teacher, opt_entropy, opt_consistency, cfg, method=method, rng=rng or Rng(0))


def _coerce_cfg(cfg: AdaptConfig, method: str) -> AdaptConfig:
    if method == "tent" and cfg.entropy_scope != "bn-affine":
        cfg = _replace(cfg, entropy_scope="bn-affine")
    if method == "tent+selection" and cfg.entropy_scope != "bn-affine-selected":
        cfg = _replace(cfg, entropy_scope="bn-affine-selected")
    return cfg


def _replace(cfg: AdaptConfig, **kw) -> AdaptConfig:
    from dataclasses import replace

    return replace(cfg, **kw)


def _entropy_param_names(state: AdaptState) -> list[str]:
    cfg = state.cfg
    model = state.student
    if cfg.entropy_scope == "bn-affine":
        return model.bn_affine_names()
    if cfg.entropy_scope == "bn-affine-selected":
        return model.bn_affine_names(blocks=set(cfg.selected_blocks))
    names: list[str] = []
    for b in cfg.selected_blocks:
        names.extend(model.block_param_names(b))
    return names


def entropy_min_step(state: AdaptState, x: Tensor, x_flip: Tensor | None = None) -> Tensor:
    """One Adam step on mean prediction entropy, gradients restricted to the
    entropy scope; every other parameter stays bitwise unchanged. Returns the
    logits of the forward used (rows for x come first)."""
    student = state.student
    names = _entropy_param_names(state)
    params = {n: student.params[n] for n in names}
    batch = ops.concat([x, x_flip]) if (state.cfg.paired_entropy and x_flip is not None) else x
    tape = Tape()
    tape.watch(params)
    with tape:
        _, logits = forward(student, batch, bn_mode="batch", update_stats=True)
        loss = entropy_loss(ops.softmax(logits))
    grads = tape.gradients(loss)
    student.params.update(adam_step(state.opt_entropy, params, grads))
    return logits


def consistency_step(state: AdaptState, x: Tensor, x_flip: Tensor, pseudo: Tensor) -> Tensor:
    """One Adam step over ALL student parameters on the paired-view
    consistency loss; the pseudo-labels are treated as constants."""
    student = state.student
    params = dict(student.params)
    n = x.shape[0]
    tape = Tape()
    tape.watch(params)
    with tape:
        _, logits = forward(student, ops.concat([x, x_flip]), bn_mode="batch", update_stats=True)
        probs = ops.softmax(logits)
        y_hat = ops.slice_batch(probs, 0, n)
        y_til = ops.slice_batch(probs, n, 2 * n)
        loss = ops.add(sce_loss(y_hat, pseudo), sce_loss(y_til, pseudo))
    grads = tape.gradients(loss)
    student.params.update(adam_step(state.opt_consistency, params, grads))
    return loss


def _predict(state: AdaptState, x: Tensor, reuse_student: Tensor | None, reuse_teacher: Tensor | None) -> Tensor:
    cfg = state.cfg
    if cfg.prediction_timing == "pre" and reuse_student is not None:
        s_logits = reuse_student
        t_logits = reuse_teacher
    else:
        with pause_recording():
            _, s_logits = forward(state.student, x, bn_mode="batch")
            t_logits = None
            if cfg.ensemble and state.teacher is not None:
                _, t_logits = forward(state.teacher, x, bn_mode="batch")
    if cfg.ensemble and t_logits is not None:
        return Tensor._wrap(s_logits.data + t_logits.data)
    return s_logits


def dplot_step(state: AdaptState, batch: ImageBatch) -> StepOutput:
    """Adapt on one unlabeled test batch and report the ensemble prediction."""
    cfg = state.cfg
    x = batch.x
    x_flip = flip_width(x)
    n = x.shape[0]

    pseudo = None
    t_logits_x = None
    agreement = None
    if state.teacher is not None:
        if cfg.pseudo_label_menu == "paired":
            pseudo, t_logits_x, t_logits_f = paired_pseudo_label(state.teacher, batch)
            agreement = float(np.mean(t_logits_x.data.argmax(-1) == t_logits_f.data.argmax(-1)))
        else:
            # each split advances the spawn counter, so every step gets a fresh child
            view_rng = state.rng.split(1)[0]
            views = augment_views(batch, cfg.pseudo_label_menu, cfg.pseudo_label_views, view_rng)
            pseudo = pseudo_label_from_views(state.teacher, views)

    ent_logits = entropy_min_step(state, x, x_flip)
    if cfg.use_consistency:
        if pseudo is None:
            raise ValueError("consistency requires a teacher for pseudo-labels")
        consistency_step(state, x, x_flip, pseudo)
    if state.teacher is not None:
        ema_update(state.teacher, state.student, cfg.ema_decay)

    if state.teacher is None and not cfg.use_consistency and not cfg.ensemble:
        # nothing left of the composite method: report the adaptation forward
        # itself, exactly like the plain entropy baseline
        logits = ops.slice_batch(ent_logits, 0, n) if cfg.paired_entropy else ent_logits
    else:
        reuse = ops.slice_batch(ent_logits, 0, n) if cfg.paired_entropy else ent_logits
        logits = _predict(state, x, reuse, t_logits_x)
    state.step += 1
    pred = logits.data.argmax(axis=-1)
    diag = {"mean_entropy": _mean_entropy(logits.data)}
    if agreement is not None:
        diag["pl_agreement"] = agreement
    return StepOutput(logits, pred, diag)


def tent_step(state: AdaptState, batch: ImageBatch) -> StepOutput:
    """Entropy minimization over BN affine parameters only (optionally just
    those of the selected blocks); prediction comes from the same batch-stats
    forward that drives the update."""
    student = state.student
    names = _entropy_param_names(state)
    params = {n: student.params[n] for n in names}
    tape = Tape()
    tape.watch(params)
    with tape:
        _, logits = forward(student, batch.x, bn_mode="batch", update_stats=True)
        loss = entropy_loss(ops.softmax(logits))
    grads = tape.gradients(loss)
    student.params.update(adam_step(state.opt_entropy, params, grads))
    state.step += 1
    pred = logits.data.argmax(axis=-1)
    return StepOutput(logits, pred, {"mean_entropy": _mean_entropy(logits.data), "loss": loss.item()})


def bn1_step(state: AdaptState, batch: ImageBatch) -> StepOutput:
    """Prediction from a batch-stats forward; no state of any kind persists."""
    if batch.n < 2:
        raise ops.ShapeError("bn1 needs a batch of at least 2")
    with pause_recording():
        _, logits = forward(state.student, batch.x, bn_mode="batch", update_stats=False)
    state.step += 1
    pred = logits.data.argmax(axis=-1)
    return StepOutput(logits, pred, {"mean_entropy": _mean_entropy(logits.data)})


def source_step(state: AdaptState, batch: ImageBatch) -> StepOutput:
    """Frozen source model, running statistics."""
    with pause_recording():
        _, logits = forward(state.student, batch.x, bn_mode="running")
    state.step += 1
    pred = logits.data.argmax(axis=-1)
    return StepOutput(logits, pred, {"mean_entropy": _mean_entropy(logits.data)})


def warmup(state: AdaptState, source_batches, n_batches: int) -> AdaptState:
    """Optional pre-deployment warm-up: consistency + EMA on clean source
    batches. n_batches = 0 leaves the state untouched."""
    if n_batches == 0:
        return state
    if state.teacher is None or state.opt_consistency is None:
        raise ValueError("warmup requires a teacher and a consistency optimizer")
    done = 0
    for batch in source_batches:
        if done >= n_batches:
            break
        x = batch.x
        x_flip = flip_width(x)
        pseudo, _, _ = paired_pseudo_label(state.teacher, batch)
        consistency_step(state, x, x_flip, pseudo)
        ema_update(state.teacher, state.student, state.cfg.ema_decay)
        done += 1
    return state


def _mean_entropy(logits: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return float(-(p * np.log(np.maximum(p, ops.LOG_EPS))).sum(axis=-1).mean())


_STEPS = {
    "source": source_step,
    "bn1": bn1_step,
    "tent": tent_step,
    "tent+selection": tent_step,
    "dplot": dplot_step,
}


def method_step(method: str):
    try:
        return _STEPS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}") from None
