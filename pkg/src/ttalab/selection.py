"""Domain-specific block selection before deployment.

Each feature-extractor block is scored by how little the class-prototype
geometry moves when that block alone is entropy-minimized on perturbed source
data: prototypes are class-mean features (clean source, running statistics),
the score is the class-averaged cosine between prototypes before and after
the update, scores are min-max scaled to [0, 1], and blocks scoring above the
threshold are selected. The model is restored bitwise after every probe.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ops
from .adaptation import entropy_loss
from .data import ImageBatch, PerturbationSpec, perturb
from .nn import BlockNet, forward, params_equal, restore, snapshot
from .optim import AdamState, adam_step
from .tensor import Rng, Tape

__all__ = [
    "PrototypeSet",
    "SelectionReport",
    "EmConfig",
    "MissingClassError",
    "ZeroNormError",
    "compute_prototypes",
    "prototype_similarity",
    "minmax_scale",
    "block_sensitivity",
    "select_blocks",
]


class MissingClassError(ValueError):
    """Prototype computation needs at least one image per class."""


class ZeroNormError(ValueError):
    """A prototype has zero norm; cosine similarity is undefined."""


@dataclass(frozen=True)
class PrototypeSet:
    """Class-mean feature vectors (C x d) and the per-class counts behind them."""

    means: np.ndarray
    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def compute_prototypes(model: BlockNet, data: ImageBatch, batch_size: int = 256) -> PrototypeSet:
    """Per-class arithmetic mean of features, running-stats mode.

    Accumulates in float64 with Kahan compensation at the chunk level so the
    result is stable under dataset permutation.
    """
    classes = data.classes
    d = model.feature_dim
    acc = np.zeros((classes, d), dtype=np.float64)
    comp = np.zeros((classes, d), dtype=np.float64)
    counts = np.zeros(classes, dtype=np.int64)
    for start in range(0, data.n, batch_size):
        chunk = data.subset(np.arange(start, min(start + batch_size, data.n)))
        feats, _ = forward(model, chunk.x, bn_mode="running")
        f64 = feats.data.astype(np.float64)
        for c in np.unique(chunk.y):
            rows = f64[chunk.y == c]
            counts[c] += rows.shape[0]
            term = rows.sum(axis=0) - comp[c]
            total = acc[c] + term
            comp[c] = (total - acc[c]) - term
            acc[c] = total
    if (counts == 0).any():
        missing = np.nonzero(counts == 0)[0].tolist()
        raise MissingClassError(f"no source images for classes {missing}")
    return PrototypeSet(acc / counts[:, None], counts)


def prototype_similarity(p: PrototypeSet, q: PrototypeSet) -> float:
    """Class-averaged cosine similarity between two prototype sets, in [-1, 1]."""
    if p.means.shape != q.means.shape:
        raise ValueError(f"prototype shapes differ: {p.means.shape} vs {q.means.shape}")
    sims = []
    for a, b in zip(p.means, q.means):
        na = float(np.linalg.norm(a))
        nb = float(np.linalg.norm(b))
        if na == 0.0 or nb == 0.0:
            raise ZeroNormError("zero-norm prototype")
        if np.array_equal(a, b):
            sims.append(1.0)  # identical vectors read exactly 1.0, no rounding
        else:
            sims.append(min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb))))
    return float(np.mean(sims))


def minmax_scale(values) -> list[float]:
    """Scale to [0, 1]; an all-equal input maps to all 1.0 with a warning."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 1:
        raise ValueError("minmax_scale needs at least one value")
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        warnings.warn("min-max scaling degenerate: all block similarities equal", stacklevel=2)
        return [1.0] * arr.size
    return [float(v) for v in (arr - lo) / (hi - lo)]


@dataclass(frozen=True)
class EmConfig:
    """Entropy-minimization budget for one block probe: one pass over the
    perturbed source set unless capped by max_steps."""

    lr: float = 1e-3
    batch_size: int = 64
    passes: int = 1
    max_steps: int | None = None


def block_sensitivity(
    model: BlockNet,
    noised_source: ImageBatch,
    block_index: int,
    em_config: EmConfig,
    clean_source: ImageBatch,
    base_prototypes: PrototypeSet | None = None,
) -> float:
    """Entropy-minimize one block on the perturbed set, re-measure prototypes
    on the clean set, return their similarity, and restore the model bitwise.

    BN running-stat updates during the probe are discarded so the score
    isolates the block's parameter drift.
    """
    if not 1 <= block_index <= model.num_blocks:
        raise IndexError(f"block index {block_index} out of range 1..{model.num_blocks}")
    image = snapshot(model)
    base = base_prototypes or compute_prototypes(model, clean_source)
    block_params = {n: model.params[n] for n in model.block_param_names(block_index)}
    opt = AdamState(lr=em_config.lr)
    steps = 0
    budget = em_config.max_steps
    for _ in range(em_config.passes):
        for start in range(0, noised_source.n - em_config.batch_size + 1, em_config.batch_size):
            if budget is not None and steps >= budget:
                break
            xb = noised_source.subset(np.arange(start, start + em_config.batch_size)).x
            tape = Tape()
            tape.watch(block_params)
            with tape:
                _, logits = forward(model, xb, bn_mode="batch", update_stats=False)
                loss = entropy_loss(ops.softmax(logits))
            grads = tape.gradients(loss)
            block_params = adam_step(opt, block_params, grads)
            model.params.update(block_params)
            steps += 1
    if steps == 0:
        restore(model, image)
        return 1.0
    shifted = compute_prototypes(model, clean_source)
    score = prototype_similarity(base, shifted)
    restore(model, image)
    return score


@dataclass
class SelectionReport:
    """Raw and scaled per-block similarities, threshold, and the selected set."""

    raw: list[float]
    scaled: list[float]
    gamma: float
    selected: tuple[int, ...]
    perturbation: PerturbationSpec
    seed: int
    degenerate: bool = False
    em: EmConfig = field(default_factory=EmConfig)

    def select(self, gamma: float) -> tuple[int, ...]:
        """Re-threshold the scaled similarities (block indices are 1-based)."""
        return tuple(i + 1 for i, s in enumerate(self.scaled) if s > gamma)

    def to_json(self) -> str:
        payload = {
            "raw": self.raw,
            "scaled": self.scaled,
            "gamma": self.gamma,
            "selected": list(self.selected),
            "perturbation": asdict(self.perturbation),
            "seed": self.seed,
            "degenerate": self.degenerate,
            "em": asdict(self.em),
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SelectionReport":
        d = json.loads(text)
        return cls(
            raw=[float(v) for v in d["raw"]],
            scaled=[float(v) for v in d["scaled"]],
            gamma=float(d["gamma"]),
            selected=tuple(int(i) for i in d["selected"]),
            perturbation=PerturbationSpec(**d["perturbation"]),
            seed=int(d["seed"]),
            degenerate=bool(d.get("degenerate", False)),
            em=EmConfig(**d.get("em", {})),
        )

    def save(self, path) -> None:
        from pathlib import Path

        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SelectionReport":
        from pathlib import Path

        return cls.from_json(Path(path).read_text())


def select_blocks(
    model: BlockNet,
    source: ImageBatch,
    gamma: float,
    perturbation: PerturbationSpec | None = None,
    em_config: EmConfig | None = None,
    rng: Rng | None = None,
) -> SelectionReport:
    """Score every block, min-max scale, and select those above the threshold.

    The perturbed copy of the source set is drawn once and reused for every
    block probe; the model comes back bitwise unchanged.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    perturbation = perturbation or PerturbationSpec()
    em_config = em_config or EmConfig()
    rng = rng or Rng(0)
    before = snapshot(model)
    noised = perturb(source, perturbation, rng)
    base = compute_prototypes(model, source)
    raw = [
        block_sensitivity(model, noised, i, em_config, source, base_prototypes=base)
        for i in range(1, model.num_blocks + 1)
    ]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        scaled = minmax_scale(raw)
        degenerate = any("degenerate" in str(w.message) for w in caught)
    selected = tuple(i + 1 for i, s in enumerate(scaled) if s > gamma)
    restore(model, before)
    return SelectionReport(
        raw=raw,
        scaled=scaled,
        gamma=gamma,
        selected=selected,
        perturbation=perturbation,
        seed=rng.seed,
        degenerate=degenerate,
        em=em_config,
    )
