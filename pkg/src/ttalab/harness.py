"""End-to-end runner: pretraining, adaptation over streams, ablations,
single-sample mode, and metrics persistence.

A run is strictly sequential (online protocol): stream batches arrive one at
a time, the method predicts and adapts, and one MetricsRecord is emitted per
prediction event. A NaN in any loss or logit aborts the run with a
diagnostic. Wall time is only recorded when the config opts in
(``record_timing``), so that identical config + seed reproduces the metrics
file byte for byte.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .adaptation import (
    AdaptConfig,
    AdaptState,
    StepOutput,
    cross_entropy,
    init_adapt_state,
    method_step,
    warmup,
)
from .config import RunConfig
from .data import ImageBatch, StreamSpec, build_stream, gen_shapegrid, take_batch
from .nn import BlockNet, desk_spec, build_model, forward
from .optim import AdamState, adam_step
from .selection import SelectionReport
from .tensor import Rng, Tape, Tensor, pause_recording

__all__ = [
    "DivergenceError",
    "MetricsRecord",
    "METRICS_HEADER",
    "Pools",
    "Report",
    "build_pools",
    "pretrain",
    "eval_error",
    "run_stream",
    "run_benchmark",
    "run_single_sample",
    "run_ablation",
    "variant_config",
    "write_metrics",
    "read_metrics",
]

METRICS_HEADER = (
    "run_id,seed,method,stream_pos,corruption,severity,batch_err,cum_err,"
    "mean_entropy,max_class_frac,wall_ms"
)

COLLAPSE_FRAC = 0.9
COLLAPSE_RUN = 10


class DivergenceError(RuntimeError):
    """A loss or prediction went NaN/Inf; the run is aborted."""


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    method: str
    stream_pos: int
    corruption: str
    severity: int
    batch_err: float
    cum_err: float
    mean_entropy: float
    max_class_frac: float
    wall_ms: int
    batch_size: int = 0  # bookkeeping only, not a CSV column

    def row(self) -> list:
        return [
            self.run_id,
            self.seed,
            self.method,
            self.stream_pos,
            self.corruption,
            self.severity,
            f"{self.batch_err:.6f}",
            f"{self.cum_err:.6f}",
            f"{self.mean_entropy:.6f}",
            f"{self.max_class_frac:.6f}",
            self.wall_ms,
        ]


@dataclass(frozen=True)
class Pools:
    """Disjoint data pools: training, clean validation, held-out stream pool."""

    train: ImageBatch
    val: ImageBatch
    test: ImageBatch


def build_pools(data_cfg) -> Pools:
    root = Rng(data_cfg.seed)
    r_train, r_val, r_test = root.split(3)
    return Pools(
        train=gen_shapegrid(data_cfg.train, data_cfg.classes, r_train),
        val=gen_shapegrid(data_cfg.val, data_cfg.classes, r_val),
        test=gen_shapegrid(data_cfg.test_pool, data_cfg.classes, r_test),
    )


def eval_error(model: BlockNet, batch: ImageBatch, bn_mode: str = "running", chunk: int = 512) -> float:
    wrong = 0
    with pause_recording():
        for start in range(0, batch.n, chunk):
            part = batch.subset(np.arange(start, min(start + chunk, batch.n)))
            _, logits = forward(model, part.x, bn_mode=bn_mode)
            wrong += int((logits.data.argmax(axis=-1) != part.y).sum())
    return wrong / batch.n


def pretrain(
    train: ImageBatch,
    val: ImageBatch,
    spec=None,
    epochs: int = 5,
    rng: Rng | None = None,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> tuple[BlockNet, float]:
    """Cross-entropy training of the source model on clean data.

    Returns (model, clean validation error in running-stats mode).
    """
    rng = rng or Rng(5)
    spec = spec if spec is not None else desk_spec(train.classes)
    r_init, r_order = rng.split(2)
    model = build_model(spec, r_init)
    opt = AdamState(lr=lr)
    onehot_eye = np.eye(train.classes, dtype=model.dtype)
    for _ in range(epochs):
        order = r_order.permutation(train.n)
        for start in range(0, train.n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            xb = train.subset(idx)
            target = Tensor._wrap(onehot_eye[xb.y])
            params = dict(model.params)
            tape = Tape()
            tape.watch(params)
            with tape:
                _, logits = forward(model, xb.x, bn_mode="batch", update_stats=True)
                loss = cross_entropy(target, ops.softmax(logits))
            if not np.isfinite(loss.item()):
                raise DivergenceError("pretraining loss went NaN/Inf")
            grads = tape.gradients(loss)
            model.params.update(adam_step(opt, params, grads))
    return model, eval_error(model, val)


@dataclass
class Report:
    """Aggregated outcome of one or more seeded runs of a single method."""

    run_id: str
    method: str
    records: list[MetricsRecord]
    per_seed_error: dict[int, float]
    mean_error: float
    by_condition: dict[tuple[str, int], float]
    collapsed: dict[int, bool]
    final_states: list[AdaptState] | None = None

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "method": self.method,
            "mean_error": self.mean_error,
            "median_seed_error": float(np.median(list(self.per_seed_error.values()))),
            "per_seed_error": {str(k): v for k, v in self.per_seed_error.items()},
            "by_condition": {f"{k}@{s}": v for (k, s), v in sorted(self.by_condition.items())},
            "collapsed": {str(k): v for k, v in self.collapsed.items()},
            "n_records": len(self.records),
        }


def _aggregate(run_id: str, method: str, records: list[MetricsRecord], states=None) -> Report:
    per_seed: dict[int, list[MetricsRecord]] = {}
    for r in records:
        per_seed.setdefault(r.seed, []).append(r)
    per_seed_error = {
        s: float(np.average([r.batch_err for r in rs], weights=[r.batch_size for r in rs]))
        for s, rs in per_seed.items()
    }
    mean_error = float(
        np.average([r.batch_err for r in records], weights=[r.batch_size for r in records])
    )
    by_condition: dict[tuple[str, int], list[MetricsRecord]] = {}
    for r in records:
        by_condition.setdefault((r.corruption, r.severity), []).append(r)
    by_condition_err = {
        k: float(np.average([r.batch_err for r in rs], weights=[r.batch_size for r in rs]))
        for k, rs in by_condition.items()
    }
    collapsed = {}
    for s, rs in per_seed.items():
        run = 0
        hit = False
        for r in rs:
            run = run + 1 if r.max_class_frac > COLLAPSE_FRAC else 0
            if run >= COLLAPSE_RUN:
                hit = True
                break
        collapsed[s] = hit
    return Report(run_id, method, records, per_seed_error, mean_error, by_condition_err, collapsed, states)


def _record_step(
    out: StepOutput,
    batch: ImageBatch,
    meta,
    run_id: str,
    seed: int,
    method: str,
    pos: int,
    err_sum: float,
    n_sum: int,
    wall_ms: int,
) -> tuple[MetricsRecord, float, int]:
    if not np.all(np.isfinite(out.logits.data)):
        raise DivergenceError(f"non-finite logits at stream position {pos} (seed {seed})")
    err = float(np.mean(out.pred != batch.y))
    err_sum += err * batch.n
    n_sum += batch.n
    counts = np.bincount(out.pred, minlength=batch.classes)
    rec = MetricsRecord(
        run_id=run_id,
        seed=seed,
        method=method,
        stream_pos=pos,
        corruption=meta.kind,
        severity=meta.severity,
        batch_err=err,
        cum_err=err_sum / n_sum,
        mean_entropy=out.diagnostics.get("mean_entropy", 0.0),
        max_class_frac=float(counts.max() / batch.n),
        wall_ms=wall_ms,
        batch_size=batch.n,
    )
    return rec, err_sum, n_sum


def run_stream(
    state: AdaptState,
    stream,
    run_id: str,
    seed: int,
    record_timing: bool = False,
) -> list[MetricsRecord]:
    """Drive one method over one stream; one record per batch."""
    step = method_step(state.method)
    records: list[MetricsRecord] = []
    err_sum, n_sum = 0.0, 0
    for pos, (batch, meta) in enumerate(stream):
        t0 = time.perf_counter() if record_timing else 0.0
        out = step(state, batch)
        wall = int((time.perf_counter() - t0) * 1000) if record_timing else 0
        rec, err_sum, n_sum = _record_step(
            out, batch, meta, run_id, seed, state.method, pos, err_sum, n_sum, wall
        )
        records.append(rec)
    return records


def _adapt_config_for(cfg: RunConfig, selection: SelectionReport | None) -> AdaptConfig:
    adapt = cfg.adapt
    if cfg.method in ("dplot", "tent+selection"):
        if selection is None:
            raise ValueError(f"method {cfg.method!r} needs a selection report")
        adapt = replace(adapt, selected_blocks=selection.select(cfg.gamma))
    return adapt


def _run_seeded(
    cfg: RunConfig,
    method: str,
    adapt_cfg: AdaptConfig,
    model: BlockNet,
    pools: Pools,
    keep_states: bool = False,
    run_id: str | None = None,
) -> Report:
    run_id = run_id or cfg.run_id
    records: list[MetricsRecord] = []
    states: list[AdaptState] = []
    for seed in cfg.seeds:
        spec = StreamSpec(
            setting=cfg.stream.setting,
            kinds=cfg.stream.kinds,
            batches_per_segment=cfg.stream.batches_per_segment,
            batch_size=cfg.stream.batch_size,
            seed=seed,
        )
        state = init_adapt_state(model, adapt_cfg, method=method, rng=Rng(seed))
        if cfg.warmup_batches > 0 and method == "dplot":
            batches = (
                take_batch(pools.train, i * cfg.stream.batch_size, cfg.stream.batch_size)
                for i in range(cfg.warmup_batches)
            )
            warmup(state, batches, cfg.warmup_batches)
        stream = build_stream(spec, pools.test)
        records.extend(run_stream(state, stream, run_id, seed, cfg.record_timing))
        if keep_states:
            states.append(state)
    return _aggregate(run_id, method, records, states if keep_states else None)


def run_benchmark(
    cfg: RunConfig,
    model: BlockNet,
    pools: Pools,
    selection: SelectionReport | None = None,
    keep_states: bool = False,
) -> Report:
    """Stream the configured benchmark for every seed and aggregate."""
    adapt_cfg = _adapt_config_for(cfg, selection)
    return _run_seeded(cfg, cfg.method, adapt_cfg, model, pools, keep_states)


def _infer_sample(state: AdaptState, x: Tensor) -> StepOutput:
    # batch statistics are undefined for one sample; running stats serve here
    with pause_recording():
        _, logits = forward(state.student, x, bn_mode="running")
        if state.method == "dplot" and state.cfg.ensemble and state.teacher is not None:
            _, t_logits = forward(state.teacher, x, bn_mode="running")
            logits = Tensor._wrap(logits.data + t_logits.data)
    z = logits.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    ent = float(-(p * np.log(np.maximum(p, ops.LOG_EPS))).sum(axis=-1).mean())
    return StepOutput(logits, z.argmax(axis=-1), {"mean_entropy": ent})


def run_single_sample(
    cfg: RunConfig,
    model: BlockNet,
    pools: Pools,
    selection: SelectionReport | None = None,
) -> Report:
    """Per-sample predictions with a b-sample memory buffer.

    The buffer holds the last b test samples; parameters update with one
    method step on the buffer every round(b / freq) samples, with both
    learning rates scaled by b / (configured batch size).
    """
    b = cfg.single_sample.buffer
    cadence = max(1, round(b / cfg.single_sample.freq))
    lr_mult = b / cfg.stream.batch_size
    adapt_cfg = _adapt_config_for(cfg, selection)
    adapt_cfg = replace(
        adapt_cfg,
        lr_entropy=adapt_cfg.lr_entropy * lr_mult,
        lr_consistency=adapt_cfg.lr_consistency * lr_mult,
    )
    step = method_step(cfg.method)
    records: list[MetricsRecord] = []
    for seed in cfg.seeds:
        spec = StreamSpec(
            setting=cfg.stream.setting,
            kinds=cfg.stream.kinds,
            batches_per_segment=cfg.stream.batches_per_segment,
            batch_size=cfg.stream.batch_size,
            seed=seed,
        )
        state = init_adapt_state(model, adapt_cfg, method=cfg.method, rng=Rng(seed))
        buf_x: list[np.ndarray] = []
        buf_y: list[int] = []
        err_sum, n_sum = 0.0, 0
        pos = 0
        for batch, meta in build_stream(spec, pools.test):
            for i in range(batch.n):
                x1 = Tensor._wrap(batch.x.data[i : i + 1].copy())
                t0 = time.perf_counter() if cfg.record_timing else 0.0
                out = _infer_sample(state, x1)
                single = ImageBatch(x1, batch.y[i : i + 1], batch.classes)
                buf_x.append(batch.x.data[i])
                buf_y.append(int(batch.y[i]))
                if len(buf_x) > b:
                    buf_x.pop(0)
                    buf_y.pop(0)
                do_update = (pos + 1) % cadence == 0 and len(buf_x) >= 2 and cfg.method != "source"
                if do_update:
                    mem = ImageBatch(
                        Tensor._wrap(np.stack(buf_x)),
                        np.asarray(buf_y, dtype=np.int64),
                        batch.classes,
                    )
                    step(state, mem)
                wall = int((time.perf_counter() - t0) * 1000) if cfg.record_timing else 0
                rec, err_sum, n_sum = _record_step(
                    out, single, meta, cfg.run_id, seed, cfg.method, pos, err_sum, n_sum, wall
                )
                records.append(rec)
                pos += 1
    return _aggregate(cfg.run_id, cfg.method, records)


def variant_config(variant: str, base: AdaptConfig, selection: SelectionReport | None = None):
    """Resolve an ablation variant name to (method, AdaptConfig).

    A = full method; B drops paired-view consistency; C additionally drops
    the EMA teacher and ensemble; D additionally drops block selection
    (entropy on BN affine parameters only, which is the plain entropy
    baseline). "gamma:<x>" re-thresholds the selection report;
    "plmenu:<menu>" swaps the pseudo-label generation menu.
    """
    if variant == "A":
        return "dplot", base
    if variant == "B":
        return "dplot", replace(base, use_consistency=False, paired_entropy=False)
    if variant == "C":
        return "dplot", replace(
            base, use_consistency=False, use_teacher=False, ensemble=False, paired_entropy=False
        )
    if variant == "D":
        return "dplot", replace(
            base,
            use_consistency=False,
            use_teacher=False,
            ensemble=False,
            paired_entropy=False,
            entropy_scope="bn-affine",
        )
    if variant.startswith("gamma:"):
        gamma = float(variant.split(":", 1)[1])
        if selection is None:
            raise ValueError("gamma sweep variants need a selection report")
        return "dplot", replace(base, selected_blocks=selection.select(gamma))
    if variant.startswith("plmenu:"):
        menu = variant.split(":", 1)[1]
        return "dplot", replace(base, pseudo_label_menu=menu)
    raise ValueError(f"unknown ablation variant: {variant!r}")


def run_ablation(
    cfg: RunConfig,
    variants,
    model: BlockNet,
    pools: Pools,
    selection: SelectionReport,
) -> dict[str, Report]:
    """One report per variant on bitwise-identical streams (shared seeds)."""
    base = replace(cfg.adapt, selected_blocks=selection.select(cfg.gamma))
    reports: dict[str, Report] = {}
    for variant in variants:
        method, adapt_cfg = variant_config(variant, base, selection)
        reports[variant] = _run_seeded(
            cfg, method, adapt_cfg, model, pools, run_id=f"{cfg.run_id}__{variant}"
        )
    return reports


def write_metrics(records: list[MetricsRecord], path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER.split(","))
        for r in records:
            writer.writerow(r.row())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(report: Report, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(report.summary(), indent=1, sort_keys=True) + "\n")
