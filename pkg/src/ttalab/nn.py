"""Block-partitioned networks: a feature extractor of L named blocks plus a
classifier head, with per-block parameter addressing, EMA teacher updates,
BN recalibration, snapshot/restore, and checkpoint persistence.

Blocks are indexed 1..L in forward order; the classifier is owned by index 0
and is never selectable. A model is single-owner mutable state: forwards in
batch-stats mode may advance its BN running statistics, everything else
rebinding goes through the explicit update operations below.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import ops
from .blob import read_blob, write_blob, BlobFormatError
from .tensor import Rng, Tensor

__all__ = [
    "BlockSpec",
    "BlockNet",
    "ParamImage",
    "SpecError",
    "desk_spec",
    "build_model",
    "forward",
    "snapshot",
    "restore",
    "clone_model",
    "ema_update",
    "recalibrate_bn",
    "save_checkpoint",
    "load_checkpoint",
    "params_equal",
]


class SpecError(ValueError):
    """Architecture specification is inconsistent or mismatched."""


@dataclass(frozen=True)
class BlockSpec:
    """One named block: a residual unit, a standalone stem, or the classifier.

    ``width`` is the output channel count (conv), unit count (dense), or the
    number of classes (classifier). ``include_stem`` folds the image stem
    convolution into the first residual-conv block so the stem is not a
    separately selectable block.
    """

    kind: str  # "residual-conv" | "residual-dense" | "stem" | "classifier"
    width: int
    stride: int = 1
    include_stem: bool = False
    has_bn: bool = True


def desk_spec(classes: int = 4) -> tuple[BlockSpec, ...]:
    """Default desk model: 6 residual-conv blocks, stride 2 at blocks 3 and 5,
    stem folded into block 1, global average pool, linear classifier."""
    return (
        BlockSpec("residual-conv", 16, include_stem=True),
        BlockSpec("residual-conv", 16),
        BlockSpec("residual-conv", 32, stride=2),
        BlockSpec("residual-conv", 32),
        BlockSpec("residual-conv", 64, stride=2),
        BlockSpec("residual-conv", 64),
        BlockSpec("classifier", classes),
    )


class BlockNet:
    """Ordered blocks with named parameters and per-BN running statistics."""

    def __init__(self, spec, in_channels, image_size, plan, params, stats, block_of, dtype):
        self.spec = tuple(spec)
        self.in_channels = in_channels
        self.image_size = image_size
        self._plan = plan
        self.params: dict[str, Tensor] = params
        self.stats: dict[str, Tensor] = stats
        self.block_of: dict[str, int] = block_of
        self.dtype = dtype
        self.bn_momentum = 0.1
        self.bn_eps = ops.BN_EPS

    @property
    def num_blocks(self) -> int:
        return sum(1 for b in self.spec if b.kind != "classifier")

    @property
    def num_classes(self) -> int:
        return self.spec[-1].width

    @property
    def feature_dim(self) -> int:
        return self.params["classifier.w"].shape[0]

    def block_param_names(self, index: int) -> list[str]:
        return [n for n, b in self.block_of.items() if b == index and n in self.params]

    def bn_affine_names(self, blocks=None) -> list[str]:
        names = []
        for n in self.params:
            if not (n.endswith(".gamma") or n.endswith(".beta")):
                continue
            if blocks is not None and self.block_of[n] not in blocks:
                continue
            names.append(n)
        return names

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        return (
            f"BlockNet(blocks={self.num_blocks}, classes={self.num_classes}, "
            f"params={self.param_count()})"
        )


def _validate_spec(spec) -> None:
    spec = tuple(spec)
    if not spec or spec[-1].kind != "classifier":
        raise SpecError("spec must end with a classifier block")
    if sum(1 for b in spec if b.kind == "classifier") != 1:
        raise SpecError("spec must contain exactly one classifier block")
    kinds = {b.kind for b in spec}
    unknown = kinds - {"residual-conv", "residual-dense", "stem", "classifier"}
    if unknown:
        raise SpecError(f"unknown block kinds: {sorted(unknown)}")
    seen_dense = False
    for b in spec[:-1]:
        if b.kind == "residual-dense":
            seen_dense = True
        elif seen_dense:
            raise SpecError("conv/stem blocks cannot follow dense blocks")
        if b.kind != "residual-conv" and b.include_stem:
            raise SpecError("include_stem is only valid on residual-conv blocks")
        if b.stride not in (1, 2):
            raise SpecError(f"unsupported stride {b.stride}")
        if b.width < 1:
            raise SpecError("block width must be positive")


def build_model(
    spec,
    rng: Rng,
    in_channels: int = 3,
    image_size: int = 16,
    dtype=None,
) -> BlockNet:
    """He-style initialized network; BN running statistics start at (0, 1)."""
    _validate_spec(spec)
    spec = tuple(spec)
    dtype = np.dtype(dtype or np.float32).type
    params: dict[str, Tensor] = {}
    stats: dict[str, Tensor] = {}
    block_of: dict[str, int] = {}
    plan: list[dict] = []

    def conv_w(name, block, f, c, k):
        std = np.sqrt(2.0 / (c * k * k))
        params[name] = Tensor._wrap(rng.normal((f, c, k, k), std=std, dtype=dtype))
        block_of[name] = block

    def dense_w(name, block, i, o, std=None):
        std = std if std is not None else np.sqrt(2.0 / i)
        params[name] = Tensor._wrap(rng.normal((i, o), std=std, dtype=dtype))
        block_of[name] = block

    def bn(prefix, block, c):
        params[prefix + ".gamma"] = Tensor._wrap(np.ones(c, dtype=dtype))
        params[prefix + ".beta"] = Tensor._wrap(np.zeros(c, dtype=dtype))
        stats[prefix + ".mean"] = Tensor._wrap(np.zeros(c, dtype=dtype))
        stats[prefix + ".var"] = Tensor._wrap(np.ones(c, dtype=dtype))
        for suffix in (".gamma", ".beta", ".mean", ".var"):
            block_of[prefix + suffix] = block

    ch = in_channels
    hw = image_size
    feat = None
    idx = 0
    for b in spec[:-1]:
        idx += 1
        pfx = f"block{idx}"
        entry = {"index": idx, "kind": b.kind, "spec": b}
        if b.kind == "stem":
            conv_w(f"{pfx}.conv.w", idx, b.width, ch, 3)
            if b.has_bn:
                bn(f"{pfx}.bn", idx, b.width)
            ch = b.width
        elif b.kind == "residual-conv":
            cin = ch
            if b.include_stem:
                conv_w(f"{pfx}.stem.conv.w", idx, b.width, cin, 3)
                if b.has_bn:
                    bn(f"{pfx}.stem.bn", idx, b.width)
                cin = b.width
            conv_w(f"{pfx}.conv1.w", idx, b.width, cin, 3)
            conv_w(f"{pfx}.conv2.w", idx, b.width, b.width, 3)
            if b.has_bn:
                bn(f"{pfx}.bn1", idx, b.width)
                bn(f"{pfx}.bn2", idx, b.width)
            needs_proj = (cin != b.width) or (b.stride != 1)
            if needs_proj:
                conv_w(f"{pfx}.proj.conv.w", idx, b.width, cin, 1)
                if b.has_bn:
                    bn(f"{pfx}.proj.bn", idx, b.width)
            entry["needs_proj"] = needs_proj
            ch = b.width
            hw = (hw + b.stride - 1) // b.stride
        elif b.kind == "residual-dense":
            if feat is None:
                feat = ch * hw * hw  # first dense block flattens the activations
                entry["flatten"] = feat
            fin = feat
            dense_w(f"{pfx}.fc1.w", idx, fin, b.width)
            dense_w(f"{pfx}.fc2.w", idx, b.width, b.width)
            if b.has_bn:
                bn(f"{pfx}.bn1", idx, b.width)
                bn(f"{pfx}.bn2", idx, b.width)
            needs_proj = fin != b.width
            if needs_proj:
                dense_w(f"{pfx}.proj.fc.w", idx, fin, b.width)
                if b.has_bn:
                    bn(f"{pfx}.proj.bn", idx, b.width)
            entry["needs_proj"] = needs_proj
            feat = b.width
        plan.append(entry)

    if feat is None:
        feat = ch  # global average pool over the final conv map
    classes = spec[-1].width
    # smaller spread than the relu layers keeps fresh-init logits near-uniform
    dense_w("classifier.w", 0, feat, classes, std=np.sqrt(1.0 / feat))
    params["classifier.b"] = Tensor._wrap(np.zeros(classes, dtype=dtype))
    block_of["classifier.b"] = 0

    return BlockNet(spec, in_channels, image_size, plan, params, stats, block_of, dtype)


def _apply_bn(model: BlockNet, prefix: str, h: Tensor, mode, update_stats, capture):
    y, nm, nv = ops.batchnorm(
        h,
        model.params[prefix + ".gamma"],
        model.params[prefix + ".beta"],
        model.stats[prefix + ".mean"],
        model.stats[prefix + ".var"],
        mode=mode,
        momentum=model.bn_momentum,
        eps=model.bn_eps,
    )
    if capture is not None and mode == "batch":
        axes = (0,) if h.ndim == 2 else (0, 2, 3)
        capture[prefix] = (h.data.mean(axis=axes), h.data.var(axis=axes))
    if update_stats and mode == "batch":
        model.stats[prefix + ".mean"] = nm
        model.stats[prefix + ".var"] = nv
    return y


def forward(
    model: BlockNet,
    x: Tensor,
    bn_mode: str = "running",
    update_stats: bool = False,
    capture_bn: dict | None = None,
) -> tuple[Tensor, Tensor]:
    """Run the network; returns (penultimate feature, classifier logits).

    In running-stats mode this is a pure function of (params, stats, input).
    In batch-stats mode, ``update_stats=True`` advances the model's running
    statistics by momentum; False computes with batch statistics but leaves
    the model untouched.
    """
    if bn_mode not in ("batch", "running"):
        raise ValueError(f"unknown bn_mode: {bn_mode!r}")
    if update_stats and bn_mode != "batch":
        raise ValueError("update_stats requires batch-stats mode")
    if x.ndim != 4 or x.shape[1] != model.in_channels or x.shape[2] != model.image_size:
        raise ops.ShapeError(
            f"input shape {x.shape} does not match model "
            f"(N,{model.in_channels},{model.image_size},{model.image_size})"
        )

    def bnorm(prefix, h, has_bn):
        if not has_bn:
            return h
        return _apply_bn(model, prefix, h, bn_mode, update_stats, capture_bn)

    h = x
    for entry in model._plan:
        pfx = f"block{entry['index']}"
        b: BlockSpec = entry["spec"]
        if b.kind == "stem":
            h = ops.relu(bnorm(f"{pfx}.bn", ops.conv2d(h, model.params[f"{pfx}.conv.w"]), b.has_bn))
        elif b.kind == "residual-conv":
            if b.include_stem:
                h = ops.relu(
                    bnorm(f"{pfx}.stem.bn", ops.conv2d(h, model.params[f"{pfx}.stem.conv.w"]), b.has_bn)
                )
            ident = h
            z = ops.relu(
                bnorm(f"{pfx}.bn1", ops.conv2d(h, model.params[f"{pfx}.conv1.w"], stride=b.stride), b.has_bn)
            )
            z = bnorm(f"{pfx}.bn2", ops.conv2d(z, model.params[f"{pfx}.conv2.w"]), b.has_bn)
            if entry["needs_proj"]:
                ident = bnorm(
                    f"{pfx}.proj.bn",
                    ops.conv2d(h, model.params[f"{pfx}.proj.conv.w"], stride=b.stride, padding=0),
                    b.has_bn,
                )
            h = ops.relu(ops.add(z, ident))
        elif b.kind == "residual-dense":
            if "flatten" in entry:
                h = ops.reshape(h, (h.shape[0], entry["flatten"]))
            ident = h
            z = ops.relu(bnorm(f"{pfx}.bn1", ops.matmul(h, model.params[f"{pfx}.fc1.w"]), b.has_bn))
            z = bnorm(f"{pfx}.bn2", ops.matmul(z, model.params[f"{pfx}.fc2.w"]), b.has_bn)
            if entry["needs_proj"]:
                ident = bnorm(f"{pfx}.proj.bn", ops.matmul(h, model.params[f"{pfx}.proj.fc.w"]), b.has_bn)
            h = ops.relu(ops.add(z, ident))

    features = ops.mean(h, axis=(2, 3)) if h.ndim == 4 else h
    logits = ops.add(ops.matmul(features, model.params["classifier.w"]), model.params["classifier.b"])
    return features, logits


@dataclass
class ParamImage:
    """Snapshot of parameters and running statistics (optimizer state excluded)."""

    spec: tuple[BlockSpec, ...]
    params: dict[str, Tensor]
    stats: dict[str, Tensor]


def snapshot(model: BlockNet) -> ParamImage:
    return ParamImage(model.spec, dict(model.params), dict(model.stats))


def restore(model: BlockNet, image: ParamImage) -> None:
    if image.spec != model.spec:
        raise SpecError("snapshot comes from a different architecture spec")
    model.params = dict(image.params)
    model.stats = dict(image.stats)


def clone_model(model: BlockNet) -> BlockNet:
    return BlockNet(
        model.spec,
        model.in_channels,
        model.image_size,
        model._plan,
        dict(model.params),
        dict(model.stats),
        dict(model.block_of),
        model.dtype,
    )


def ema_update(teacher: BlockNet, student: BlockNet, decay: float) -> BlockNet:
    """teacher <- decay * teacher + (1 - decay) * student, parameters and
    BN running statistics alike."""
    if teacher.spec != student.spec:
        raise SpecError("teacher and student have different specs")
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    for name, t in teacher.params.items():
        s = student.params[name]
        teacher.params[name] = Tensor._wrap(decay * t.data + (1.0 - decay) * s.data)
    for name, t in teacher.stats.items():
        s = student.stats[name]
        teacher.stats[name] = Tensor._wrap(decay * t.data + (1.0 - decay) * s.data)
    return teacher


def recalibrate_bn(model: BlockNet, x: Tensor) -> BlockNet:
    """Replace all BN running statistics with the batch's empirical per-channel
    statistics, computed layer by layer in one batch-stats forward pass.
    Trainable parameters are untouched."""
    if x.shape[0] < 2:
        raise ops.ShapeError("recalibration needs a batch of at least 2")
    captured: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    forward(model, x, bn_mode="batch", update_stats=False, capture_bn=captured)
    for prefix, (mu, var) in captured.items():
        model.stats[prefix + ".mean"] = Tensor._wrap(np.asarray(mu, dtype=model.dtype))
        model.stats[prefix + ".var"] = Tensor._wrap(np.asarray(var, dtype=model.dtype))
    return model


def _spec_to_meta(model: BlockNet) -> dict:
    return {
        "payload": "model",
        "arch": [asdict(b) for b in model.spec],
        "in_channels": model.in_channels,
        "image_size": model.image_size,
    }


def save_checkpoint(model: BlockNet, path) -> None:
    tensors = [(f"param:{n}", model.block_of[n], p.data) for n, p in model.params.items()]
    tensors += [(f"stat:{n}", model.block_of[n], s.data) for n, s in model.stats.items()]
    write_blob(path, _spec_to_meta(model), tensors)


def load_checkpoint(path) -> BlockNet:
    meta, arrays, _blocks = read_blob(path)
    if meta.get("payload") != "model":
        raise BlobFormatError(f"not a model checkpoint: payload={meta.get('payload')!r}")
    spec = tuple(BlockSpec(**b) for b in meta["arch"])
    skeleton = build_model(spec, Rng(0), in_channels=meta["in_channels"], image_size=meta["image_size"])
    want = {f"param:{n}" for n in skeleton.params} | {f"stat:{n}" for n in skeleton.stats}
    have = set(arrays)
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise BlobFormatError(f"tensor table mismatch (missing={missing}, unexpected={extra})")
    for n in skeleton.params:
        arr = arrays[f"param:{n}"]
        if arr.shape != skeleton.params[n].shape:
            raise BlobFormatError(f"shape mismatch for {n}: {arr.shape}")
        skeleton.params[n] = Tensor._wrap(np.ascontiguousarray(arr, dtype=skeleton.dtype))
    for n in skeleton.stats:
        arr = arrays[f"stat:{n}"]
        if arr.shape != skeleton.stats[n].shape:
            raise BlobFormatError(f"shape mismatch for {n}: {arr.shape}")
        skeleton.stats[n] = Tensor._wrap(np.ascontiguousarray(arr, dtype=skeleton.dtype))
    return skeleton


def params_equal(a: BlockNet, b: BlockNet, stats: bool = True) -> bool:
    if set(a.params) != set(b.params):
        return False
    for n, p in a.params.items():
        if not np.array_equal(p.data, b.params[n].data):
            return False
    if stats:
        if set(a.stats) != set(b.stats):
            return False
        for n, s in a.stats.items():
            if not np.array_equal(s.data, b.stats[n].data):
                return False
    return True
