"""Low-rank adapters over frozen attention projections.

Each adapted projection W (d x k) carries a factor pair: B (d x r) drawn
from N(0, 0.02^2) and C (r x k) zeroed, so the update BC is exactly zero
at initialization and the adapted model is transparent. The effective
weight is W + alpha * BC taken literally; a normalized mode scaling by
alpha / r is selectable per adapter and recorded in its file.

Tag-token embeddings are handled as trainable deltas over the base
model's (randomly initialized, never pretrained) tag rows: zero at init,
which is what makes step-0 transparency exact while the trained rows
remain free to move.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidRank, ShapeMismatch
from .tensorio import load_tensors, save_tensors

PROJECTIONS = ("q", "k", "v", "o")
SCALING_MODES = ("literal", "normalized")


@dataclass(frozen=True)
class BaseShapeSpec:
    """What the adapter needs to know about the frozen base model."""

    n_layers: int
    width: int
    base_param_count: int
    fingerprint: str = ""


@dataclass
class LoraLayer:
    target: str
    B: np.ndarray
    C: np.ndarray
    rank: int
    alpha: float
    dropout_rate: float

    def __post_init__(self):
        d, rb = self.B.shape
        rc, k = self.C.shape
        if rb != self.rank or rc != self.rank:
            raise ShapeMismatch(
                f"{self.target}: factor ranks {rb},{rc} != declared {self.rank}"
            )
        if self.rank < 1:
            raise InvalidRank(f"rank must be >= 1, got {self.rank}")
        if self.rank > min(d, k):
            raise InvalidRank(
                f"rank {self.rank} exceeds min(d,k) = {min(d, k)}"
            )


@dataclass
class LoraAdapter:
    layers: list[LoraLayer]
    tag_deltas: np.ndarray  # (2, width): PHON_START row, PHON_END row
    rank: int
    alpha: float
    dropout_rate: float
    scaling: str
    seed: int
    base_spec: BaseShapeSpec

    def __post_init__(self):
        if self.scaling not in SCALING_MODES:
            raise ValueError(f"scaling must be one of {SCALING_MODES}")
        if self.tag_deltas.shape != (2, self.base_spec.width):
            raise ShapeMismatch(
                f"tag deltas shape {self.tag_deltas.shape} != (2, {self.base_spec.width})"
            )
        expected = [
            f"L{i}.{p}" for i in range(self.base_spec.n_layers) for p in PROJECTIONS
        ]
        if [layer.target for layer in self.layers] != expected:
            raise ShapeMismatch("adapter must cover every Q/K/V/O projection in order")

    def scale(self) -> float:
        return self.alpha / self.rank if self.scaling == "normalized" else self.alpha

    def layer_map(self) -> dict[str, LoraLayer]:
        return {layer.target: layer for layer in self.layers}


def init_adapter(
    base_spec: BaseShapeSpec,
    r: int = 16,
    alpha: float = 64.0,
    dropout_rate: float = 0.05,
    seed: int = 0,
    scaling: str = "literal",
) -> LoraAdapter:
    """Fresh adapter: B random (std 0.02), C zero, tag deltas zero."""
    if r < 1:
        raise InvalidRank(f"rank must be >= 1, got {r}")
    if r > base_spec.width:
        raise InvalidRank(f"rank {r} exceeds model width {base_spec.width}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0,1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    d = base_spec.width
    layers = []
    for i in range(base_spec.n_layers):
        for proj in PROJECTIONS:
            B = rng.normal(0.0, 0.02, size=(d, r)).astype(np.float32)
            C = np.zeros((r, d), dtype=np.float32)
            layers.append(
                LoraLayer(
                    target=f"L{i}.{proj}",
                    B=B,
                    C=C,
                    rank=r,
                    alpha=alpha,
                    dropout_rate=dropout_rate,
                )
            )
    tag_deltas = np.zeros((2, d), dtype=np.float32)
    return LoraAdapter(
        layers=layers,
        tag_deltas=tag_deltas,
        rank=r,
        alpha=alpha,
        dropout_rate=dropout_rate,
        scaling=scaling,
        seed=seed,
        base_spec=base_spec,
    )


def effective_weight(W: np.ndarray, layer: LoraLayer, scaling: str = "literal") -> np.ndarray:
    """W + alpha * B C (or alpha/r * B C in normalized mode)."""
    d, rb = layer.B.shape
    rc, k = layer.C.shape
    if W.shape != (d, k):
        raise ShapeMismatch(f"W shape {W.shape} incompatible with ({d},{k})")
    if scaling not in SCALING_MODES:
        raise ValueError(f"scaling must be one of {SCALING_MODES}")
    scale = layer.alpha / layer.rank if scaling == "normalized" else layer.alpha
    return W + scale * (layer.B @ layer.C)


def trainable_param_count(adapter: LoraAdapter) -> tuple[int, float]:
    """(trainable parameter count, ratio against the base model)."""
    count = sum(layer.B.size + layer.C.size for layer in adapter.layers)
    count += adapter.tag_deltas.size
    return count, count / adapter.base_spec.base_param_count


def merge(
    adapter: LoraAdapter,
    weights: dict[str, np.ndarray],
    tag_token_ids: tuple[int, int],
) -> dict[str, np.ndarray]:
    """Bake the adapter into a copy of the base weights.

    Projection matrices get W + scale*BC; the embedding rows of the two
    tag tokens get their deltas. Accumulation runs in float64 and the
    result is stored back at float32.
    """
    out = {name: w.copy() for name, w in weights.items()}
    scale = adapter.scale()
    for layer in adapter.layers:
        W = out[layer.target]
        update = np.float64(scale) * (
            layer.B.astype(np.float64) @ layer.C.astype(np.float64)
        )
        out[layer.target] = (W.astype(np.float64) + update).astype(W.dtype)
    embed = out["embed"]
    for row, tid in enumerate(tag_token_ids):
        embed[tid] = (
            embed[tid].astype(np.float64)
            + adapter.tag_deltas[row].astype(np.float64)
        ).astype(embed.dtype)
    return out


def unmerge(
    adapter: LoraAdapter,
    weights: dict[str, np.ndarray],
    tag_token_ids: tuple[int, int],
) -> dict[str, np.ndarray]:
    """Inverse of merge, exact up to float32 rounding of the storage."""
    out = {name: w.copy() for name, w in weights.items()}
    scale = adapter.scale()
    for layer in adapter.layers:
        W = out[layer.target]
        update = np.float64(scale) * (
            layer.B.astype(np.float64) @ layer.C.astype(np.float64)
        )
        out[layer.target] = (W.astype(np.float64) - update).astype(W.dtype)
    embed = out["embed"]
    for row, tid in enumerate(tag_token_ids):
        embed[tid] = (
            embed[tid].astype(np.float64)
            - adapter.tag_deltas[row].astype(np.float64)
        ).astype(embed.dtype)
    return out


def save_adapter(adapter: LoraAdapter, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for layer in adapter.layers:
        tensors[f"{layer.target}.B"] = layer.B
        tensors[f"{layer.target}.C"] = layer.C
    tensors["tag_deltas"] = adapter.tag_deltas
    meta = {
        "kind": "adapter",
        "rank": str(adapter.rank),
        "alpha": repr(float(adapter.alpha)),
        "dropout": repr(float(adapter.dropout_rate)),
        "scaling": adapter.scaling,
        "seed": str(adapter.seed),
        "base_layers": str(adapter.base_spec.n_layers),
        "base_width": str(adapter.base_spec.width),
        "base_params": str(adapter.base_spec.base_param_count),
        "base_fingerprint": adapter.base_spec.fingerprint,
    }
    save_tensors(path, tensors, meta)


def load_adapter(path) -> LoraAdapter:
    tensors, meta = load_tensors(path)
    base_spec = BaseShapeSpec(
        n_layers=int(meta["base_layers"]),
        width=int(meta["base_width"]),
        base_param_count=int(meta["base_params"]),
        fingerprint=meta.get("base_fingerprint", ""),
    )
    rank = int(meta["rank"])
    alpha = float(meta["alpha"])
    dropout = float(meta["dropout"])
    layers = []
    for i in range(base_spec.n_layers):
        for proj in PROJECTIONS:
            target = f"L{i}.{proj}"
            layers.append(
                LoraLayer(
                    target=target,
                    B=tensors[f"{target}.B"],
                    C=tensors[f"{target}.C"],
                    rank=rank,
                    alpha=alpha,
                    dropout_rate=dropout,
                )
            )
    return LoraAdapter(
        layers=layers,
        tag_deltas=tensors["tag_deltas"],
        rank=rank,
        alpha=alpha,
        dropout_rate=dropout,
        scaling=meta["scaling"],
        seed=int(meta["seed"]),
        base_spec=base_spec,
    )


def adapters_equal(a: LoraAdapter, b: LoraAdapter) -> bool:
    """Bitwise equality of all factors, deltas, and config."""
    if (
        a.rank != b.rank
        or a.alpha != b.alpha
        or a.dropout_rate != b.dropout_rate
        or a.scaling != b.scaling
        or a.seed != b.seed
        or a.base_spec != b.base_spec
    ):
        return False
    if not np.array_equal(
        a.tag_deltas.view(np.uint32), b.tag_deltas.view(np.uint32)
    ):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.target != lb.target:
            return False
        if not np.array_equal(la.B.view(np.uint32), lb.B.view(np.uint32)):
            return False
        if not np.array_equal(la.C.view(np.uint32), lb.C.view(np.uint32)):
            return False
    return True
