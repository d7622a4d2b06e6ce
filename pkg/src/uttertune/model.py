"""Desk-scale decoder-only LM over the joint text+speech id space.

Architecture: learned absolute positions, pre-norm blocks, multi-head
causal attention with Q/K/V/O projections (the LoRA attach points), GELU
feed-forward, untied output head. Everything is numpy with hand-written
reverse-mode gradients; float32 is the canonical storage dtype and
training runs on float64 masters that are cast back once at the end.

The adapter path is computed separately from the frozen path
(x @ W + scale * ((dropout(x)) @ B) @ C) so adapter-input dropout has a
well-defined place and zero-initialized C keeps step-0 logits bitwise
equal to the base model's.

Generation is constrained to the speech-token range: the model's job
after a text prompt is to emit speech codes, and the end-of-speech id
(last id of the range) terminates it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLoss, SequenceTooLong, ShapeMismatch
from .lora import BaseShapeSpec, LoraAdapter, PROJECTIONS
from .tensorio import load_tensors, save_tensors

_LN_EPS = 1e-5
_NEG_INF = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ToyLMConfig:
    vocab_size: int
    speech_offset: int
    speech_count: int
    layers: int = 2
    width: int = 64
    heads: int = 4
    ff_width: int = 256
    max_seq: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")
        if not 0 <= self.speech_offset < self.vocab_size:
            raise ValueError("speech_offset outside vocab")
        if self.speech_offset + self.speech_count > self.vocab_size:
            raise ValueError("speech range exceeds vocab")

    @property
    def eos_id(self) -> int:
        return self.speech_offset + self.speech_count - 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    learning_rate: float = 1e-4
    warmup_fraction: float = 0.10
    batch_size: int = 8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0,1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class TrainingExample:
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.input_ids:
            raise ValueError("input_ids must be non-empty")


def _weight_names(cfg: ToyLMConfig) -> list[str]:
    names = ["embed", "pos"]
    for i in range(cfg.layers):
        names += [f"L{i}.ln1.g", f"L{i}.ln1.b"]
        names += [f"L{i}.{p}" for p in PROJECTIONS]
        names += [f"L{i}.ln2.g", f"L{i}.ln2.b"]
        names += [f"L{i}.ff1", f"L{i}.ff1b", f"L{i}.ff2", f"L{i}.ff2b"]
    names += ["lnf.g", "lnf.b", "head"]
    return names


# Matmul weights get weight decay; embeddings, norms, and biases do not.
def _decayed(name: str) -> bool:
    return (
        name == "head"
        or name.endswith(".ff1")
        or name.endswith(".ff2")
        or name.split(".")[-1] in PROJECTIONS
    )


class ToyLM:
    def __init__(self, config: ToyLMConfig, weights: dict[str, np.ndarray]):
        self.config = config
        expected = _weight_names(config)
        if list(weights) != expected:
            raise ShapeMismatch("weight table does not match the architecture")
        self.weights = weights
        self._params64: dict[str, np.ndarray] | None = None

    # -- construction and persistence -----------------------------------

    @classmethod
    def init(cls, config: ToyLMConfig) -> "ToyLM":
        rng = np.random.default_rng(config.seed)
        d, ff, V = config.width, config.ff_width, config.vocab_size

        def normal(shape):
            return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

        weights: dict[str, np.ndarray] = {
            "embed": normal((V, d)),
            "pos": normal((config.max_seq, d)),
        }
        for i in range(config.layers):
            weights[f"L{i}.ln1.g"] = np.ones(d, dtype=np.float32)
            weights[f"L{i}.ln1.b"] = np.zeros(d, dtype=np.float32)
            for p in PROJECTIONS:
                weights[f"L{i}.{p}"] = normal((d, d))
            weights[f"L{i}.ln2.g"] = np.ones(d, dtype=np.float32)
            weights[f"L{i}.ln2.b"] = np.zeros(d, dtype=np.float32)
            weights[f"L{i}.ff1"] = normal((d, ff))
            weights[f"L{i}.ff1b"] = np.zeros(ff, dtype=np.float32)
            weights[f"L{i}.ff2"] = normal((ff, d))
            weights[f"L{i}.ff2b"] = np.zeros(d, dtype=np.float32)
        weights["lnf.g"] = np.ones(d, dtype=np.float32)
        weights["lnf.b"] = np.zeros(d, dtype=np.float32)
        weights["head"] = normal((d, V))
        return cls(config, weights)

    def param_count(self) -> int:
        return sum(int(w.size) for w in self.weights.values())

    def shape_spec(self) -> BaseShapeSpec:
        return BaseShapeSpec(
            n_layers=self.config.layers,
            width=self.config.width,
            base_param_count=self.param_count(),
            fingerprint=self.fingerprint(),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in _weight_names(self.config):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        meta = {
            "kind": "model",
            "vocab_size": str(self.config.vocab_size),
            "speech_offset": str(self.config.speech_offset),
            "speech_count": str(self.config.speech_count),
            "layers": str(self.config.layers),
            "width": str(self.config.width),
            "heads": str(self.config.heads),
            "ff_width": str(self.config.ff_width),
            "max_seq": str(self.config.max_seq),
            "seed": str(self.config.seed),
        }
        save_tensors(path, self.weights, meta)

    @classmethod
    def load(cls, path) -> "ToyLM":
        tensors, meta = load_tensors(path)
        config = ToyLMConfig(
            vocab_size=int(meta["vocab_size"]),
            speech_offset=int(meta["speech_offset"]),
            speech_count=int(meta["speech_count"]),
            layers=int(meta["layers"]),
            width=int(meta["width"]),
            heads=int(meta["heads"]),
            ff_width=int(meta["ff_width"]),
            max_seq=int(meta["max_seq"]),
            seed=int(meta["seed"]),
        )
        return cls(config, tensors)

    def params64(self) -> dict[str, np.ndarray]:
        if self._params64 is None:
            self._params64 = {
                k: v.astype(np.float64) for k, v in self.weights.items()
            }
        return self._params64

    def invalidate_cache(self) -> None:
        self._params64 = None

    # -- public forward/loss ---------------------------------------------

    def forward(self, ids, adapter: LoraAdapter | None = None) -> np.ndarray:
        """Logits (len(ids), vocab) for one sequence, causal, no dropout."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("forward takes a single id sequence")
        if ids.shape[0] > self.config.max_seq:
            raise SequenceTooLong(
                f"{ids.shape[0]} tokens > max_seq {self.config.max_seq}"
            )
        logits, _ = _forward_batch(
            self.params64(), self.config, ids[None, :], _adapter64(adapter), None
        )
        return logits[0]

    def loss(self, examples, adapter: LoraAdapter | None = None) -> float:
        """Mean next-token cross-entropy over speech positions only."""
        value, _, _ = _loss_forward(
            self.params64(), self.config, examples, _adapter64(adapter), None
        )
        return float(value)


# -- adapter helpers --------------------------------------------------------


def _adapter64(adapter: LoraAdapter | None):
    """(params dict in float64, scale, dropout_rate) or None."""
    if adapter is None:
        return None
    params = {}
    for layer in adapter.layers:
        params[f"{layer.target}.B"] = layer.B.astype(np.float64)
        params[f"{layer.target}.C"] = layer.C.astype(np.float64)
    params["tag_deltas"] = adapter.tag_deltas.astype(np.float64)
    return params, float(adapter.scale()), float(adapter.dropout_rate)


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))


def _gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (
        1.0 + 3.0 * _GELU_A * x * x
    )


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _project(x, W, adapter, name, masks):
    """x @ W plus the adapter path scale*((x*mask) @ B) @ C."""
    base = x @ W
    if adapter is None:
        return base, None
    params, scale, _rate = adapter
    B = params[f"{name}.B"]
    C = params[f"{name}.C"]
    xd = x if masks is None else x * masks[name]
    mid = xd @ B
    return base + scale * (mid @ C), (xd, mid)


def _project_backward(dy, x, W, adapter, name, masks, cache, grads, adapter_grads):
    """Accumulates dW (if grads is not None) and adapter grads; returns dx."""
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    if grads is not None:
        grads[name] += flat_x.T @ flat_dy
    dx = dy @ W.T
    if adapter is not None:
        params, scale, _rate = adapter
        B = params[f"{name}.B"]
        C = params[f"{name}.C"]
        xd, mid = cache
        dmid = scale * (dy @ C.T)
        adapter_grads[f"{name}.C"] += scale * (
            mid.reshape(-1, mid.shape[-1]).T @ flat_dy
        )
        adapter_grads[f"{name}.B"] += (
            xd.reshape(-1, xd.shape[-1]).T @ dmid.reshape(-1, dmid.shape[-1])
        )
        dxd = dmid @ B.T
        if masks is not None:
            dxd = dxd * masks[name]
        dx = dx + dxd
    return dx


def _forward_batch(params, cfg: ToyLMConfig, ids, adapter, dropout_rng):
    """Causal forward over a right-padded id batch.

    Returns (logits (N,T,V), cache for backward). dropout_rng draws the
    adapter-path masks; None disables dropout.
    """
    N, T = ids.shape
    if T > cfg.max_seq:
        raise SequenceTooLong(f"{T} tokens > max_seq {cfg.max_seq}")
    H = cfg.heads
    dh = cfg.width // H
    x = params["embed"][ids] + params["pos"][:T]
    tag_hits = None
    if adapter is not None:
        aparams, _scale, _rate = adapter
        deltas = aparams["tag_deltas"]
        start_id = cfg.speech_offset - 2
        end_id = cfg.speech_offset - 1
        tag_hits = (ids == start_id, ids == end_id)
        for row, hits in enumerate(tag_hits):
            if hits.any():
                x = x + hits[:, :, None] * deltas[row]
    causal = np.triu(np.full((T, T), _NEG_INF), k=1)
    layers_cache = []
    for i in range(cfg.layers):
        ln1_out, ln1_cache = _layer_norm(
            x, params[f"L{i}.ln1.g"], params[f"L{i}.ln1.b"]
        )
        masks = None
        if adapter is not None:
            _aparams, _scale, rate = adapter
            if dropout_rng is not None and rate > 0.0:
                keep = 1.0 - rate
                masks = {
                    f"L{i}.{p}": (
                        dropout_rng.random((N, T, cfg.width)) < keep
                    ).astype(np.float64) / keep
                    for p in PROJECTIONS
                }
        q, q_cache = _project(ln1_out, params[f"L{i}.q"], adapter, f"L{i}.q", masks)
        k, k_cache = _project(ln1_out, params[f"L{i}.k"], adapter, f"L{i}.k", masks)
        v, v_cache = _project(ln1_out, params[f"L{i}.v"], adapter, f"L{i}.v", masks)
        qh = q.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh) + causal
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(N, T, cfg.width)
        attn_out, o_cache = _project(
            ctx, params[f"L{i}.o"], adapter, f"L{i}.o", masks
        )
        x_attn = x + attn_out
        ln2_out, ln2_cache = _layer_norm(
            x_attn, params[f"L{i}.ln2.g"], params[f"L{i}.ln2.b"]
        )
        pre_act = ln2_out @ params[f"L{i}.ff1"] + params[f"L{i}.ff1b"]
        act = _gelu(pre_act)
        ff_out = act @ params[f"L{i}.ff2"] + params[f"L{i}.ff2b"]
        x_new = x_attn + ff_out
        layers_cache.append(
            {
                "x_in": x,
                "ln1_out": ln1_out,
                "ln1_cache": ln1_cache,
                "masks": masks,
                "q_cache": q_cache,
                "k_cache": k_cache,
                "v_cache": v_cache,
                "o_cache": o_cache,
                "qh": qh,
                "kh": kh,
                "vh": vh,
                "attn": attn,
                "ctx": ctx,
                "x_attn": x_attn,
                "ln2_out": ln2_out,
                "ln2_cache": ln2_cache,
                "pre_act": pre_act,
                "act": act,
            }
        )
        x = x_new
    final_out, lnf_cache = _layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = final_out @ params["head"]
    cache = {
        "ids": ids,
        "tag_hits": tag_hits,
        "layers": layers_cache,
        "x_final": x,
        "final_out": final_out,
        "lnf_cache": lnf_cache,
    }
    return logits, cache


def _backward_batch(dlogits, params, cfg: ToyLMConfig, cache, adapter,
                    want_base_grads: bool):
    """Gradients for (optionally) base params and (if present) the adapter."""
    H = cfg.heads
    dh = cfg.width // H
    N, T = cache["ids"].shape
    grads = None
    if want_base_grads:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
    adapter_grads = None
    if adapter is not None:
        aparams, _scale, _rate = adapter
        adapter_grads = {k: np.zeros_like(v) for k, v in aparams.items()}

    flat_final = cache["final_out"].reshape(-1, cfg.width)
    if grads is not None:
        grads["head"] += flat_final.T @ dlogits.reshape(-1, cfg.vocab_size)
    dfinal = dlogits @ params["head"].T
    dx, dg, db = _layer_norm_backward(dfinal, params["lnf.g"], cache["lnf_cache"])
    if grads is not None:
        grads["lnf.g"] += dg
        grads["lnf.b"] += db

    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        # FF block.
        dff_out = dx
        if grads is not None:
            grads[f"L{i}.ff2b"] += dff_out.sum(axis=(0, 1))
            grads[f"L{i}.ff2"] += (
                lc["act"].reshape(-1, cfg.ff_width).T
                @ dff_out.reshape(-1, cfg.width)
            )
        dact = dff_out @ params[f"L{i}.ff2"].T
        dpre = dact * _gelu_grad(lc["pre_act"])
        if grads is not None:
            grads[f"L{i}.ff1b"] += dpre.sum(axis=(0, 1))
            grads[f"L{i}.ff1"] += (
                lc["ln2_out"].reshape(-1, cfg.width).T
                @ dpre.reshape(-1, cfg.ff_width)
            )
        dln2_out = dpre @ params[f"L{i}.ff1"].T
        dx_attn_from_ln2, dg, db = _layer_norm_backward(
            dln2_out, params[f"L{i}.ln2.g"], lc["ln2_cache"]
        )
        if grads is not None:
            grads[f"L{i}.ln2.g"] += dg
            grads[f"L{i}.ln2.b"] += db
        dx_attn = dx + dx_attn_from_ln2

        # Attention output projection.
        dctx = _project_backward(
            dx_attn, lc["ctx"], params[f"L{i}.o"], adapter, f"L{i}.o",
            lc["masks"], lc["o_cache"], grads, adapter_grads,
        )
        dctx_h = dctx.reshape(N, T, H, dh).transpose(0, 2, 1, 3)
        dattn = dctx_h @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = lc["attn"].transpose(0, 1, 3, 2) @ dctx_h
        attn = lc["attn"]
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(dh)
        dqh = dscores @ lc["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"]
        dq = dqh.transpose(0, 2, 1, 3).reshape(N, T, cfg.width)
        dk = dkh.transpose(0, 2, 1, 3).reshape(N, T, cfg.width)
        dv = dvh.transpose(0, 2, 1, 3).reshape(N, T, cfg.width)
        dln1 = _project_backward(
            dq, lc["ln1_out"], params[f"L{i}.q"], adapter, f"L{i}.q",
            lc["masks"], lc["q_cache"], grads, adapter_grads,
        )
        dln1 += _project_backward(
            dk, lc["ln1_out"], params[f"L{i}.k"], adapter, f"L{i}.k",
            lc["masks"], lc["k_cache"], grads, adapter_grads,
        )
        dln1 += _project_backward(
            dv, lc["ln1_out"], params[f"L{i}.v"], adapter, f"L{i}.v",
            lc["masks"], lc["v_cache"], grads, adapter_grads,
        )
        dx_in_from_ln1, dg, db = _layer_norm_backward(
            dln1, params[f"L{i}.ln1.g"], lc["ln1_cache"]
        )
        if grads is not None:
            grads[f"L{i}.ln1.g"] += dg
            grads[f"L{i}.ln1.b"] += db
        dx = dx_attn + dx_in_from_ln1

    ids = cache["ids"]
    if grads is not None:
        np.add.at(grads["embed"], ids, dx)
        grads["pos"][:T] += dx.sum(axis=0)
    if adapter is not None and cache["tag_hits"] is not None:
        for row, hits in enumerate(cache["tag_hits"]):
            if hits.any():
                adapter_grads["tag_deltas"][row] += dx[hits].sum(axis=0)
    return grads, adapter_grads


# -- loss assembly -----------------------------------------------------------


def _pack_batch(examples, eos_id: int):
    """Right-pad sequences; build target grid and prediction mask."""
    seqs = [
        list(ex.input_ids) + list(ex.target_ids) + [eos_id] for ex in examples
    ]
    T = max(len(s) for s in seqs)
    N = len(seqs)
    ids = np.zeros((N, T), dtype=np.int64)
    tgt = np.zeros((N, T), dtype=np.int64)
    mask = np.zeros((N, T), dtype=np.float64)
    for n, (ex, seq) in enumerate(zip(examples, seqs)):
        L = len(seq)
        ids[n, :L] = seq
        li = len(ex.input_ids)
        # Position t predicts token t+1; speech predictions start at the
        # last input position.
        tgt[n, li - 1 : L - 1] = seq[li:]
        mask[n, li - 1 : L - 1] = 1.0
    return ids, tgt, mask


def _loss_forward(params, cfg, examples, adapter, dropout_rng):
    if not examples:
        raise ValueError("empty batch")
    ids, tgt, mask = _pack_batch(examples, cfg.eos_id)
    logits, cache = _forward_batch(params, cfg, ids, adapter, dropout_rng)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1))
    n, t = np.nonzero(mask)
    picked = shifted[n, t, tgt[n, t]]
    total = float((logsumexp[n, t] - picked).sum())
    count = len(n)
    loss = total / count
    return loss, (logits, cache, ids, tgt, mask, shifted, logsumexp, count), None


def _loss_backward(cfg, bundle, params, adapter, want_base_grads):
    logits, cache, ids, tgt, mask, shifted, logsumexp, count = bundle
    probs = np.exp(shifted - logsumexp[..., None])
    dlogits = probs * mask[..., None]
    n, t = np.nonzero(mask)
    dlogits[n, t, tgt[n, t]] -= 1.0
    dlogits /= count
    return _backward_batch(dlogits, params, cfg, cache, adapter, want_base_grads)


def loss_and_grads(model: ToyLM, examples, adapter: LoraAdapter | None = None,
                   dropout_seed: int | None = None):
    """(loss, base grads or None, adapter grads or None) in float64.

    With a dropout_seed and an adapter that has dropout_rate > 0, the
    adapter-path masks are drawn from that seed, so repeated calls are
    reproducible (this is what the finite-difference check relies on).
    """
    params = model.params64()
    adapter64 = _adapter64(adapter)
    rng = None
    if dropout_seed is not None and adapter is not None and adapter.dropout_rate > 0:
        rng = np.random.default_rng(dropout_seed)
    loss, bundle, _ = _loss_forward(params, model.config, examples, adapter64, rng)
    grads, adapter_grads = _loss_backward(
        model.config, bundle, params, adapter64, want_base_grads=adapter is None
    )
    return loss, grads, adapter_grads


def gradient_check(
    model: ToyLM,
    adapter: LoraAdapter,
    examples,
    n_samples: int = 50,
    step: float = 1e-4,
    seed: int = 0,
    dropout_seed: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both routes run entirely in float64; the sampled coordinates span every
    adapter parameter tensor. With dropout active, pass a dropout_seed so
    both routes see identical masks.
    """
    base = model.params64()
    aparams = dict(_adapter64(adapter)[0])
    scale = float(adapter.scale())
    rate = float(adapter.dropout_rate)

    def run_loss():
        rng = None
        if dropout_seed is not None and rate > 0.0:
            rng = np.random.default_rng(dropout_seed)
        value, bundle, _ = _loss_forward(
            base, model.config, examples, (aparams, scale, rate), rng
        )
        return value, bundle

    _, bundle = run_loss()
    _, agrads = _loss_backward(
        model.config, bundle, base, (aparams, scale, rate), False
    )
    names = sorted(aparams)
    sizes = np.array([aparams[n].size for n in names])
    rng = np.random.default_rng(seed)
    flat_picks = rng.choice(int(sizes.sum()), size=n_samples, replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for pick in flat_picks:
        which = int(np.searchsorted(bounds, pick, side="right"))
        offset = int(pick - (bounds[which - 1] if which else 0))
        name = names[which]
        flat = aparams[name].reshape(-1)
        original = flat[offset]
        flat[offset] = original + step
        hi, _ = run_loss()
        flat[offset] = original - step
        lo, _ = run_loss()
        flat[offset] = original
        fd = (hi - lo) / (2.0 * step)
        analytic = float(agrads[name].reshape(-1)[offset])
        denom = max(abs(analytic), abs(fd), 1e-8)
        worst = max(worst, abs(analytic - fd) / denom)
    return worst


# -- optimization ------------------------------------------------------------


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """1-based step; linear warmup to learning_rate, cosine to zero."""
    warmup = max(1, int(round(cfg.warmup_fraction * cfg.steps)))
    if step <= warmup:
        return cfg.learning_rate * step / warmup
    if cfg.steps == warmup:
        return cfg.learning_rate
    progress = (step - warmup) / (cfg.steps - warmup)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class _AdamW:
    def __init__(self, shapes: dict[str, tuple], weight_decay: float,
                 decay_filter):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0
        self.wd = weight_decay
        self.decay_filter = decay_filter
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd > 0.0 and self.decay_filter(name):
                update = update + self.wd * params[name]
            params[name] -= lr * update


def _clip_global(grads: dict, max_norm: float) -> None:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale


def _sample_batch(examples, rng, batch_size):
    idx = rng.integers(0, len(examples), size=batch_size)
    return [examples[int(i)] for i in idx]


def pretrain(model: ToyLM, examples, cfg: TrainConfig):
    """Train every base parameter; stands in for the pretrained checkpoint."""
    if not examples:
        raise ValueError("empty dataset")
    params = {k: v.astype(np.float64) for k, v in model.weights.items()}
    opt = _AdamW(
        {k: v.shape for k, v in params.items()}, cfg.weight_decay, _decayed
    )
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for step in range(1, cfg.steps + 1):
        batch = _sample_batch(examples, rng, cfg.batch_size)
        loss, bundle, _ = _loss_forward(params, model.config, batch, None, None)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss {loss} at step {step}")
        grads, _ = _loss_backward(model.config, bundle, params, None, True)
        _clip_global(grads, cfg.grad_clip)
        opt.step(params, grads, lr_at_step(step, cfg))
        if step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, loss))
    for name in model.weights:
        model.weights[name] = params[name].astype(np.float32)
    model.invalidate_cache()
    return curve


def train_adapter(model: ToyLM, adapter: LoraAdapter, examples, cfg: TrainConfig):
    """Train only the adapter factors and tag deltas; base stays frozen."""
    if not examples:
        raise ValueError("empty dataset")
    base = model.params64()
    aparams = {}
    for layer in adapter.layers:
        aparams[f"{layer.target}.B"] = layer.B.astype(np.float64)
        aparams[f"{layer.target}.C"] = layer.C.astype(np.float64)
    aparams["tag_deltas"] = adapter.tag_deltas.astype(np.float64)
    scale = float(adapter.scale())
    rate = float(adapter.dropout_rate)

    def decay_filter(name: str) -> bool:
        return name != "tag_deltas"

    opt = _AdamW(
        {k: v.shape for k, v in aparams.items()}, cfg.weight_decay, decay_filter
    )
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for step in range(1, cfg.steps + 1):
        batch = _sample_batch(examples, rng, cfg.batch_size)
        dropout_rng = rng if rate > 0.0 else None
        adapter64 = (aparams, scale, rate)
        loss, bundle, _ = _loss_forward(
            base, model.config, batch, adapter64, dropout_rng
        )
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"loss {loss} at step {step}")
        _, agrads = _loss_backward(model.config, bundle, base, adapter64, False)
        _clip_global(agrads, cfg.grad_clip)
        opt.step(aparams, agrads, lr_at_step(step, cfg))
        if step % cfg.log_every == 0 or step == cfg.steps:
            curve.append((step, loss))
    for layer in adapter.layers:
        layer.B = aparams[f"{layer.target}.B"].astype(np.float32)
        layer.C = aparams[f"{layer.target}.C"].astype(np.float32)
    adapter.tag_deltas = aparams["tag_deltas"].astype(np.float32)
    return curve


# -- generation --------------------------------------------------------------


def generate(
    model: ToyLM,
    prompt_ids,
    max_new: int,
    mode: str = "greedy",
    seed: int | None = None,
    temperature: float = 1.0,
    adapter: LoraAdapter | None = None,
) -> list[int]:
    """Emit up to max_new speech-token ids (end-of-speech excluded)."""
    if mode not in ("greedy", "sampled"):
        raise ValueError(f"mode must be greedy or sampled, got {mode!r}")
    cfg = model.config
    prompt = list(int(i) for i in prompt_ids)
    if len(prompt) + max_new > cfg.max_seq:
        raise SequenceTooLong(
            f"prompt {len(prompt)} + max_new {max_new} exceeds max_seq {cfg.max_seq}"
        )
    params = model.params64()
    adapter64 = _adapter64(adapter)
    rng = np.random.default_rng(seed) if mode == "sampled" else None
    ids = list(prompt)
    out: list[int] = []
    lo = cfg.speech_offset
    hi = cfg.speech_offset + cfg.speech_count
    for _ in range(max_new):
        arr = np.asarray(ids, dtype=np.int64)[None, :]
        logits, _ = _forward_batch(params, cfg, arr, adapter64, None)
        speech_logits = logits[0, -1, lo:hi]
        if mode == "greedy":
            nxt = lo + int(np.argmax(speech_logits))
        else:
            z = speech_logits / max(temperature, 1e-8)
            z = z - z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = lo + int(rng.choice(hi - lo, p=p))
        if nxt == cfg.eos_id:
            break
        out.append(nxt)
        ids.append(nxt)
    return out
