"""Dense numpy kernels for tiny supernets.

Activations use channels-last layout ``(batch, height, width, channels)``.
Every candidate operation maps its input to an output of identical shape so
that candidates of one layer can be mixed by a weighted sum.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64
BITS_PER_VALUE = 32
RMS_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when a tensor does not satisfy an operation's shape contract."""


@dataclass(frozen=True)
class CandidateOpSpec:
    kind: str  # "identity" | "dense" | "conv"
    kernel: int = 0
    expansion: int = 1
    shortcut: bool = False

    def __post_init__(self):
        if self.kind not in ("identity", "dense", "conv"):
            raise ValueError(f"unknown candidate kind {self.kind!r}")
        if self.kind == "conv" and self.kernel not in (3, 5, 7):
            raise ValueError(f"conv kernel must be 3, 5 or 7, got {self.kernel}")
        if self.kind != "identity" and self.expansion < 1:
            raise ValueError("expansion ratio must be >= 1")
        if self.kind == "identity" and self.shortcut:
            raise ValueError("identity cannot carry a shortcut")

    @property
    def name(self) -> str:
        if self.kind == "identity":
            return "identity"
        base = f"conv{self.kernel}_e{self.expansion}" if self.kind == "conv" else f"dense_e{self.expansion}"
        return base + ("_sc" if self.shortcut else "")

    @classmethod
    def parse(cls, name: str) -> "CandidateOpSpec":
        if name == "identity":
            return cls("identity")
        m = re.fullmatch(r"conv(\d)_e(\d+)(_sc)?", name)
        if m:
            return cls("conv", int(m.group(1)), int(m.group(2)), bool(m.group(3)))
        m = re.fullmatch(r"dense_e(\d+)(_sc)?", name)
        if m:
            return cls("dense", 0, int(m.group(1)), bool(m.group(2)))
        raise ValueError(f"cannot parse candidate name {name!r}")

    def __str__(self):
        return self.name


def full_candidate_family() -> list[CandidateOpSpec]:
    """Identity plus every conv kernel/expansion pair with and without shortcut (13 ops)."""
    ops = [CandidateOpSpec("identity")]
    for k in (3, 5, 7):
        for e in (3, 6):
            for sc in (False, True):
                ops.append(CandidateOpSpec("conv", k, e, sc))
    return ops


def macs(spec: CandidateOpSpec, shape) -> int:
    """Multiply-accumulate count of one forward pass on a single sample of ``shape`` (H, W, C)."""
    h, w, c = shape
    if spec.kind == "identity":
        return 0
    ce = c * spec.expansion
    pix = h * w
    total = 2 * pix * c * ce
    if spec.kind == "conv":
        total += pix * ce * spec.kernel * spec.kernel
    if spec.shortcut:
        total += pix * c
    return total


def init_weights(spec: CandidateOpSpec, channels: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if spec.kind == "identity":
        return {}
    ce = channels * spec.expansion
    w = {
        "w_expand": rng.normal(0.0, np.sqrt(2.0 / channels), (channels, ce)),
        "b_expand": np.zeros(ce),
        "w_project": rng.normal(0.0, np.sqrt(1.0 / ce), (ce, channels)),
        "b_project": np.zeros(channels),
    }
    if spec.kind == "conv":
        k = spec.kernel
        w["w_depth"] = rng.normal(0.0, np.sqrt(2.0 / (k * k)), (k, k, ce))
        w["b_depth"] = np.zeros(ce)
    return w


def _check_weights(spec, weights, channels):
    if spec.kind == "identity":
        return
    ce = channels * spec.expansion
    expected = {"w_expand": (channels, ce), "b_expand": (ce,), "w_project": (ce, channels), "b_project": (channels,)}
    if spec.kind == "conv":
        expected["w_depth"] = (spec.kernel, spec.kernel, ce)
        expected["b_depth"] = (ce,)
    for key, shp in expected.items():
        if key not in weights or weights[key].shape != shp:
            got = None if key not in weights else weights[key].shape
            raise ShapeError(f"{spec.name}: weight {key} expected shape {shp}, got {got}")


def depthwise_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-1, same-padded depthwise convolution (cross-correlation)."""
    k = kernel.shape[0]
    pad = k // 2
    _, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            out += xp[:, u:u + h, v:v + w, :] * kernel[u, v]
    return out


def depthwise_conv_backward(x, kernel, grad):
    k = kernel.shape[0]
    pad = k // 2
    _, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernel)
    for u in range(k):
        for v in range(k):
            gk[u, v] = np.einsum("bijc,bijc->c", xp[:, u:u + h, v:v + w, :], grad)
            gxp[:, u:u + h, v:v + w, :] += grad * kernel[u, v]
    return gxp[:, pad:pad + h, pad:pad + w, :], gk


def _rms_normalize(z):
    """Scale each sample to unit root-mean-square over all non-batch axes."""
    axes = tuple(range(1, z.ndim))
    rms = np.sqrt(np.mean(z * z, axis=axes, keepdims=True) + RMS_EPS)
    return z / rms, rms


def _rms_normalize_backward(z, rms, grad):
    axes = tuple(range(1, z.ndim))
    size = np.prod([z.shape[a] for a in axes])
    return grad / rms - z * np.sum(grad * z, axis=axes, keepdims=True) / (rms ** 3 * size)


def _forward(spec, weights, x):
    if spec.kind == "identity":
        return x, None
    h1 = x @ weights["w_expand"] + weights["b_expand"]
    a1 = np.maximum(h1, 0.0)
    cache = {"x": x, "h1": h1, "a1": a1}
    if spec.kind == "conv":
        h2 = depthwise_conv(a1, weights["w_depth"]) + weights["b_depth"]
        a2 = np.maximum(h2, 0.0)
        cache["h2"], cache["a2"] = h2, a2
        mid = a2
    else:
        mid = a1
    z = mid @ weights["w_project"] + weights["b_project"]
    y, rms = _rms_normalize(z)
    cache["z"], cache["rms"] = z, rms
    if spec.shortcut:
        y = y + x
    return y, cache


def _sum_leading(a):
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def _outer_leading(a, g):
    return a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def _backward(spec, weights, cache, grad, weight_grads=True):
    if spec.kind == "identity":
        return grad, {}
    gw = {}
    grad_y = grad
    grad = _rms_normalize_backward(cache["z"], cache["rms"], grad)
    mid = cache["a2"] if spec.kind == "conv" else cache["a1"]
    if weight_grads:
        gw["w_project"] = _outer_leading(mid, grad)
        gw["b_project"] = _sum_leading(grad)
    gmid = grad @ weights["w_project"].T
    if spec.kind == "conv":
        gh2 = gmid * (cache["h2"] > 0)
        if weight_grads:
            gw["b_depth"] = _sum_leading(gh2)
            ga1, gw["w_depth"] = depthwise_conv_backward(cache["a1"], weights["w_depth"], gh2)
        else:
            # input gradient of a same-padded correlation is a correlation with the flipped kernel
            ga1 = depthwise_conv(gh2, weights["w_depth"][::-1, ::-1])
    else:
        ga1 = gmid
    gh1 = ga1 * (cache["h1"] > 0)
    if weight_grads:
        gw["w_expand"] = _outer_leading(cache["x"], gh1)
        gw["b_expand"] = _sum_leading(gh1)
    gx = gh1 @ weights["w_expand"].T
    if spec.shortcut:
        gx = gx + grad_y
    return gx, gw


def _as_batch(spec, x):
    x = np.asarray(x, dtype=DTYPE)
    if spec.kind == "conv":
        if x.ndim == 3:
            return x[None], True
        if x.ndim != 4:
            raise ShapeError(f"{spec.name}: expected (B,H,W,C) or (H,W,C) input, got shape {x.shape}")
    elif x.ndim < 1:
        raise ShapeError(f"{spec.name}: scalar input")
    return x, False


def forward_cached(spec: CandidateOpSpec, weights, x):
    """Forward pass that also returns the cache consumed by :func:`backward_cached`."""
    x, squeezed = _as_batch(spec, x)
    _check_weights(spec, weights, x.shape[-1])
    y, cache = _forward(spec, weights, x)
    return (y[0] if squeezed else y), (cache, squeezed)


def backward_cached(spec: CandidateOpSpec, weights, cache, upstream, weight_grads: bool = True):
    cache, squeezed = cache
    upstream = np.asarray(upstream, dtype=DTYPE)
    if squeezed:
        upstream = upstream[None]
    if cache is not None and upstream.shape != cache["x"].shape:
        raise ShapeError(f"{spec.name}: upstream gradient shape {upstream.shape} != output shape {cache['x'].shape}")
    gx, gw = _backward(spec, weights, cache, upstream, weight_grads)
    return (gx[0] if squeezed else gx), gw


def candidate_forward(spec: CandidateOpSpec, weights, x) -> np.ndarray:
    return forward_cached(spec, weights, x)[0]


def candidate_backward(spec: CandidateOpSpec, weights, x, upstream):
    """Return ``(grad_x, grad_weights)`` of ``<upstream, candidate_forward(x)>``."""
    x = np.asarray(x, dtype=DTYPE)
    upstream = np.asarray(upstream, dtype=DTYPE)
    if upstream.shape != x.shape:
        raise ShapeError(f"{spec.name}: upstream gradient shape {upstream.shape} != output shape {x.shape}")
    _, cache = forward_cached(spec, weights, x)
    return backward_cached(spec, weights, cache, upstream)


# ---------------------------------------------------------------- losses


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def loss_ce(logits, labels, mode: str = "multiclass-softmax"):
    """Mean cross-entropy over the batch and its gradient with respect to ``logits``.

    ``binary-sigmoid`` takes one logit per sample (shape ``(K,)`` or ``(K, 1)``)
    with labels in {0, 1}; ``multiclass-softmax`` takes ``(K, classes)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    if mode == "binary-sigmoid":
        z = logits.reshape(-1)
        if labels.shape != z.shape:
            raise ShapeError(f"binary loss: {z.shape[0]} logits for {labels.size} labels")
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("binary labels must be 0 or 1")
        k = z.shape[0]
        y = labels.astype(DTYPE)
        # -[y log h + (1-y) log(1-h)] == softplus(z) - y z
        per = np.logaddexp(0.0, z) - y * z
        grad = ((sigmoid(z) - y) / k).reshape(logits.shape)
        return float(per.mean()), grad
    if mode != "multiclass-softmax":
        raise ValueError(f"unknown loss mode {mode!r}")
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"multiclass loss: logits {logits.shape}, labels {labels.shape}")
    k, classes = logits.shape
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    logp = _log_softmax(logits)
    rows = np.arange(k)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(max(loss, 0.0)), grad / k


def loss_grad_gates(dL_dout, candidate_outputs) -> np.ndarray:
    """Gradient of the loss with respect to each gate of a mixed output.

    The mixed output is ``sum_j g_j v_j(x)``, so ``dL/dg_j = <dL/dout, v_j(x)>``.
    """
    dL_dout = np.asarray(dL_dout, dtype=DTYPE)
    out = np.empty(len(candidate_outputs))
    for j, v in enumerate(candidate_outputs):
        v = np.asarray(v, dtype=DTYPE)
        if v.shape != dL_dout.shape:
            raise ShapeError(f"candidate {j} output shape {v.shape} != gradient shape {dL_dout.shape}")
        out[j] = np.vdot(dL_dout, v)
    return out


# ---------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None

    def __post_init__(self):
        self.m = {} if self.m is None else self.m
        self.v = {} if self.v is None else self.v


@dataclass
class SGDState:
    step: int = 0


def _check_finite(grads):
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise FloatingPointError(f"non-finite gradient for {key!r} ({bad} bad entries)")


def optimizer_step(state, params: dict, grads: dict, lr: float, masks: dict | None = None) -> dict:
    """Return updated copies of ``params``; ``state`` is advanced in place.

    ``masks`` optionally restricts the update of a parameter to entries where
    the mask is true (moments of masked-out entries are left untouched).
    """
    _check_finite(grads)
    state.step += 1
    new = {}
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            new[key] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key!r} has shape {g.shape}, parameter {p.shape}")
        mask = None if masks is None else masks.get(key)
        if isinstance(state, SGDState):
            delta = lr * g
        else:
            m = state.m.get(key, np.zeros_like(p))
            v = state.v.get(key, np.zeros_like(p))
            m_new = state.beta1 * m + (1 - state.beta1) * g
            v_new = state.beta2 * v + (1 - state.beta2) * g * g
            if mask is not None:
                m_new = np.where(mask, m_new, m)
                v_new = np.where(mask, v_new, v)
            state.m[key], state.v[key] = m_new, v_new
            mhat = m_new / (1 - state.beta1 ** state.step)
            vhat = v_new / (1 - state.beta2 ** state.step)
            delta = lr * mhat / (np.sqrt(vhat) + state.eps)
        if mask is not None:
            delta = np.where(mask, delta, 0.0)
        new[key] = p - delta
    return new
