"""Full-tree search space: N mixed-operation layers over a fixed layer graph.

Each layer holds R candidate operations and real architecture parameters
``alpha``. A forward pass takes a per-layer *mix* vector: a one-hot gate
(sampled mode) or the softmax probabilities (relaxed mode). The layer output
is ``sum_i mix_i * v_i(x)`` with zero-weight candidates skipped entirely.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import nnkernel as nk
from .nnkernel import CandidateOpSpec, ShapeError


def softmax_probs(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    e = np.exp(a - a.max())
    return e / e.sum()


def arch_grad(dL_dg, p) -> np.ndarray:
    """Gradient with respect to alpha via the softmax Jacobian:
    ``sum_j dL/dg_j * p_j * (delta_ij - p_i)``."""
    dL_dg, p = np.asarray(dL_dg, dtype=float), np.asarray(p, dtype=float)
    return p * dL_dg - p * (p @ dL_dg)


@dataclass
class GateSample:
    """Gate draw for one layer.

    ``onehot`` selects the active candidate for the forward pass. In
    two-path mode ``mask`` has exactly two ones and ``pair_probs`` holds the
    probabilities of those two candidates renormalised to sum to one.
    """

    onehot: np.ndarray
    mask: np.ndarray
    pair_probs: np.ndarray | None = None

    @property
    def active(self) -> int:
        return int(np.flatnonzero(self.onehot)[0])

    @property
    def pair(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.mask))


def sample_gates(p, rng: np.random.Generator, two_path: bool = False) -> GateSample:
    p = np.asarray(p, dtype=float)
    R = p.size
    onehot = np.zeros(R)
    if two_path and np.count_nonzero(p) >= 2:
        pair = np.sort(rng.choice(R, size=2, replace=False, p=p))
        q = p[pair] / p[pair].sum()
        active = pair[rng.choice(2, p=q)]
        mask = np.zeros(R)
        mask[pair] = 1.0
        pair_probs = np.zeros(R)
        pair_probs[pair] = q
        onehot[active] = 1.0
        return GateSample(onehot, mask, pair_probs)
    onehot[rng.choice(R, p=p)] = 1.0
    return GateSample(onehot, onehot.copy())


@dataclass
class MixedOp:
    candidates: list[CandidateOpSpec]
    alpha: np.ndarray

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("a mixed op needs at least one candidate")
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.shape != (len(self.candidates),) or not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha must be finite with one entry per candidate")

    @property
    def R(self) -> int:
        return len(self.candidates)

    @property
    def probs(self) -> np.ndarray:
        return softmax_probs(self.alpha)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.candidates]


class SuperNet:
    """Mixed layers ``1..N`` wired by ``sources`` plus a dense classifier head.

    ``sources[n]`` lists the layers whose outputs feed layer ``n`` (0 is the
    network input). Several sources are concatenated along channels and
    projected back to the layer width by a pointwise fuse weight.
    Layer N feeds the head: global average pooling then a dense map to logits.
    """

    def __init__(self, candidates, input_shape, num_classes: int, sources=None,
                 loss_mode: str = "multiclass-softmax", seed: int = 0):
        N = len(candidates)
        if N < 1:
            raise ValueError("supernet needs at least one layer")
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.loss_mode = loss_mode
        self.sources = {n: list(s) for n, s in (sources or {n: [n - 1] for n in range(1, N + 1)}).items()}
        if sorted(self.sources) != list(range(1, N + 1)):
            raise ValueError("sources must cover layers 1..N")
        for n, src in self.sources.items():
            if not src or any(s >= n or s < 0 for s in src):
                raise ValueError(f"layer {n} sources {src} must precede it")
        rng = np.random.default_rng(seed)
        self.layers = []
        self.params: dict[str, np.ndarray] = {}
        C = self.input_shape[-1]
        for n, cands in enumerate(candidates, start=1):
            specs = [c if isinstance(c, CandidateOpSpec) else CandidateOpSpec.parse(c) for c in cands]
            self.layers.append(MixedOp(specs, np.zeros(len(specs))))
            for i, spec in enumerate(specs):
                for key, w in nk.init_weights(spec, C, rng).items():
                    self.params[f"L{n}.{i}.{key}"] = w
            if len(self.sources[n]) > 1:
                k = len(self.sources[n])
                self.params[f"fuse{n}.w"] = np.tile(np.eye(C), (k, 1)) / k
                self.params[f"fuse{n}.b"] = np.zeros(C)
        out = 1 if loss_mode == "binary-sigmoid" else num_classes
        self.params["head.w"] = np.zeros((C, out))
        self.params["head.b"] = np.zeros(out)

    # ---------------------------------------------------------- accessors

    @property
    def N(self) -> int:
        return len(self.layers)

    def layer(self, n: int) -> MixedOp:
        return self.layers[n - 1]

    @property
    def alphas(self) -> dict[str, np.ndarray]:
        return {f"alpha{n}": op.alpha for n, op in enumerate(self.layers, start=1)}

    def set_alphas(self, alphas: dict[str, np.ndarray]):
        for n, op in enumerate(self.layers, start=1):
            op.alpha = np.asarray(alphas[f"alpha{n}"], dtype=float)

    def probs(self) -> dict[int, np.ndarray]:
        return {n: op.probs for n, op in enumerate(self.layers, start=1)}

    def names(self) -> dict[int, list[str]]:
        return {n: op.names for n, op in enumerate(self.layers, start=1)}

    def candidate_weights(self, n: int, i: int) -> dict[str, np.ndarray]:
        keys = self._weight_keys().get((n, i), ())
        return {short: self.params[full] for short, full in keys}

    def _weight_keys(self):
        if getattr(self, "_keys_for", None) is None or self._keys_src is not self.params:
            index = {}
            for full in self.params:
                if full.startswith("L"):
                    layer, cand, short = full[1:].split(".", 2)
                    index.setdefault((int(layer), int(cand)), []).append((short, full))
            self._keys_for, self._keys_src = index, self.params
        return self._keys_for

    def l2(self) -> float:
        return float(sum(np.vdot(w, w) for w in self.params.values()))

    def copy(self) -> "SuperNet":
        return copy.deepcopy(self)

    # ---------------------------------------------------------- mixes

    def relaxed_mix(self) -> dict[int, np.ndarray]:
        return self.probs()

    def onehot_mix(self, indices) -> dict[int, np.ndarray]:
        mix = {}
        for n, op in enumerate(self.layers, start=1):
            g = np.zeros(op.R)
            g[indices[n - 1]] = 1.0
            mix[n] = g
        return mix

    def sample(self, rng: np.random.Generator, two_path: bool = False, uniform: bool = False) -> dict[int, GateSample]:
        """Independent gate draw per layer, from the softmax probabilities or uniformly."""
        out = {}
        for n, op in enumerate(self.layers, start=1):
            p = np.full(op.R, 1.0 / op.R) if uniform else op.probs
            out[n] = sample_gates(p, rng, two_path)
        return out

    # ---------------------------------------------------------- passes

    def _layer_input(self, n, x, outs, cache):
        src = self.sources[n]
        if len(src) == 1:
            return x if src[0] == 0 else outs[src[0]]
        parts = [x if s == 0 else outs[s] for s in src]
        cat = np.concatenate(parts, axis=-1)
        cache[("fuse", n)] = cat
        return cat @ self.params[f"fuse{n}.w"] + self.params[f"fuse{n}.b"]

    def forward(self, x, mix: dict[int, np.ndarray], keep_cache: bool = False):
        """Return logits, and the pass cache if ``keep_cache``."""
        x = np.asarray(x, dtype=nk.DTYPE)
        if x.ndim == len(self.input_shape):
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        outs, cache = {}, {}
        for n, op in enumerate(self.layers, start=1):
            inp = self._layer_input(n, x, outs, cache)
            w = np.asarray(mix[n], dtype=float)
            if w.shape != (op.R,):
                raise ShapeError(f"layer {n}: mix of length {w.shape} for {op.R} candidates")
            y = None
            for i in np.flatnonzero(w):
                v, c = nk.forward_cached(op.candidates[i], self.candidate_weights(n, i), inp)
                cache[(n, i)] = (v, c)
                y = w[i] * v if y is None else y + w[i] * v
            if y is None:
                raise ValueError(f"layer {n}: mix has no active candidate")
            cache[("in", n)] = inp
            outs[n] = y
        final = outs[self.N]
        cache["final"] = final
        pooled = final.mean(axis=(1, 2))
        cache["pooled"] = pooled
        logits = pooled @ self.params["head.w"] + self.params["head.b"]
        return (logits, cache) if keep_cache else logits

    def predict(self, x, mix) -> np.ndarray:
        return self.forward(x, mix)

    def loss(self, x, y, mix) -> float:
        return nk.loss_ce(self._fit_logits(self.forward(x, mix)), y, self.loss_mode)[0]

    def _fit_logits(self, logits):
        return logits[:, 0] if self.loss_mode == "binary-sigmoid" else logits

    def backward(self, x, y, mix, gate_candidates: dict[int, list[int]] | None = None, weight_grads: bool = True):
        """Loss, parameter gradients and (optionally) gate gradients.

        ``gate_candidates[n]`` lists the candidates of layer n whose gate
        gradient ``<dL/d out_n, v_i(in_n)>`` is wanted; candidates absent from
        the mix are evaluated on the layer input without entering the pass.
        With ``weight_grads=False`` only the head, fuse and gate gradients are formed.
        """
        x = np.asarray(x, dtype=nk.DTYPE)
        logits, cache = self.forward(x, mix, keep_cache=True)
        loss, dz = nk.loss_ce(self._fit_logits(logits), y, self.loss_mode)
        dz = dz.reshape(logits.shape)
        final = cache["final"]
        # only parameters on the active paths get an entry
        grads = {k: np.zeros_like(v) for k, v in self.params.items() if k.startswith("fuse")}
        grads["head.w"] = cache["pooled"].T @ dz
        grads["head.b"] = dz.sum(axis=0)
        hw = final.shape[1] * final.shape[2]
        gpool = dz @ self.params["head.w"].T / hw
        gout = {self.N: np.broadcast_to(gpool[:, None, None, :], final.shape).copy()}
        gates = {}
        for n in range(self.N, 0, -1):
            op = self.layers[n - 1]
            g = gout.pop(n, None)
            if g is None:
                continue
            w = np.asarray(mix[n], dtype=float)
            inp = cache[("in", n)]
            if gate_candidates is not None and n in gate_candidates:
                vs = []
                for i in gate_candidates[n]:
                    v = cache[(n, i)][0] if (n, i) in cache else nk.candidate_forward(op.candidates[i], self.candidate_weights(n, i), inp)
                    vs.append(v)
                gates[n] = nk.loss_grad_gates(g, vs)
            g_in = np.zeros_like(inp)
            for i in np.flatnonzero(w):
                cw = self.candidate_weights(n, i)
                gx, gw = nk.backward_cached(op.candidates[i], cw, cache[(n, i)][1], w[i] * g, weight_grads)
                g_in += gx
                for key, val in gw.items():
                    k = f"L{n}.{i}.{key}"
                    grads[k] = grads[k] + val if k in grads else val
            src = self.sources[n]
            if len(src) > 1:
                cat = cache[("fuse", n)]
                grads[f"fuse{n}.w"] += cat.reshape(-1, cat.shape[-1]).T @ g_in.reshape(-1, g_in.shape[-1])
                grads[f"fuse{n}.b"] += g_in.reshape(-1, g_in.shape[-1]).sum(axis=0)
                g_cat = g_in @ self.params[f"fuse{n}.w"].T
                parts = np.split(g_cat, len(src), axis=-1)
            else:
                parts = [g_in]
            for s, gp in zip(src, parts):
                if s > 0:
                    gout[s] = gout[s] + gp if s in gout else gp
        return loss, grads, gates

    # ---------------------------------------------------------- derivation

    def derive_compact(self) -> list[int]:
        """Per-layer argmax of alpha (0-based; ties go to the lowest index)."""
        return [int(np.argmax(op.alpha)) for op in self.layers]

    def compact(self, indices=None) -> "SuperNet":
        """Single-candidate network keeping the chosen ops and their trained weights."""
        indices = self.derive_compact() if indices is None else list(indices)
        net = copy.copy(self)
        net.layers = [MixedOp([op.candidates[i]], np.zeros(1)) for op, i in zip(self.layers, indices)]
        net.params = {}
        for n, i in enumerate(indices, start=1):
            for key, w in self.candidate_weights(n, i).items():
                net.params[f"L{n}.0.{key}"] = w.copy()
        for key, w in self.params.items():
            if not key.startswith("L"):
                net.params[key] = w.copy()
        net.sources = {n: list(s) for n, s in self.sources.items()}
        return net

    def single_mix(self) -> dict[int, np.ndarray]:
        return {n: np.ones(1) for n in range(1, self.N + 1)}

    def architecture(self, indices=None) -> dict[int, str]:
        indices = self.derive_compact() if indices is None else indices
        return {n: self.layers[n - 1].candidates[i].name for n, i in enumerate(indices, start=1)}
