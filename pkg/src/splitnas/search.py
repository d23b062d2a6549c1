"""Two-stage search: warm-up, alternating weight/architecture updates of the
latency-penalised objective, then compact-model derivation and retraining."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nnkernel as nk
from .data import Dataset
from .latency import LatencyTable, expected_total_latency, latency_grad_alpha, latency_penalty
from .simulator import build_plan, simulate
from .supernet import SuperNet, arch_grad
from .topology import LayerAssignment, Topology, build_assignment, output_bits

log = logging.getLogger(__name__)

DEFAULT_CANDIDATES = ["identity", "conv3_e3_sc", "conv3_e6_sc", "conv5_e3_sc", "conv5_e6_sc", "conv7_e3_sc", "conv7_e6_sc"]


@dataclass
class SearchConfig:
    lambda1: float = 1e-4
    lambda2: float = 0.05
    t_const: float = 10.0
    lr_weights: float = 0.005
    lr_alpha: float = 0.05
    warmup_epochs: int = 5
    search_epochs: int = 15
    retrain_epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    two_path: bool = False
    loss_mode: str = "multiclass-softmax"
    arch_split: str = "validation"  # batches used by architecture steps
    arch_grad_point: str = "sampled"  # "sampled" or "relaxed"
    num_layers: int = 6
    candidates: list = field(default_factory=lambda: list(DEFAULT_CANDIDATES))
    image_size: int = 8
    channels: int = 4
    num_classes: int = 4
    n_train: int = 2000
    n_val: int = 500
    data_seed: int = 0
    ms_per_mac: float = 1e-4
    input_bits: int | None = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "t_const", "lr_weights", "lr_alpha", "ms_per_mac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("warmup_epochs", "search_epochs", "retrain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.num_layers < 1:
            raise ValueError("batch_size and num_layers must be positive")
        if self.arch_split not in ("validation", "train"):
            raise ValueError(f"arch_split must be 'validation' or 'train', got {self.arch_split!r}")
        if self.arch_grad_point not in ("relaxed", "sampled"):
            raise ValueError(f"arch_grad_point must be 'relaxed' or 'sampled', got {self.arch_grad_point!r}")
        if self.loss_mode not in ("multiclass-softmax", "binary-sigmoid"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def layer_candidates(self) -> list[list[str]]:
        c = self.candidates
        if c and isinstance(c[0], (list, tuple)):
            if len(c) != self.num_layers:
                raise ValueError("per-layer candidate lists must match num_layers")
            return [list(x) for x in c]
        return [list(c) for _ in range(self.num_layers)]

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path) -> SearchConfig:
    with open(path) as f:
        return SearchConfig.from_dict(json.load(f))


@dataclass
class SearchState:
    net: SuperNet
    assignment: LayerAssignment
    table: LatencyTable
    config: SearchConfig
    rng: np.random.Generator
    opt_weights: nk.AdamState = field(default_factory=nk.AdamState)
    opt_alpha: nk.AdamState = field(default_factory=nk.AdamState)
    warmup_done: int = 0
    search_done: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class TrainReport:
    architecture: dict[int, str]
    indices: list[int]
    val_accuracy: float
    pre_retrain_accuracy: float
    expected_latency: float
    simulated_latency: float
    t_const: float
    history: list[dict]
    compact: SuperNet = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "architecture": {str(n): v for n, v in self.architecture.items()},
            "indices": self.indices,
            "val_accuracy": self.val_accuracy,
            "pre_retrain_accuracy": self.pre_retrain_accuracy,
            "expected_latency_ms": self.expected_latency,
            "simulated_latency_ms": self.simulated_latency,
            "t_const": self.t_const,
            "epochs": len(self.history),
        }


# ------------------------------------------------------------------ helpers


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _decayed(grads, params, lambda1):
    if lambda1 == 0:
        return grads
    return {k: g + 2.0 * lambda1 * params[k] for k, g in grads.items()}


def evaluate(net: SuperNet, x, y, mix=None, chunk: int = 500):
    """Top-1 accuracy and mean loss; ``mix`` defaults to the argmax architecture."""
    n = len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    mix = net.onehot_mix(net.derive_compact()) if mix is None else mix
    correct, total_loss = 0, 0.0
    for i in range(0, n, chunk):
        xb, yb = x[i:i + chunk], y[i:i + chunk]
        logits = net.forward(xb, mix)
        fit = net._fit_logits(logits)
        total_loss += nk.loss_ce(fit, yb, net.loss_mode)[0] * len(yb)
        pred = (fit > 0).astype(int) if net.loss_mode == "binary-sigmoid" else fit.argmax(axis=1)
        correct += int((pred == yb).sum())
    return correct / n, total_loss / n


def expected_latency(net: SuperNet, assignment, table, with_grad=False):
    return expected_total_latency(net.probs(), net.names(), assignment, table, with_grad=with_grad)


def objective_terms(net: SuperNet, dataset: Dataset, assignment, table, config: SearchConfig) -> dict:
    """Components of the penalised objective at the current parameters.

    The data term is the relaxed-supernet loss on the architecture split.
    """
    x, y = _arch_split(dataset, config)
    data_loss = evaluate(net, x, y, net.relaxed_mix())[1]
    l2 = net.l2()
    E = expected_latency(net, assignment, table)
    penalty = latency_penalty(E, config.t_const, config.lambda2)[0]
    return {"data_loss": data_loss, "l2": l2, "expected_latency": E, "penalty": penalty,
            "objective": data_loss + config.lambda1 * l2 + penalty}


def _arch_split(dataset, config):
    if config.arch_split == "validation":
        return dataset.x_val, dataset.y_val
    return dataset.x_train, dataset.y_train


def _check_loss(loss, where):
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss during {where}")


# ------------------------------------------------------------------ stages


def init_state(topology: Topology, table: LatencyTable, config: SearchConfig) -> SearchState:
    assignment = build_assignment(config.num_layers, topology)
    net = SuperNet(config.layer_candidates(), config.shape, config.num_classes, assignment.layer_inputs(),
                   config.loss_mode, seed=config.seed)
    # check the table covers the search space up front
    expected_latency(net, assignment, table)
    rng = np.random.default_rng([config.seed, 1])
    return SearchState(net, assignment, table, config, rng)


def _weight_step(state, xb, yb, uniform=False):
    net, cfg = state.net, state.config
    gates = net.sample(state.rng, uniform=uniform)
    mix = {n: g.onehot for n, g in gates.items()}
    loss, grads, _ = net.backward(xb, yb, mix)
    _check_loss(loss, "weight step")
    grads = _decayed(grads, net.params, cfg.lambda1)
    net.params = nk.optimizer_step(state.opt_weights, net.params, grads, cfg.lr_weights)
    return loss, gates


def _record(state, dataset, phase, epoch, train_loss):
    cfg = state.config
    row = {"phase": phase, "epoch": epoch, "train_loss": train_loss}
    row.update(objective_terms(state.net, dataset, state.assignment, state.table, cfg))
    acc, vloss = evaluate(state.net, dataset.x_val, dataset.y_val)
    row.update(val_accuracy=acc, val_loss=vloss)
    state.history.append(row)
    log.info("%s epoch %d: loss %.4f  E[T] %.3f ms  acc %.3f", phase, epoch, train_loss, row["expected_latency"], acc)
    return row


def warmup(state: SearchState, dataset: Dataset, config: SearchConfig | None = None, counts=None) -> SearchState:
    """Train weights on uniformly drawn paths; architecture parameters stay frozen.

    ``counts`` (optional, {layer: array}) accumulates how often each candidate was drawn.
    """
    cfg = config or state.config
    for _ in range(cfg.warmup_epochs):
        losses = []
        for idx in _batches(state.rng, len(dataset.y_train), cfg.batch_size):
            loss, gates = _weight_step(state, dataset.x_train[idx], dataset.y_train[idx], uniform=True)
            losses.append(loss)
            if counts is not None:
                for n, g in gates.items():
                    counts.setdefault(n, np.zeros_like(g.onehot))
                    counts[n] += g.onehot
        state.warmup_done += 1
        _record(state, dataset, "warmup", state.warmup_done, float(np.mean(losses)))
    return state


def arch_gradients(state: SearchState, xb, yb):
    """Gradient of the penalised objective with respect to every layer's alpha.

    Returns ``(grads, masks, loss)``; masks are None unless two-path sampling
    restricts the update to the sampled pair.
    """
    net, cfg = state.net, state.config
    gates = net.sample(state.rng, two_path=cfg.two_path)
    probs = net.probs()
    if cfg.two_path:
        point = {n: g.pair_probs if g.pair_probs is not None else g.onehot for n, g in gates.items()}
        jac = point
        wanted = {n: list(g.pair) for n, g in gates.items()}
    else:
        point = probs
        jac = probs
        wanted = {n: list(range(net.layer(n).R)) for n in probs}
    mix = point if cfg.arch_grad_point == "relaxed" else {n: g.onehot for n, g in gates.items()}
    loss, _, dL_dg = net.backward(xb, yb, mix, gate_candidates=wanted, weight_grads=False)
    _check_loss(loss, "architecture step")
    E, dE = expected_latency(net, state.assignment, state.table, with_grad=True)
    _, dpen_dT = latency_penalty(E, cfg.t_const, cfg.lambda2)
    grads, masks = {}, {}
    for n in probs:
        R = net.layer(n).R
        idx = wanted[n]
        full = np.zeros(R)
        full[idx] = dL_dg[n]
        g = arch_grad(full, jac[n])
        if dpen_dT != 0.0:
            if cfg.two_path:
                U = state.table.U(n, state.assignment.device_of(n), net.layer(n).names)
                lat = latency_grad_alpha(jac[n], U) if dE[n].any() else np.zeros(R)
            else:
                lat = dE[n]
            g = g + dpen_dT * lat
        if cfg.two_path:
            mask = np.zeros(R, dtype=bool)
            mask[idx] = True
            g = np.where(mask, g, 0.0)
            masks[f"alpha{n}"] = mask
        grads[f"alpha{n}"] = g
    return grads, (masks if cfg.two_path else None), loss


def run_search(dataset: Dataset, topology: Topology, table: LatencyTable, config: SearchConfig,
               state: SearchState | None = None) -> SearchState:
    """Warm-up followed by alternating weight and architecture steps.

    Each weight step on a training mini-batch is followed by one architecture
    step on a mini-batch from the architecture split.
    """
    state = state or init_state(topology, table, config)
    if state.warmup_done < config.warmup_epochs:
        warmup(state, dataset, config)
    ax, ay = _arch_split(dataset, config)
    for _ in range(config.search_epochs):
        losses = []
        arch_batches = _batches(state.rng, len(ay), config.batch_size)
        for k, idx in enumerate(_batches(state.rng, len(dataset.y_train), config.batch_size)):
            loss, _ = _weight_step(state, dataset.x_train[idx], dataset.y_train[idx])
            losses.append(loss)
            aidx = arch_batches[k % len(arch_batches)]
            grads, masks, _ = arch_gradients(state, ax[aidx], ay[aidx])
            state.net.set_alphas(nk.optimizer_step(state.opt_alpha, state.net.alphas, grads, config.lr_alpha, masks))
        state.search_done += 1
        _record(state, dataset, "search", state.search_done, float(np.mean(losses)))
    return state


def retrain(net: SuperNet, dataset: Dataset, config: SearchConfig, rng, history: list[dict]) -> SuperNet:
    opt = nk.AdamState()
    mix = net.single_mix()
    for epoch in range(1, config.retrain_epochs + 1):
        losses = []
        for idx in _batches(rng, len(dataset.y_train), config.batch_size):
            loss, grads, _ = net.backward(dataset.x_train[idx], dataset.y_train[idx], mix)
            _check_loss(loss, "retraining")
            grads = _decayed(grads, net.params, config.lambda1)
            net.params = nk.optimizer_step(opt, net.params, grads, config.lr_weights)
            losses.append(loss)
        acc, vloss = evaluate(net, dataset.x_val, dataset.y_val, mix)
        history.append({"phase": "retrain", "epoch": epoch, "train_loss": float(np.mean(losses)),
                        "data_loss": vloss, "l2": net.l2(), "expected_latency": float("nan"),
                        "penalty": float("nan"), "objective": float("nan"), "val_accuracy": acc, "val_loss": vloss})
    return net


def derive_and_retrain(state: SearchState, dataset: Dataset, config: SearchConfig | None = None) -> TrainReport:
    cfg = config or state.config
    indices = state.net.derive_compact()
    arch = state.net.architecture(indices)
    compact = state.net.compact(indices)
    pre_acc, _ = evaluate(compact, dataset.x_val, dataset.y_val, compact.single_mix())
    history = list(state.history)
    retrain(compact, dataset, cfg, np.random.default_rng([cfg.seed, 2]), history)
    acc = history[-1]["val_accuracy"] if cfg.retrain_epochs else pre_acc
    onehot = {n: np.eye(state.net.layer(n).R)[i] for n, i in enumerate(indices, start=1)}
    E = expected_total_latency(onehot, state.net.names(), state.assignment, state.table)
    plan = deployment_plan(state, arch)
    sim = simulate(plan).completion
    return TrainReport(arch, indices, acc, pre_acc, E, sim, cfg.t_const, history, compact)


def deployment_plan(state: SearchState, arch: dict[int, str] | None = None):
    arch = arch or state.net.architecture()
    cfg = state.config
    bits = cfg.input_bits if cfg.input_bits is not None else output_bits(cfg.shape)
    return build_plan(state.assignment, state.table, arch, cfg.shape, bits)


HISTORY_FIELDS = ["phase", "epoch", "train_loss", "data_loss", "l2", "expected_latency", "penalty", "objective",
                  "val_accuracy", "val_loss"]


def history_to_tsv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row[k] if isinstance(row[k], (str, int)) else repr(float(row[k])) for k in HISTORY_FIELDS])
    return buf.getvalue()


def save_state(state: SearchState, path):
    arrays = {f"param:{k}": v for k, v in state.net.params.items()}
    arrays.update({f"alpha:{k}": v for k, v in state.net.alphas.items()})
    np.savez(path, **arrays)


def load_state_into(state: SearchState, path) -> SearchState:
    with np.load(path) as z:
        params = {k[6:]: z[k] for k in z.files if k.startswith("param:")}
        alphas = {k[6:]: z[k] for k in z.files if k.startswith("alpha:")}
    if set(params) != set(state.net.params):
        raise ValueError("saved state does not match the configured search space")
    state.net.params = params
    state.net.set_alphas(alphas)
    return state
