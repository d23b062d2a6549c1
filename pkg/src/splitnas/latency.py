"""Completion latency of a split deployment, its expectation under architecture
probabilities, and the quadratic constraint penalty."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .nnkernel import CandidateOpSpec, macs
from .topology import LayerAssignment, Topology, comm_latency, output_bits


class LatencyTableError(KeyError):
    pass


@dataclass
class LatencyTable:
    """Per-operation execution latency U[n, m, op] and boundary transfer latency eps[n, m], in ms."""

    exec: dict[tuple[int, int, str], float] = field(default_factory=dict)
    comm: dict[tuple[int, int], float] = field(default_factory=dict)

    def U(self, n: int, m: int, names) -> np.ndarray:
        try:
            return np.array([self.exec[(n, m, str(v))] for v in names], dtype=float)
        except KeyError as e:
            raise LatencyTableError(f"no execution latency for (layer, device, op) = {e.args[0]}") from None

    def eps(self, n: int, m: int, final: bool = False) -> float:
        if final:
            return 0.0
        try:
            return self.comm[(n, m)]
        except KeyError:
            raise LatencyTableError(f"no comm latency for (layer, device) = {(n, m)}") from None

    def resolve(self, assignment: LayerAssignment, arch: dict[int, str]):
        """Per-layer compute and per-device boundary latencies for a fixed architecture."""
        topo = assignment.topology
        tau = {}
        for m, block in assignment.blocks.items():
            for n in block:
                tau[n] = float(self.U(n, m, [arch[n]])[0])
        eps = {m: self.eps(assignment.last_layer(m), m, final=(m == topo.final_device))
               for m in assignment.blocks}
        return tau, eps

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["kind", "layer", "device", "candidate", "ms"])
        for (n, m, v), ms in sorted(self.exec.items()):
            w.writerow(["exec", n, m, v, repr(float(ms))])
        for (n, m), ms in sorted(self.comm.items()):
            w.writerow(["comm", n, m, "", repr(float(ms))])
        return buf.getvalue()


def parse_latency_table(text: str) -> LatencyTable:
    table = LatencyTable()
    rows = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(rows, None)
    if header != ["kind", "layer", "device", "candidate", "ms"]:
        raise ValueError(f"unexpected latency table header {header}")
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            kind, n, m, v, ms = row
            ms = float(ms)
            n, m = int(n), int(m)
        except ValueError:
            raise ValueError(f"line {lineno}: malformed row {row}") from None
        if ms < 0:
            raise ValueError(f"line {lineno}: negative latency")
        if kind == "exec":
            table.exec[(n, m, v)] = ms
        elif kind == "comm":
            table.comm[(n, m)] = ms
        else:
            raise ValueError(f"line {lineno}: unknown row kind {kind!r}")
    return table


def load_latency_table(path) -> LatencyTable:
    with open(path) as f:
        return parse_latency_table(f.read())


def boundary_link(topology: Topology, m: int):
    """The link charged for device ``m``'s output (slowest one when broadcasting)."""
    hops = topology.next_hops(m)
    if not hops:
        return None
    return min((topology.link(m, h) for h in hops), key=lambda ln: ln.capacity)


def synthesize_table(topology: Topology, N: int, shape, candidates, ms_per_mac: float = 1e-4) -> LatencyTable:
    """Synthetic profile: U = MACs(op, shape) * ms_per_mac * speed_factor(device).

    ``candidates`` is either one list of op names shared by all layers or a
    list of N per-layer lists. Entries are emitted for every (layer, device)
    pair so the same table can price alternative placements.
    """
    per_layer = candidates if candidates and isinstance(candidates[0], (list, tuple)) else [candidates] * N
    bits = output_bits(shape)
    table = LatencyTable()
    for n in range(1, N + 1):
        for dev in topology.devices:
            for name in per_layer[n - 1]:
                spec = CandidateOpSpec.parse(str(name))
                table.exec[(n, dev.id, spec.name)] = macs(spec, shape) * ms_per_mac * dev.speed_factor
            table.comm[(n, dev.id)] = comm_latency(bits, boundary_link(topology, dev.id))
    return table


@dataclass
class CompletionLatency:
    value: float
    compute: dict[int, float]
    comm: dict[int, float]
    critical_branch: int | None = None


def _device_terms(assignment, tau, eps):
    compute = {m: float(sum(tau[n] for n in block)) for m, block in assignment.blocks.items()}
    comm = {m: float(eps[m]) for m in assignment.blocks}
    return compute, comm


def chain_latency(assignment: LayerAssignment, tau: dict[int, float], eps: dict[int, float]) -> CompletionLatency:
    """Sum over devices of block compute plus the transfer of the block's last output."""
    compute, comm = _device_terms(assignment, tau, eps)
    order = assignment.topology.order
    return CompletionLatency(sum(compute[m] + comm[m] for m in order), compute, comm)


def mesh_branch_terms(assignment, compute, comm) -> dict[int, float]:
    topo = assignment.topology
    r = topo.root
    return {b: compute[r] + comm[r] + compute[b] + comm[b] for b in topo.branches}


def mesh_latency(assignment: LayerAssignment, tau: dict[int, float], eps: dict[int, float]) -> CompletionLatency:
    """Chain devices summed, plus the slowest root-and-branch path (ties: lowest id)."""
    topo = assignment.topology
    if topo.kind != "mesh":
        raise ValueError("mesh_latency needs a mesh topology")
    compute, comm = _device_terms(assignment, tau, eps)
    chain_part = sum(compute[m] + comm[m] for m in topo.prefix + topo.suffix)
    terms = mesh_branch_terms(assignment, compute, comm)
    crit = min(terms, key=lambda b: (-terms[b], b))
    return CompletionLatency(chain_part + terms[crit], compute, comm, crit)


def completion_latency(assignment, tau, eps) -> CompletionLatency:
    if assignment.topology.kind == "mesh":
        return mesh_latency(assignment, tau, eps)
    return chain_latency(assignment, tau, eps)


def expected_op_latency(p, U) -> float:
    p, U = np.asarray(p, dtype=float), np.asarray(U, dtype=float)
    if p.shape != U.shape:
        raise ValueError(f"probability/latency length mismatch {p.shape} vs {U.shape}")
    return float(p @ U)


def latency_grad_alpha(p, U) -> np.ndarray:
    """d/d alpha_i of sum_j p_j U_j with p = softmax(alpha): sum_j U_j p_j (delta_ij - p_i)."""
    p, U = np.asarray(p, dtype=float), np.asarray(U, dtype=float)
    return p * U - p * (p @ U)


def expected_total_latency(probs: dict[int, np.ndarray], names: dict[int, list], assignment: LayerAssignment,
                           table: LatencyTable, with_grad: bool = False):
    """Completion latency with each layer's compute replaced by its expectation.

    ``probs[n]`` and ``names[n]`` give layer n's selection probabilities and
    candidate op names. With ``with_grad`` also returns per-layer gradients of
    the expectation with respect to that layer's architecture parameters.
    """
    topo = assignment.topology
    tau, Us = {}, {}
    for m, block in assignment.blocks.items():
        for n in block:
            Us[n] = table.U(n, m, names[n])
            tau[n] = expected_op_latency(probs[n], Us[n])
    eps = {m: table.eps(assignment.last_layer(m), m, final=(m == topo.final_device)) for m in assignment.blocks}
    lat = completion_latency(assignment, tau, eps)
    if not with_grad:
        return lat.value
    counted = set(topo.order) if topo.kind == "chain" else set(topo.prefix + topo.suffix + [topo.root, lat.critical_branch])
    grads = {}
    for m, block in assignment.blocks.items():
        for n in block:
            grads[n] = latency_grad_alpha(probs[n], Us[n]) if m in counted else np.zeros(len(Us[n]))
    return lat.value, grads


def latency_penalty(T: float, t_const: float, lambda2: float):
    """Quadratic constraint penalty and its derivative with respect to T."""
    if lambda2 < 0:
        raise ValueError("lambda2 must be nonnegative")
    r = T - t_const
    return lambda2 * r * r, 2.0 * lambda2 * r
