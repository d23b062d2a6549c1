"""Discrete-event execution of one inference request over a split deployment."""
from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import dataclass, field

from .latency import LatencyTable
from .topology import LayerAssignment, Topology, comm_latency, output_bits, parse_topology


class PlanError(ValueError):
    pass


@dataclass
class DeviceBlock:
    device: int
    layers: list[int]
    ops: list[str]
    exec_ms: list[float]


@dataclass
class Boundary:
    src: int
    dst: list[int]
    layer: int  # 0 means the raw network input
    bits: int
    comm_ms: float


@dataclass
class DeploymentPlan:
    topology: Topology
    blocks: list[DeviceBlock]
    boundaries: list[Boundary]
    input_bits: int = 0

    def block(self, m: int) -> DeviceBlock:
        for b in self.blocks:
            if b.device == m:
                return b
        raise KeyError(m)

    @property
    def num_layers(self) -> int:
        return sum(len(b.layers) for b in self.blocks)

    def validate(self):
        ids = {d.id for d in self.topology.devices}
        seen = []
        for b in self.blocks:
            if b.device not in ids:
                raise PlanError(f"block on unknown device {b.device}")
            if not (len(b.layers) == len(b.ops) == len(b.exec_ms)):
                raise PlanError(f"device {b.device}: layers/ops/exec_ms lengths differ")
            if any(t < 0 for t in b.exec_ms):
                raise PlanError(f"device {b.device}: negative execution latency")
            seen += b.layers
        if sorted(seen) != list(range(1, len(seen) + 1)):
            raise PlanError("plan layers do not partition 1..N")
        hosted = {b.device for b in self.blocks}
        for bd in self.boundaries:
            if bd.src not in hosted or any(d not in hosted for d in bd.dst):
                raise PlanError(f"boundary {bd.src}->{bd.dst} touches a device without a block")
            for d in bd.dst:
                self.topology.link(bd.src, d)
            if bd.comm_ms < 0 or bd.bits < 0:
                raise PlanError(f"boundary {bd.src}->{bd.dst}: negative payload or latency")

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "input_bits": self.input_bits,
            "blocks": [{"device": b.device, "layers": b.layers, "ops": b.ops, "exec_ms": b.exec_ms} for b in self.blocks],
            "boundaries": [{"src": x.src, "dst": x.dst, "layer": x.layer, "bits": x.bits, "comm_ms": x.comm_ms}
                           for x in self.boundaries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def parse_plan(text: str) -> DeploymentPlan:
    try:
        doc = json.loads(text)
        topo = parse_topology(json.dumps(doc["topology"]))
        blocks = [DeviceBlock(int(b["device"]), [int(n) for n in b["layers"]], [str(o) for o in b["ops"]],
                              [float(t) for t in b["exec_ms"]]) for b in doc["blocks"]]
        bounds = [Boundary(int(x["src"]), [int(d) for d in x["dst"]], int(x["layer"]), int(x["bits"]),
                           float(x["comm_ms"])) for x in doc["boundaries"]]
    except (KeyError, TypeError, ValueError) as e:
        raise PlanError(f"malformed plan document: {e}") from None
    plan = DeploymentPlan(topo, blocks, bounds, int(doc.get("input_bits", 0)))
    plan.validate()
    return plan


def load_plan(path) -> DeploymentPlan:
    with open(path) as f:
        return parse_plan(f.read())


def build_plan(assignment: LayerAssignment, table: LatencyTable, arch: dict[int, str], shape,
               input_bits: int | None = None) -> DeploymentPlan:
    """Place the chosen ops on their devices and price every block boundary."""
    topo = assignment.topology
    tau, eps = table.resolve(assignment, arch)
    blocks = [DeviceBlock(m, list(assignment.blocks[m]), [arch[n] for n in assignment.blocks[m]],
                          [tau[n] for n in assignment.blocks[m]]) for m in topo.order]
    bits = output_bits(shape)
    bounds = []
    for m in topo.order:
        hops = topo.next_hops(m)
        if hops:
            bounds.append(Boundary(m, hops, assignment.last_layer(m), bits, eps[m]))
    plan = DeploymentPlan(topo, blocks, bounds, bits if input_bits is None else int(input_bits))
    plan.validate()
    return plan


def cloud_only_plan(plan: DeploymentPlan, table: LatencyTable | None = None) -> DeploymentPlan:
    """All layers on the final device, raw input relayed hop by hop from the first device.

    Without a table, execution latencies are rescaled by the ratio of device
    speed factors (exact for synthesized tables).
    """
    topo = plan.topology
    path = topo.upload_path()
    cloud = path[-1]
    layers, ops, times = [], [], []
    for b in plan.blocks:
        for n, op, t in zip(b.layers, b.ops, b.exec_ms):
            layers.append(n)
            ops.append(op)
            if table is not None:
                times.append(float(table.U(n, cloud, [op])[0]))
            else:
                times.append(t * topo.device(cloud).speed_factor / topo.device(b.device).speed_factor)
    order = sorted(range(len(layers)), key=lambda k: layers[k])
    blocks = [DeviceBlock(m, [], [], []) for m in path[:-1]]
    blocks.append(DeviceBlock(cloud, [layers[k] for k in order], [ops[k] for k in order], [times[k] for k in order]))
    bounds = [Boundary(a, [b], 0, plan.input_bits, comm_latency(plan.input_bits, topo.link(a, b)))
              for a, b in zip(path, path[1:])]
    return DeploymentPlan(topo, blocks, bounds, plan.input_bits)


# ------------------------------------------------------------------ simulation

KIND_ORDER = {"tx_end": 0, "compute_end": 1, "compute_start": 2, "tx_start": 3}


@dataclass(frozen=True)
class TraceEvent:
    time: float
    entity: str
    kind: str
    layer: int = 0


@dataclass
class SimResult:
    completion: float
    trace: list[TraceEvent] = field(default_factory=list)


def _check_acyclic(plan):
    succ = {b.device: set() for b in plan.blocks}
    for bd in plan.boundaries:
        succ[bd.src].update(bd.dst)
    state = {}

    def visit(u):
        state[u] = 1
        for v in succ[u]:
            if state.get(v) == 1:
                raise PlanError(f"cyclic dependency through device {v}")
            if v not in state:
                visit(v)
        state[u] = 2

    for u in succ:
        if u not in state:
            visit(u)


def simulate(plan: DeploymentPlan) -> SimResult:
    """Event-driven run: a device starts once every inbound payload has arrived,
    executes its layers back to back, then transmits its output on each
    outbound boundary concurrently."""
    _check_acyclic(plan)
    blocks = {b.device: b for b in plan.blocks}
    inbound = {m: 0 for m in blocks}
    outbound = {m: [] for m in blocks}
    for bd in plan.boundaries:
        outbound[bd.src].append(bd)
        for d in bd.dst:
            inbound[d] += 1
    queue, trace, seq = [], [], 0

    def push(t, device, kind, payload):
        nonlocal seq
        heapq.heappush(queue, (t, device, KIND_ORDER[kind], seq, kind, payload))
        seq += 1

    first = plan.topology.first_device
    orphans = sorted(m for m in blocks if inbound[m] == 0 and m != first)
    if orphans:
        raise PlanError(f"unreachable devices {orphans}: no inbound payload")
    if first in blocks and inbound[first] == 0:
        push(0.0, first, "compute_start", 0)
    started = set()
    now = 0.0
    while queue:
        now, m, _, _, kind, payload = heapq.heappop(queue)
        block = blocks[m]
        if kind == "compute_start":
            started.add(m)
            idx = payload
            if idx < len(block.layers):
                trace.append(TraceEvent(now, f"dev{m}", "compute_start", block.layers[idx]))
                push(now + block.exec_ms[idx], m, "compute_end", idx)
                continue
            kind = "block_done"
        elif kind == "compute_end":
            idx = payload
            trace.append(TraceEvent(now, f"dev{m}", "compute_end", block.layers[idx]))
            if idx + 1 < len(block.layers):
                push(now, m, "compute_start", idx + 1)
                continue
            kind = "block_done"
        elif kind == "tx_end":
            bd, d = payload
            trace.append(TraceEvent(now, f"link{bd.src}->{d}", "tx_end", bd.layer))
            inbound[d] -= 1
            if inbound[d] == 0:
                push(now, d, "compute_start", 0)
            continue
        if kind == "block_done":
            for bd in outbound[m]:
                for d in bd.dst:
                    trace.append(TraceEvent(now, f"link{bd.src}->{d}", "tx_start", bd.layer))
                    push(now + bd.comm_ms, d, "tx_end", (bd, d))
    missing = sorted(set(blocks) - started)
    if missing:
        raise PlanError(f"unreachable devices {missing}")
    return SimResult(now, trace)


def validate_trace(trace: list[TraceEvent], plan: DeploymentPlan) -> list[str]:
    """Causality, non-overlap and coverage problems found in ``trace`` (empty when valid)."""
    problems = []
    last_time: dict[str, float] = {}
    for ev in trace:
        if ev.time < last_time.get(ev.entity, float("-inf")):
            problems.append(f"{ev.entity}: time goes backwards at {ev.time}")
        last_time[ev.entity] = ev.time
    starts, ends = {}, {}
    for ev in trace:
        if ev.kind == "compute_start":
            starts.setdefault(ev.layer, []).append(ev)
        elif ev.kind == "compute_end":
            ends.setdefault(ev.layer, []).append(ev)
    for b in plan.blocks:
        intervals = []
        for n in b.layers:
            s, e = starts.get(n, []), ends.get(n, [])
            if len(s) != 1 or len(e) != 1:
                problems.append(f"layer {n}: expected one start and one end, got {len(s)}/{len(e)}")
                continue
            if s[0].entity != f"dev{b.device}" or e[0].entity != f"dev{b.device}":
                problems.append(f"layer {n} ran on the wrong device")
            if e[0].time < s[0].time:
                problems.append(f"layer {n} ends before it starts")
            intervals.append((s[0].time, e[0].time, n))
        intervals.sort()
        for (s0, e0, n0), (s1, e1, n1) in zip(intervals, intervals[1:]):
            if s1 < e0:
                problems.append(f"device {b.device}: layers {n0} and {n1} overlap")
    done = {}
    for b in plan.blocks:
        if b.layers and b.layers[-1] in ends and len(ends[b.layers[-1]]) == 1:
            done[b.device] = ends[b.layers[-1]][0].time
    first_start = {b.device: starts[b.layers[0]][0].time for b in plan.blocks
                   if b.layers and len(starts.get(b.layers[0], [])) == 1}
    tx = {(ev.entity, ev.kind): ev.time for ev in trace if ev.kind in ("tx_start", "tx_end")}
    arrivals: dict[int, list[float]] = {}
    for bd in plan.boundaries:
        for d in bd.dst:
            ent = f"link{bd.src}->{d}"
            if (ent, "tx_start") not in tx or (ent, "tx_end") not in tx:
                problems.append(f"{ent}: missing transmission events")
                continue
            if bd.src in done and tx[(ent, "tx_start")] < done[bd.src]:
                problems.append(f"{ent}: transmits before device {bd.src} finishes")
            arrivals.setdefault(d, []).append(tx[(ent, "tx_end")])
    for d, times in arrivals.items():
        if d in first_start and first_start[d] < max(times):
            problems.append(f"device {d} starts before all inputs arrive")
    return problems


def trace_to_tsv(trace: list[TraceEvent]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["time_ms", "entity", "kind", "layer"])
    for ev in trace:
        w.writerow([repr(ev.time), ev.entity, ev.kind, ev.layer])
    return buf.getvalue()
