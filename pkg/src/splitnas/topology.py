"""Mobile-edge network model: devices, links, chain/mesh structure and layer placement."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

from .nnkernel import BITS_PER_VALUE


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    name: str
    speed_factor: float = 1.0

    def __post_init__(self):
        if not self.speed_factor > 0:
            raise TopologyError(f"device {self.id}: speed_factor must be > 0")


@dataclass(frozen=True)
class LinkSpec:
    tx: int
    rx: int
    capacity: float  # Mbps
    kind: str = "wireless"

    def __post_init__(self):
        if self.tx == self.rx:
            raise TopologyError(f"link {self.tx}->{self.rx} is a self loop")
        if not self.capacity > 0:
            raise TopologyError(f"link {self.tx}->{self.rx}: capacity must be > 0")
        if self.kind not in ("wireless", "wired"):
            raise TopologyError(f"link {self.tx}->{self.rx}: unknown kind {self.kind!r}")


@dataclass
class Topology:
    devices: list[DeviceProfile]
    links: list[LinkSpec]
    kind: str = "chain"
    chain_set: list[int] = field(default_factory=list)
    tree_set: list[int] = field(default_factory=list)
    root: int | None = None
    # derived by validate()
    prefix: list[int] = field(default_factory=list, repr=False)
    branches: list[int] = field(default_factory=list, repr=False)
    suffix: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.validate()

    @property
    def M(self) -> int:
        return len(self.devices)

    def device(self, m: int) -> DeviceProfile:
        return self._by_id[m]

    def link(self, tx: int, rx: int) -> LinkSpec:
        try:
            return self._links[(tx, rx)]
        except KeyError:
            raise TopologyError(f"no link {tx}->{rx}") from None

    def successors(self, m: int) -> list[int]:
        return sorted(rx for (tx, rx) in self._links if tx == m)

    @property
    def order(self) -> list[int]:
        """Devices in layer-placement order (mesh: prefix, root, branches, suffix)."""
        if self.kind == "chain":
            return list(self.prefix)
        return self.prefix + [self.root] + self.branches + self.suffix

    @property
    def first_device(self) -> int:
        return self.order[0]

    @property
    def final_device(self) -> int:
        return self.order[-1]

    def validate(self):
        ids = [d.id for d in self.devices]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise TopologyError(f"device ids must be contiguous 1..M, got {ids}")
        self._by_id = {d.id: d for d in self.devices}
        self._links = {}
        for ln in self.links:
            for end in (ln.tx, ln.rx):
                if end not in self._by_id:
                    raise TopologyError(f"link {ln.tx}->{ln.rx} references unknown device {end}")
            if (ln.tx, ln.rx) in self._links:
                raise TopologyError(f"duplicate link {ln.tx}->{ln.rx}")
            self._links[(ln.tx, ln.rx)] = ln
        if self.kind == "chain":
            self._validate_chain()
        elif self.kind == "mesh":
            self._validate_mesh()
        else:
            raise TopologyError(f"unknown topology kind {self.kind!r}")

    def _follow_path(self, start, allowed):
        path = [start]
        while True:
            nxt = [rx for rx in self.successors(path[-1]) if rx in allowed]
            if not nxt:
                return path
            if len(nxt) > 1 or nxt[0] in path:
                raise TopologyError(f"device {path[-1]} does not continue a single path")
            path.append(nxt[0])

    def _validate_chain(self):
        M = self.M
        indeg = {m: 0 for m in self._by_id}
        for (_, rx) in self._links:
            indeg[rx] += 1
        sources = [m for m, d in indeg.items() if d == 0]
        if len(self.links) != M - 1 or len(sources) != 1 or any(d > 1 for d in indeg.values()):
            raise TopologyError("chain topology must form a single directed path over all devices")
        path = self._follow_path(sources[0], set(self._by_id))
        if len(path) != M:
            raise TopologyError("chain topology is disconnected")
        self.prefix, self.branches, self.suffix = path, [], []
        self.chain_set = self.chain_set or list(path)

    def _validate_mesh(self):
        C, T, r = set(self.chain_set), set(self.tree_set), self.root
        if C & T:
            raise TopologyError(f"chain_set and tree_set overlap: {sorted(C & T)}")
        if C | T != set(self._by_id):
            raise TopologyError("chain_set and tree_set must cover every device")
        if r not in T:
            raise TopologyError(f"root {r} must belong to tree_set")
        branches = sorted(T - {r})
        if not branches:
            raise TopologyError("mesh needs at least one non-root tree device")
        aggs = set()
        for b in branches:
            if (r, b) not in self._links:
                raise TopologyError(f"tree device {b} is not fed by root {r}")
            outs = self.successors(b)
            if len(outs) != 1 or outs[0] not in C:
                raise TopologyError(f"tree device {b} must send to exactly one chain device")
            aggs.add(outs[0])
        if len(aggs) != 1:
            raise TopologyError(f"all branches must feed one aggregation device, got {sorted(aggs)}")
        agg = aggs.pop()
        extra_root = [rx for rx in self.successors(r) if rx not in branches]
        if extra_root:
            raise TopologyError(f"root {r} links to non-branch devices {extra_root}")
        into_root = [tx for (tx, rx) in self._links if rx == r]
        prefix: list[int] = []
        if into_root:
            if len(into_root) != 1 or into_root[0] not in C:
                raise TopologyError(f"root {r} must be fed by at most one chain device")
            node = into_root[0]
            prefix = [node]
            while True:
                preds = [tx for (tx, rx) in self._links if rx == node]
                if not preds:
                    break
                if len(preds) > 1 or preds[0] not in C or preds[0] in prefix:
                    raise TopologyError(f"chain prefix before root is not a simple path at {node}")
                node = preds[0]
                prefix.insert(0, node)
        suffix = self._follow_path(agg, C)
        if len(prefix) + len(suffix) != len(C) or set(prefix) & set(suffix):
            raise TopologyError("disconnected graph: some chain devices are unreachable")
        n_expected = len(prefix) + 2 * len(branches) + len(suffix) - 1
        if len(self.links) != n_expected:
            raise TopologyError("mesh contains links outside the chain/broadcast/aggregation pattern")
        self.prefix, self.branches, self.suffix = prefix, branches, suffix

    def next_hops(self, m: int) -> list[int]:
        """Devices that receive device ``m``'s block output."""
        order = self.order
        if self.kind == "chain":
            i = order.index(m)
            return order[i + 1:i + 2]
        return self.successors(m)

    def upload_path(self) -> list[int]:
        """Shortest hop path from the first to the final device (ties: lowest ids)."""
        src, dst = self.first_device, self.final_device
        prev = {src: None}
        q = deque([src])
        while q:
            u = q.popleft()
            for v in self.successors(u):
                if v not in prev:
                    prev[v] = u
                    q.append(v)
        if dst not in prev:
            raise TopologyError("final device unreachable from first device")
        path = [dst]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        return path[::-1]

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "devices": [{"id": x.id, "name": x.name, "speed_factor": x.speed_factor} for x in self.devices],
            "links": [{"tx": x.tx, "rx": x.rx, "capacity_mbps": x.capacity, "kind": x.kind} for x in self.links],
        }
        if self.kind == "mesh":
            d.update(chain_set=sorted(self.chain_set), tree_set=sorted(self.tree_set), root=self.root)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def parse_topology(text: str) -> Topology:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise TopologyError(f"malformed topology document: {e}") from None
    try:
        devices = [DeviceProfile(int(d["id"]), str(d.get("name", f"dev{d['id']}")), float(d.get("speed_factor", 1.0)))
                   for d in doc["devices"]]
        links = [LinkSpec(int(x["tx"]), int(x["rx"]), float(x["capacity_mbps"]), x.get("kind", "wireless"))
                 for x in doc.get("links", [])]
        kind = doc.get("kind", "chain")
        return Topology(devices, links, kind,
                        chain_set=[int(m) for m in doc.get("chain_set", [])] if kind == "mesh" else [],
                        tree_set=[int(m) for m in doc.get("tree_set", [])],
                        root=doc.get("root"))
    except (KeyError, TypeError) as e:
        raise TopologyError(f"malformed topology document: missing or bad field {e}") from None


def load_topology(path) -> Topology:
    with open(path) as f:
        return parse_topology(f.read())


def comm_latency(output_bits: float, link: LinkSpec | None) -> float:
    """Transfer time in ms; ``link=None`` denotes the final device (no transfer)."""
    if output_bits < 0:
        raise ValueError("output_bits must be nonnegative")
    if link is None:
        return 0.0
    return output_bits / (link.capacity * 1e6) * 1e3


def output_bits(shape) -> int:
    """Payload of one activation of ``shape`` at 32 bits per value."""
    return math.prod(shape) * BITS_PER_VALUE if len(shape) else 0


@dataclass
class LayerAssignment:
    """Contiguous layer blocks per device (1-based layer indices)."""

    blocks: dict[int, list[int]]
    topology: Topology

    @property
    def N(self) -> int:
        return sum(len(b) for b in self.blocks.values())

    def last_layer(self, m: int) -> int:
        return max(self.blocks[m])

    def device_of(self, n: int) -> int:
        for m, b in self.blocks.items():
            if n in b:
                return m
        raise KeyError(n)

    def layer_inputs(self) -> dict[int, list[int]]:
        """Source layers feeding each layer (0 is the network input).

        A layer with several sources receives the concatenation of their outputs.
        """
        topo = self.topology
        src: dict[int, list[int]] = {}
        feed = [0]
        order = topo.order
        for m in order:
            if topo.kind == "mesh" and m in topo.branches:
                feed_m = [self.last_layer(topo.root)]
            elif topo.kind == "mesh" and topo.suffix and m == topo.suffix[0]:
                feed_m = [self.last_layer(b) for b in topo.branches]
            else:
                feed_m = feed
            for n in self.blocks[m]:
                src[n] = feed_m
                feed_m = [n]
            feed = feed_m
        return src

    def validate(self):
        layers = sorted(n for b in self.blocks.values() for n in b)
        if layers != list(range(1, len(layers) + 1)):
            raise TopologyError("layer blocks must partition 1..N")
        for m, b in self.blocks.items():
            if not b or b != list(range(b[0], b[0] + len(b))):
                raise TopologyError(f"device {m} block {b} is not a nonempty contiguous range")
        flat = [n for m in self.topology.order for n in self.blocks[m]]
        if flat != layers:
            raise TopologyError("blocks are not consecutive in device order")

    def to_dict(self) -> dict:
        return {str(m): list(b) for m, b in sorted(self.blocks.items())}


def build_assignment(N: int, topology: Topology) -> LayerAssignment:
    """Split ``N`` layers into contiguous per-device blocks.

    Every device gets one layer; the remaining ``N - M`` are shared in
    proportion to compute capability (1 / speed_factor) using the largest
    remainder method, ties going to the earlier device in placement order.
    """
    order = topology.order
    M = len(order)
    if N < M:
        raise TopologyError(f"{N} layers cannot cover {M} devices (need at least one layer each)")
    caps = [1.0 / topology.device(m).speed_factor for m in order]
    spare = N - M
    quotas = [spare * c / sum(caps) for c in caps]
    sizes = [1 + math.floor(q) for q in quotas]
    left = N - sum(sizes)
    by_remainder = sorted(range(M), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
    for i in by_remainder[:left]:
        sizes[i] += 1
    blocks, start = {}, 1
    for m, s in zip(order, sizes):
        blocks[m] = list(range(start, start + s))
        start += s
    la = LayerAssignment(blocks, topology)
    la.validate()
    return la
