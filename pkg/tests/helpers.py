"""Shared builders and numerical oracles for the test suite."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from splitnas.topology import DeviceProfile, LayerAssignment, LinkSpec, Topology

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "splitnas" / "configs"
CHAIN4 = CONFIGS / "chain4.json"
MESH6 = CONFIGS / "mesh6.json"


def central_diff(f, x: np.ndarray, h: float = 1e-5, points: int = 3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (perturbed in place).

    ``points=5`` uses the fourth-order stencil, accurate enough for the
    1e-8 checks on smooth functions with a step around 1e-3.
    """
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]

        def at(step):
            x[i] = old + step
            v = f()
            x[i] = old
            return v
        if points == 5:
            g[i] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
        else:
            g[i] = (at(h) - at(-h)) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def chain_topology(speeds, caps) -> Topology:
    devices = [DeviceProfile(i + 1, f"d{i + 1}", float(s)) for i, s in enumerate(speeds)]
    links = [LinkSpec(i + 1, i + 2, float(c)) for i, c in enumerate(caps)]
    return Topology(devices, links, "chain")


def mesh_topology(n_prefix: int, n_branches: int, n_suffix: int, speeds=None, caps=None) -> Topology:
    """Prefix chain -> root -> parallel branches -> aggregator -> rest of the suffix chain."""
    M = n_prefix + 1 + n_branches + n_suffix
    speeds = speeds or [1.0] * M
    devices = [DeviceProfile(i + 1, f"d{i + 1}", float(speeds[i])) for i in range(M)]
    prefix = list(range(1, n_prefix + 1))
    root = n_prefix + 1
    branches = list(range(root + 1, root + 1 + n_branches))
    suffix = list(range(root + 1 + n_branches, M + 1))
    pairs = list(zip(prefix, prefix[1:] + [root]))
    pairs += [(root, b) for b in branches] + [(b, suffix[0]) for b in branches]
    pairs += list(zip(suffix, suffix[1:]))
    caps = caps or [50.0] * len(pairs)
    links = [LinkSpec(a, b, float(c)) for (a, b), c in zip(pairs, caps)]
    return Topology(devices, links, "mesh", chain_set=prefix + suffix, tree_set=[root] + branches, root=root)


def random_assignment(topo: Topology, N: int, rng) -> LayerAssignment:
    M = topo.M
    cuts = np.sort(rng.choice(np.arange(1, N), size=M - 1, replace=False)) if M > 1 else []
    sizes = np.diff(np.concatenate([[0], cuts, [N]])).astype(int)
    blocks, start = {}, 1
    for m, s in zip(topo.order, sizes):
        blocks[m] = list(range(start, start + s))
        start += s
    la = LayerAssignment(blocks, topo)
    la.validate()
    return la


def random_chain(rng, max_devices=6):
    M = int(rng.integers(1, max_devices + 1))
    topo = chain_topology(rng.uniform(0.2, 5, M), rng.uniform(5, 300, M - 1))
    return topo, random_assignment(topo, int(rng.integers(M, M + 6)), rng)


def random_mesh(rng):
    topo = mesh_topology(int(rng.integers(0, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 3)))
    return topo, random_assignment(topo, int(rng.integers(topo.M, topo.M + 6)), rng)


def random_latencies(assignment: LayerAssignment, rng, zero_frac: float = 0.1):
    topo = assignment.topology
    tau = {n: (0.0 if rng.random() < zero_frac else float(rng.exponential(3.0))) for n in range(1, assignment.N + 1)}
    eps = {m: (0.0 if m == topo.final_device else float(rng.exponential(1.0))) for m in assignment.blocks}
    return tau, eps


def chain_example():
    """Two devices, D^1={1,2}, D^2={3}, tau=(1,2,3), eps=(4,0): T = 10 ms."""
    topo = chain_topology([1.0, 1.0], [25.0])
    la = LayerAssignment({1: [1, 2], 2: [3]}, topo)
    return la, {1: 1.0, 2: 2.0, 3: 3.0}, {1: 4.0, 2: 0.0}


def mesh_example():
    """C={1,5}, root 2, branches 3 and 4: T = (2+1) + max(7, 9) = 12 ms."""
    topo = mesh_topology(1, 2, 1)
    la = LayerAssignment({1: [1], 2: [2], 3: [3], 4: [4], 5: [5]}, topo)
    tau = {1: 1.0, 2: 2.0, 3: 3.0, 4: 5.0, 5: 1.0}
    eps = {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0, 5: 0.0}
    return la, tau, eps


def random_supernet(N: int, R: int, seed: int, shape=(8, 8, 2), num_classes: int = 3, sources=None,
                    loss_mode: str = "multiclass-softmax", pool=None):
    """Supernet with random candidates, biases, head and alphas (nothing left at an exact kink or zero)."""
    from splitnas.supernet import SuperNet

    rng = np.random.default_rng(seed)
    pool = pool or ["identity", "conv3_e3", "conv3_e3_sc", "conv5_e3", "conv5_e6_sc", "conv7_e3", "dense_e3_sc"]
    cands = [[pool[j] for j in rng.choice(len(pool), size=R, replace=False)] for _ in range(N)]
    net = SuperNet(cands, shape, num_classes, sources, loss_mode, seed=seed)
    for k, v in net.params.items():
        if k.endswith(("b_expand", "b_depth", "b_project", ".b")) or k.startswith("head"):
            net.params[k] = v + rng.normal(0, 0.3, v.shape)
    net.set_alphas({k: rng.normal(0, 1, v.shape) for k, v in net.alphas.items()})
    return net, rng


def fd_coord(f, flat: np.ndarray, i: int, h: float = 1e-5) -> float:
    """Central difference of ``f`` along ``flat[i]``.

    The networks are piecewise smooth (ReLU). If the estimate moves when the
    step shrinks tenfold, a kink lies inside the stencil and the smaller step
    is tried instead, down to 1e-8.
    """
    old = flat[i]

    def central(step):
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        return (fp - fm) / (2 * step)

    d = central(h)
    while h > 1e-8:
        d_small = central(h / 10)
        if abs(d - d_small) <= 1e-8 + 1e-6 * abs(d):
            return d
        d, h = d_small, h / 10
    return d


def fd_check_params(net, x, y, mix, max_coords=None, seed=0, floor=1e-6) -> float:
    """Worst relative error between ``net.backward`` weight gradients and central differences.

    ``max_coords`` limits each tensor to a random subset of coordinates; None checks all.
    """
    _, grads, _ = net.backward(x, y, mix)
    rng = np.random.default_rng(seed)
    f = lambda: net.loss(x, y, mix)
    worst = 0.0
    for key, g in grads.items():
        flat = net.params[key].reshape(-1)
        picks = range(flat.size) if max_coords is None or flat.size <= max_coords else \
            rng.choice(flat.size, size=max_coords, replace=False)
        for i in picks:
            worst = max(worst, rel_err(g.reshape(-1)[i], fd_coord(f, flat, i), floor=floor))
    return worst


def plan_from(assignment: LayerAssignment, tau: dict, eps: dict, bits: int = 1000, ops=None):
    """Deployment plan carrying the given per-layer compute and per-device boundary latencies."""
    from splitnas.simulator import Boundary, DeploymentPlan, DeviceBlock

    topo = assignment.topology
    blocks = [DeviceBlock(m, list(assignment.blocks[m]), [(ops or {}).get(n, "identity") for n in assignment.blocks[m]],
                          [tau[n] for n in assignment.blocks[m]]) for m in topo.order]
    bounds = [Boundary(m, topo.next_hops(m), assignment.last_layer(m), bits, eps[m])
              for m in topo.order if topo.next_hops(m)]
    plan = DeploymentPlan(topo, blocks, bounds, bits)
    plan.validate()
    return plan
