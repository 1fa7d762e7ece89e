"""Small graph builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from hmtplan.cost.profiles import Fleet, default_profile
from hmtplan.ir.graph import ComputationGraph, OperatorNode, OpKind, TensorSpec


def fc_chain(widths: list[int], batch: int = 1, name: str = "chain") -> ComputationGraph:
    """x -> fc0 -> fc1 -> ... ; ``widths`` lists the feature widths including the input."""
    tensors = [TensorSpec("x", (batch, widths[0]))]
    nodes = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        out = f"t{i}"
        tensors.append(TensorSpec(out, (batch, b)))
        nodes.append(OperatorNode(f"fc{i}", OpKind.FULLY_CONNECTED, (tensors[-2].id,), (out,),
                                  macs=batch * a * b, param_bytes=4 * (a * b + b)))
    return ComputationGraph.build(nodes, tensors, name=name)


def diamond() -> ComputationGraph:
    t = [TensorSpec(x, (1, 8)) for x in ("x", "a", "b", "c", "d")]
    n = [
        OperatorNode("A", OpKind.RELU, ("x",), ("a",)),
        OperatorNode("B", OpKind.RELU, ("a",), ("b",)),
        OperatorNode("C", OpKind.SIGMOID, ("a",), ("c",)),
        OperatorNode("D", OpKind.ADD, ("b", "c"), ("d",), macs=8),
    ]
    return ComputationGraph.build(n, t)


def conv_bn(extra_consumer: bool = False) -> ComputationGraph:
    t = [TensorSpec("x", (1, 8, 16, 16)), TensorSpec("c", (1, 16, 16, 16)), TensorSpec("b", (1, 16, 16, 16))]
    conv_attrs = {"in_c": 8, "out_c": 16, "kernel": 3, "stride": 1, "groups": 1, "bias": False}
    n = [OperatorNode("conv", OpKind.CONV, ("x",), ("c",), macs=16 * 16 * 16 * 8 * 9, param_bytes=4 * 16 * 8 * 9,
                      attrs=conv_attrs),
         OperatorNode("bn", OpKind.BATCH_NORM, ("c",), ("b",), macs=16 * 16 * 16, param_bytes=4 * 32)]
    if extra_consumer:
        t.append(TensorSpec("r", (1, 16, 16, 16)))
        n.append(OperatorNode("side", OpKind.RELU, ("c",), ("r",)))
    return ComputationGraph.build(n, t)


def random_dag(rng: np.random.Generator, n: int, p: float = 0.35) -> ComputationGraph:
    """Random DAG of FC-like nodes; node i may read any earlier node's output."""
    tensors = [TensorSpec("x", (1, int(rng.integers(4, 64))))]
    nodes = []
    for i in range(n):
        ins = [f"t{j}" for j in range(i) if rng.random() < p] or ["x" if i == 0 or rng.random() < 0.3 else f"t{i - 1}"]
        out = TensorSpec(f"t{i}", (1, int(rng.integers(4, 64))))
        tensors.append(out)
        nodes.append(OperatorNode(f"n{i:02d}", OpKind.FULLY_CONNECTED, tuple(ins), (out.id,),
                                  macs=int(rng.integers(1, 10_000)), param_bytes=int(rng.integers(0, 4096))))
    return ComputationGraph.build(nodes, tensors)


def two_device_fleet(remote_speedup: float = 10.0, bandwidth: float = 1e9) -> Fleet:
    home = default_profile("home", "CPU", 1e9, cache_bytes=1 << 20)
    remote = default_profile("remote", "GPU", 1e9 * remote_speedup, cache_bytes=1 << 20)
    return Fleet({"home": home, "remote": remote}, {frozenset(("home", "remote")): bandwidth}, "home")


def random_problem(rng: np.random.Generator, n: int, nd: int, chain: bool = True, p: float = 0.3):
    """Random offload problem over ``n`` units and ``nd`` devices (device 0 is home)."""
    import itertools
    from hmtplan.partition.offload import OffloadProblem

    compute = tuple(tuple(float(x) for x in rng.uniform(0.1, 2.0, nd) * rng.uniform(0.5, 2.0)) for _ in range(n))
    if chain:
        pairs = [(i, i + 1) for i in range(n - 1)]
    else:
        pairs = [(i, i + 1) for i in range(n - 1)] + [
            (i, j) for i, j in itertools.combinations(range(n), 2) if j > i + 1 and rng.random() < p]
    edges = tuple((u, v, int(rng.integers(1, 2_000_000))) for u, v in pairs)
    bw = np.full((nd, nd), np.inf)
    for a, b in itertools.combinations(range(nd), 2):
        bw[a, b] = bw[b, a] = float(rng.uniform(1e6, 2e7))
    source = tuple([int(rng.integers(0, 1_000_000))] + [0] * (n - 1))
    sink = tuple([0] * (n - 1) + [int(rng.integers(0, 100_000))])
    hop = tuple(float(x) for x in rng.uniform(0, 0.01, nd))
    return OffloadProblem(tuple(f"u{i}" for i in range(n)), tuple(f"d{i}" for i in range(nd)), 0, compute, edges,
                          source, sink, tuple(tuple(float(x) for x in row) for row in bw), hop)


def chain_costs_oracle(problem) -> tuple[np.ndarray, np.ndarray]:
    """Cost of every assignment of a chain problem, vectorized over the full product space.

    On a chain the makespan is the input transfer, plus every compute time,
    plus every cut-edge transfer, plus the result transfer back home.
    Returns (assignments [K, n], costs [K]).
    """
    n, nd = problem.n, len(problem.devices)
    grids = np.meshgrid(*[np.arange(nd)] * n, indexing="ij")
    A = np.stack([g.ravel() for g in grids], axis=1)
    comp = np.asarray(problem.compute)
    bw = np.asarray(problem.bandwidth)
    hop = np.asarray(problem.hop_latency)

    def xfer(nbytes, a, b):
        moved = (a != b) & (nbytes > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(moved, nbytes / bw[a, b] + hop[a], 0.0)
        return t

    cost = comp[np.arange(n), A].sum(axis=1)
    home = np.full(len(A), problem.home)
    cost += xfer(problem.source_bytes[0], home, A[:, 0])
    for u, v, b in problem.edges:
        cost += xfer(b, A[:, u], A[:, v])
    cost += xfer(problem.sink_bytes[-1], A[:, -1], home)
    return A, cost


def optimal_makespan(order, preds, dur, k: int = 2) -> float:
    """Exact minimum makespan on ``k`` identical lanes by branch and bound.

    Enumerates semi-active schedules: tasks are committed in nondecreasing
    start order, each on some lane, starting as early as its lane and
    predecessors allow. Some optimal schedule is always of this form.
    """
    order = list(order)
    idx = {n: i for i, n in enumerate(order)}
    P = [[idx[p] for p in preds[n]] for n in order]
    D = [float(dur[n]) for n in order]
    succ = [[] for _ in order]
    for i, ps in enumerate(P):
        for p in ps:
            succ[p].append(i)
    bl = [0.0] * len(order)
    for i in reversed(range(len(order))):
        bl[i] = D[i] + max((bl[s] for s in succ[i]), default=0.0)
    best = [sum(D)]
    finish = [None] * len(order)

    def rec(lanes, last_start, left, work_left):
        if not left:
            best[0] = min(best[0], max(lanes))
            return
        for i in sorted(left):
            if any(finish[p] is None for p in P[i]):
                continue
            ready = max((finish[p] for p in P[i]), default=0.0)
            tried = set()
            for lane in range(k):
                if lanes[lane] in tried:
                    continue  # identical lanes
                tried.add(lanes[lane])
                start = max(lanes[lane], ready)
                if start < last_start - 1e-12:
                    continue
                end = start + D[i]
                new = list(lanes)
                new[lane] = end
                rest = left - {i}
                finish[i] = end
                # unscheduled tasks start no earlier than now and than their finished predecessors
                lb = max(max(new), (sum(new) + work_left - D[i]) / k,
                         max((max([start] + [finish[p] for p in P[j] if finish[p] is not None]) + bl[j]
                              for j in rest), default=0.0))
                if lb >= best[0] - 1e-12:
                    finish[i] = None
                    continue
                rec(new, start, rest, work_left - D[i])
                finish[i] = None

    rec([0.0] * k, 0.0, frozenset(range(len(order))), sum(D))
    return best[0]


def random_lifetimes(rng: np.random.Generator, n: int, steps: int = 12):
    from hmtplan.engine.memory import Lifetime

    out = []
    for i in range(n):
        a, b = sorted(int(x) for x in rng.integers(0, steps, 2))
        out.append(Lifetime(f"t{i}", a, b, int(rng.integers(1, 65)) * 16))
    return out
