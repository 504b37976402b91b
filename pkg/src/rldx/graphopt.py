"""Static-graph capture, constant folding, operator fusion, cost model.

A tracer hooks the tensor primitives so one forward pass is recorded as a
topologically ordered DAG of fixed-shape kernel nodes. Three passes make
it fast to replay:

* fold_constants evaluates every constant-rooted subgraph once (masks,
  rotary tables, timestep tokens, position embeddings all disappear),
* fuse rewrites known multi-op patterns into composite kernels whose
  intermediates never materialize,
* a memory-traffic model prices each node as one read per distinct input
  and one write per output, which is what fusion actually saves.

The interpreter replays graphs in float64 or float32 and reports median
wall time over repeats, so folded/fused variants can be compared on
launches, modeled bytes, and measured latency.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NumericsError, Tensor

STRUCTURAL = ("input", "constant", "output")

FUSED_BY_SCOPE = {"memory": "FusedMemAttn"}


class GraphError(ValueError):
    pass


@dataclass
class OpNode:
    id: int
    kind: str
    inputs: list                  # [(node_id, slot), ...]
    attrs: dict
    out_shapes: list              # one shape per output slot

    def shape(self, slot: int = 0) -> tuple:
        return tuple(self.out_shapes[slot])


@dataclass
class OpGraph:
    nodes: list = field(default_factory=list)       # topological order
    inputs: list = field(default_factory=list)      # node ids
    outputs: list = field(default_factory=list)     # (node_id, slot)
    constants: dict = field(default_factory=dict)   # node id -> ndarray

    def node_map(self) -> dict:
        return {n.id: n for n in self.nodes}

    def launch_nodes(self) -> list:
        return [n for n in self.nodes if n.kind not in STRUCTURAL]

    def validate(self) -> None:
        seen = set()
        for n in self.nodes:
            for src, slot in n.inputs:
                if src not in seen:
                    raise GraphError(f"node {n.id} consumes {src} before production")
            seen.add(n.id)
        ids = {n.id for n in self.nodes}
        for nid, slot in self.outputs:
            if nid not in ids:
                raise GraphError("dangling graph output")

    def signature(self) -> list:
        nm = self.node_map()
        return [nm[nid].shape(slot) for nid, slot in self.outputs]


class Tracer:
    """Records every primitive call while installed via tensor.set_tracer."""

    def __init__(self):
        self.graph = OpGraph()
        self._next = 0
        self._input_ids: dict[int, int] = {}   # id(Tensor) -> node id
        self.scope = []

    def _new_id(self) -> int:
        self._next += 1
        return self._next - 1

    def register_input(self, name: str, t: Tensor) -> None:
        nid = self._new_id()
        self.graph.nodes.append(OpNode(nid, "input", [], {"name": name},
                                       [tuple(t.shape)]))
        self.graph.inputs.append(nid)
        t.trace_id = (nid, 0)

    def _leaf(self, t: Tensor) -> tuple:
        if t.trace_id is not None:
            return t.trace_id
        nid = self._new_id()
        self.graph.nodes.append(OpNode(nid, "constant", [], {}, [tuple(t.shape)]))
        self.graph.constants[nid] = np.array(t.data, copy=True)
        t.trace_id = (nid, 0)
        return t.trace_id

    def record(self, kind: str, out: Tensor, parents, attrs: dict) -> None:
        refs = [self._leaf(p) for p in parents]
        nid = self._new_id()
        attrs = dict(attrs)
        if self.scope:
            attrs["scope"] = self.scope[-1]
        self.graph.nodes.append(OpNode(nid, kind, refs, attrs, [tuple(out.shape)]))
        out.trace_id = (nid, 0)

    def mark_outputs(self, outs) -> None:
        for t in outs:
            if t.trace_id is None:
                self._leaf(t)
            src = t.trace_id
            nid = self._new_id()
            self.graph.nodes.append(OpNode(nid, "output", [src], {},
                                           [tuple(t.shape)]))
            self.graph.outputs.append((nid, 0))


class trace_scope:
    """Annotate recorded nodes with a provenance scope (vision/memory/...)."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        if T._TRACER is not None:
            T._TRACER.scope.append(self.name)
        return self

    def __exit__(self, *exc):
        if T._TRACER is not None:
            T._TRACER.scope.pop()
        return False


def capture(forward, example_inputs: dict) -> OpGraph:
    """Trace `forward(**example_inputs)` into a static graph.

    Inputs must be Tensors; every primitive the forward touches must carry
    a graph kind (anything else raises). Replaying the graph on any
    same-shaped inputs reproduces the eager result.
    """
    tracer = Tracer()
    tensors = {}
    for name, value in example_inputs.items():
        t = value if isinstance(value, Tensor) else Tensor(value)
        tracer.register_input(name, t)
        tensors[name] = t
    T.set_tracer(tracer)
    try:
        with T.no_grad():
            out = forward(**tensors)
    finally:
        T.set_tracer(None)
    outs = out if isinstance(out, (tuple, list)) else (out,)
    tracer.mark_outputs(outs)
    tracer.graph.validate()
    return tracer.graph


# ---------------------------------------------------------------------------
# interpreter


def _np_softmax(x, axis=-1):
    m = np.max(np.where(np.isfinite(x), x, -np.inf), axis=axis, keepdims=True)
    e = np.exp(x - m)
    e = np.where(np.isfinite(e), e, 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def _np_rmsnorm(x, gain, eps):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _np_layernorm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _np_swiglu(z):
    h = z.shape[-1] // 2
    g, v = z[..., :h], z[..., h:]
    return g / (1.0 + np.exp(-g)) * v


def _np_rope(x, positions, base):
    d = x.shape[-1]
    pos = np.asarray(positions, dtype=x.dtype)
    freqs = base ** (-2.0 * np.arange(d // 2, dtype=x.dtype) / d)
    ang = pos[:, None] * freqs[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def _np_attention(q, k, v, mask, scale, n_heads):
    t, d = q.shape[-2], q.shape[-1]
    dh = d // n_heads

    def heads(x):
        return np.swapaxes(x.reshape(x.shape[:-1] + (n_heads, dh)), -2, -3)

    m = mask
    if m.ndim > 2:
        m = np.expand_dims(m, -3)
    logits = heads(q) @ np.swapaxes(heads(k), -1, -2) * scale + m
    w = _np_softmax(logits)
    out = w @ heads(v)
    return np.swapaxes(out, -2, -3).reshape(q.shape[:-1] + (d,))


def _np_sinembed(tv, d):
    tv = np.asarray(tv, dtype=np.float64)
    half = d // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1)) * math.pi * 2.0
    ang = tv[..., None] * freqs
    out = np.empty(tv.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _slice(x, a):
    idx = [slice(None)] * x.ndim
    idx[a["axis"]] = slice(a["start"], a["stop"])
    return x[tuple(idx)]


def _run_node(node: OpNode, vals: list):
    k, a = node.kind, node.attrs
    if k == "add":
        return [vals[0] + vals[1]]
    if k == "mul":
        return [vals[0] * vals[1]]
    if k == "matmul":
        return [T._mm(vals[0], vals[1])]
    if k == "softmax":
        return [_np_softmax(vals[0], a["axis"])]
    if k == "rmsnorm":
        return [_np_rmsnorm(vals[0], vals[1], a["eps"])]
    if k == "layernorm":
        return [_np_layernorm(vals[0], vals[1], vals[2], a["eps"])]
    if k == "swiglu" or k == "FusedSwiGLU":
        return [_np_swiglu(vals[0])]
    if k == "GroupedSwiGLU":
        return [_np_swiglu(vals[0]), _np_swiglu(vals[1])]
    if k == "rope":
        return [_np_rope(vals[0], a["positions"], a["base"])]
    if k == "attention":
        return [_np_attention(vals[0], vals[1], vals[2], vals[3], a["scale"],
                              a.get("n_heads", 1))]
    if k == "FusedVisAttn" or k == "FusedMemAttn":
        q = _np_rope(vals[0], a["positions"], a["base"])
        kk = _np_rope(vals[1], a["positions"], a["base"])
        return [_np_attention(q, kk, vals[2], vals[3], a["scale"], a["n_heads"])]
    if k == "FusedLLMAttn":
        q = _np_rope(_np_rmsnorm(vals[0], vals[4], a["eps"]), a["positions"], a["base"])
        kk = _np_rope(_np_rmsnorm(vals[1], vals[5], a["eps"]), a["positions"], a["base"])
        return [_np_attention(q, kk, vals[2], vals[3], a["scale"], a["n_heads"])]
    if k == "FusedAddLayerNorm":
        return [_np_layernorm(vals[0] + vals[1], vals[2], vals[3], a["eps"])]
    if k == "FusedAddRMSNorm":
        return [_np_rmsnorm(vals[0] + vals[1], vals[2], a["eps"])]
    if k == "FusedAdd3RMSNorm":
        return [_np_rmsnorm(vals[0] + vals[1] + vals[2], vals[3], a["eps"])]
    if k == "sinembed":
        return [_np_sinembed(vals[0] if node.inputs else a["t"], a["d"])]
    if k == "reshape":
        return [vals[0].reshape(a["shape"])]
    if k == "concat":
        return [np.concatenate(vals, axis=a["axis"])]
    if k == "split":
        return [_slice(vals[0], a)]
    if k == "output":
        return [vals[0]]
    raise GraphError(f"unknown node kind {k}")


def execute(graph: OpGraph, inputs: dict, dtype=np.float64,
            timing_repeats: int = 0, warmup: int = 0):
    """Interpret the graph; optionally report median wall time.

    Returns (outputs, median_seconds_or_None). Inputs are name -> array
    and must match the captured shapes.
    """
    feed = {}
    for n in graph.nodes:
        if n.kind == "input":
            name = n.attrs["name"]
            if name not in inputs:
                raise GraphError(f"missing graph input {name!r}")
            arr = np.asarray(inputs[name], dtype=dtype)
            if arr.shape != n.shape():
                raise GraphError(f"input {name!r} shape {arr.shape} != {n.shape()}")
            feed[n.id] = arr
    consts = {nid: np.asarray(v, dtype=dtype) for nid, v in graph.constants.items()}

    def run_once():
        vals: dict[tuple, np.ndarray] = {}
        for n in graph.nodes:
            if n.kind == "input":
                vals[(n.id, 0)] = feed[n.id]
            elif n.kind == "constant":
                vals[(n.id, 0)] = consts[n.id]
            else:
                outs = _run_node(n, [vals[ref] for ref in n.inputs])
                for slot, o in enumerate(outs):
                    vals[(n.id, slot)] = np.asarray(o, dtype=dtype)
        return [vals[ref] for ref in graph.outputs]

    outs = run_once()
    med = None
    if timing_repeats > 0:
        for _ in range(warmup):
            run_once()
        times = []
        for _ in range(timing_repeats):
            t0 = time.perf_counter()
            run_once()
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
    return outs, med


# ---------------------------------------------------------------------------
# constant folding


def fold_constants(graph: OpGraph) -> OpGraph:
    """Evaluate every constant-rooted node once; it becomes a constant.

    Folded nodes keep their ids (now constant kind), so no rewiring is
    needed; dead constants are then swept. In the captured policy graph
    this removes attention-mask assembly, positional-table slicing, and
    the per-step timestep-token chains.
    """
    const_vals = {(nid, 0): v for nid, v in graph.constants.items()}
    folded: set[int] = set(graph.constants)
    new_nodes = []
    new_consts = dict(graph.constants)
    for n in graph.nodes:
        if n.kind in ("input", "output", "constant"):
            new_nodes.append(n)
            continue
        if all(ref in const_vals for ref in n.inputs):
            outs = _run_node(n, [const_vals[ref] for ref in n.inputs])
            if len(outs) == 1:  # multi-output folds stay unfolded for simplicity
                val = np.asarray(outs[0], dtype=np.float64)
                const_vals[(n.id, 0)] = val
                folded.add(n.id)
                new_consts[n.id] = val
                new_nodes.append(OpNode(n.id, "constant", [], {}, [tuple(val.shape)]))
                continue
        new_nodes.append(n)

    # dead-code sweep from the outputs (inputs always stay: signature)
    live: set[int] = set(graph.inputs)
    by_id = {n.id: n for n in new_nodes}
    stack = [nid for nid, _ in graph.outputs]
    while stack:
        nid = stack.pop()
        if nid in live:
            continue
        live.add(nid)
        stack.extend(src for src, _ in by_id[nid].inputs)

    out = OpGraph(inputs=list(graph.inputs), outputs=list(graph.outputs))
    out.nodes = [n for n in new_nodes if n.id in live]
    out.constants = {nid: v for nid, v in new_consts.items()
                     if nid in live and by_id[nid].kind == "constant"}
    out.validate()
    return out


# ---------------------------------------------------------------------------
# fusion


def _consumers(graph: OpGraph) -> dict:
    cons: dict[int, list] = {n.id: [] for n in graph.nodes}
    for n in graph.nodes:
        for src, slot in n.inputs:
            cons[src].append(n.id)
    return cons


def _single_consumer(cons: dict, nid: int) -> bool:
    return len(cons[nid]) == 1


def fuse(graph: OpGraph, max_passes: int = 8) -> OpGraph:
    """Greedy longest-pattern-first rewriting with single-consumer safety."""
    g = OpGraph(nodes=[OpNode(n.id, n.kind, list(n.inputs), dict(n.attrs),
                              [tuple(s) for s in n.out_shapes])
                       for n in graph.nodes],
                inputs=list(graph.inputs), outputs=list(graph.outputs),
                constants={k: v for k, v in graph.constants.items()})

    changed = True
    passes = 0
    while changed and passes < max_passes:
        changed = (_fuse_llm_attention(g) or _fuse_rope_attention(g)
                   or _fuse_add3_norm(g) or _fuse_add2_norm(g)
                   or _group_swiglu(g))
        passes += 1
    _rename_swiglu(g)
    g.validate()
    return g


def _by_id(g):
    return {n.id: n for n in g.nodes}


def _replace_node(g: OpGraph, removed: set, fused: OpNode, anchor_id: int) -> None:
    """Drop `removed` nodes and splice the fused node at the anchor position."""
    out_nodes = []
    for n in g.nodes:
        if n.id in removed:
            continue
        if n.id == anchor_id:
            out_nodes.append(fused)
        else:
            out_nodes.append(n)
    g.nodes = out_nodes


def _rewire(g: OpGraph, old_ref, new_ref) -> None:
    for n in g.nodes:
        n.inputs = [new_ref if tuple(r) == tuple(old_ref) else r for r in n.inputs]
    g.outputs = [new_ref if tuple(r) == tuple(old_ref) else r for r in g.outputs]


def _fuse_llm_attention(g: OpGraph) -> bool:
    nodes = _by_id(g)
    cons = _consumers(g)
    for n in g.nodes:
        if n.kind != "attention" or len(n.inputs) < 4:
            continue
        rq, rk = nodes.get(n.inputs[0][0]), nodes.get(n.inputs[1][0])
        if not (rq and rk and rq.kind == "rope" and rk.kind == "rope"):
            continue
        nq, nk = nodes.get(rq.inputs[0][0]), nodes.get(rk.inputs[0][0])
        if not (nq and nk and nq.kind == "rmsnorm" and nk.kind == "rmsnorm"):
            continue
        if not all(_single_consumer(cons, x.id) for x in (rq, rk, nq, nk)):
            continue
        if rq.attrs["positions"] != rk.attrs["positions"]:
            continue
        fused = OpNode(n.id, "FusedLLMAttn",
                       [nq.inputs[0], nk.inputs[0], n.inputs[2], n.inputs[3],
                        nq.inputs[1], nk.inputs[1]],
                       {"scale": n.attrs["scale"], "n_heads": n.attrs.get("n_heads", 1),
                        "positions": rq.attrs["positions"], "base": rq.attrs["base"],
                        "eps": nq.attrs["eps"], **({"scope": n.attrs["scope"]}
                                                   if "scope" in n.attrs else {})},
                       [n.shape()])
        _replace_node(g, {rq.id, rk.id, nq.id, nk.id}, fused, n.id)
        return True
    return False


def _fuse_rope_attention(g: OpGraph) -> bool:
    nodes = _by_id(g)
    cons = _consumers(g)
    for n in g.nodes:
        if n.kind != "attention" or len(n.inputs) < 4:
            continue
        rq, rk = nodes.get(n.inputs[0][0]), nodes.get(n.inputs[1][0])
        if not (rq and rk and rq.kind == "rope" and rk.kind == "rope"):
            continue
        if not (_single_consumer(cons, rq.id) and _single_consumer(cons, rk.id)):
            continue
        if rq.attrs["positions"] != rk.attrs["positions"]:
            continue
        kind = FUSED_BY_SCOPE.get(n.attrs.get("scope", ""), "FusedVisAttn")
        fused = OpNode(n.id, kind,
                       [rq.inputs[0], rk.inputs[0], n.inputs[2], n.inputs[3]],
                       {"scale": n.attrs["scale"], "n_heads": n.attrs.get("n_heads", 1),
                        "positions": rq.attrs["positions"], "base": rq.attrs["base"]},
                       [n.shape()])
        _replace_node(g, {rq.id, rk.id}, fused, n.id)
        return True
    return False


def _fuse_add3_norm(g: OpGraph) -> bool:
    nodes = _by_id(g)
    cons = _consumers(g)
    for n in g.nodes:
        if n.kind != "rmsnorm":
            continue
        a2 = nodes.get(n.inputs[0][0])
        if not (a2 and a2.kind == "add" and _single_consumer(cons, a2.id)):
            continue
        a1 = nodes.get(a2.inputs[0][0])
        if not (a1 and a1.kind == "add" and _single_consumer(cons, a1.id)):
            continue
        fused = OpNode(n.id, "FusedAdd3RMSNorm",
                       [a1.inputs[0], a1.inputs[1], a2.inputs[1], n.inputs[1]],
                       {"eps": n.attrs["eps"]}, [n.shape()])
        _replace_node(g, {a1.id, a2.id}, fused, n.id)
        return True
    return False


def _fuse_add2_norm(g: OpGraph) -> bool:
    nodes = _by_id(g)
    cons = _consumers(g)
    for n in g.nodes:
        if n.kind not in ("rmsnorm", "layernorm"):
            continue
        a = nodes.get(n.inputs[0][0])
        if not (a and a.kind == "add" and _single_consumer(cons, a.id)):
            continue
        if n.kind == "rmsnorm":
            fused = OpNode(n.id, "FusedAddRMSNorm",
                           [a.inputs[0], a.inputs[1], n.inputs[1]],
                           {"eps": n.attrs["eps"]}, [n.shape()])
        else:
            fused = OpNode(n.id, "FusedAddLayerNorm",
                           [a.inputs[0], a.inputs[1], n.inputs[1], n.inputs[2]],
                           {"eps": n.attrs["eps"]}, [n.shape()])
        _replace_node(g, {a.id}, fused, n.id)
        return True
    return False


def _ancestors(g: OpGraph) -> dict:
    anc: dict[int, set] = {}
    for n in g.nodes:
        s = set()
        for src, _ in n.inputs:
            s.add(src)
            s |= anc.get(src, set())
        anc[n.id] = s
    return anc


def _retarget(g: OpGraph, mapping: dict) -> None:
    """Rewire value references simultaneously (old ref -> new ref)."""
    for n in g.nodes:
        n.inputs = [tuple(mapping.get(tuple(r), tuple(r))) for r in n.inputs]
    g.outputs = [tuple(mapping.get(tuple(r), tuple(r))) for r in g.outputs]


def _toposort_graph(g: OpGraph) -> None:
    """Stable re-sort after fusions that merge distant nodes (Kahn, id ties)."""
    by_id = {n.id: n for n in g.nodes}
    pending = {n.id: len({src for src, _ in n.inputs}) for n in g.nodes}
    consumers: dict[int, list] = {n.id: [] for n in g.nodes}
    for n in g.nodes:
        for src in {s for s, _ in n.inputs}:
            consumers[src].append(n.id)
    ready = sorted(nid for nid, c in pending.items() if c == 0)
    order = []
    import heapq
    heapq.heapify(ready)
    while ready:
        nid = heapq.heappop(ready)
        order.append(by_id[nid])
        for c in consumers[nid]:
            pending[c] -= 1
            if pending[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(g.nodes):
        raise GraphError("cycle introduced by fusion")
    g.nodes = order


def _group_swiglu(g: OpGraph) -> bool:
    """Pair the first two data-independent, same-shape swiglu nodes."""
    anc = _ancestors(g)
    sw = [n for n in g.nodes if n.kind == "swiglu"]
    for i, a in enumerate(sw):
        for b in sw[i + 1:]:
            if a.shape() != b.shape():
                continue
            if a.id in anc[b.id] or b.id in anc[a.id]:
                continue
            fused = OpNode(b.id, "GroupedSwiGLU", [a.inputs[0], b.inputs[0]],
                           {}, [a.shape(), b.shape()])
            _replace_node(g, {a.id}, fused, b.id)
            _retarget(g, {(a.id, 0): (b.id, 0), (b.id, 0): (b.id, 1)})
            fused.inputs = [a.inputs[0], b.inputs[0]]  # retarget must not touch these
            _toposort_graph(g)
            return True
    return False


def _rename_swiglu(g: OpGraph) -> None:
    for n in g.nodes:
        if n.kind == "swiglu":
            n.kind = "FusedSwiGLU"


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostReport:
    node_count: int
    launches: int
    bytes_read: int
    bytes_written: int
    per_node: list
    wall_time: float | None = None

    @property
    def total_bytes(self) -> int:
        return self.bytes_read + self.bytes_written

    def to_doc(self) -> dict:
        return {"node_count": self.node_count, "launches": self.launches,
                "bytes_read": self.bytes_read, "bytes_written": self.bytes_written,
                "total_bytes": self.total_bytes, "wall_time": self.wall_time}

    def table(self) -> str:
        rows = [f"{'kind':<20}{'count':>7}{'read B':>14}{'write B':>14}"]
        agg: dict[str, list] = {}
        for kind, r, w in self.per_node:
            a = agg.setdefault(kind, [0, 0, 0])
            a[0] += 1
            a[1] += r
            a[2] += w
        for kind in sorted(agg):
            c, r, w = agg[kind]
            rows.append(f"{kind:<20}{c:>7}{r:>14}{w:>14}")
        rows.append(f"{'TOTAL':<20}{self.launches:>7}{self.bytes_read:>14}"
                    f"{self.bytes_written:>14}")
        return "\n".join(rows)


def cost_model(graph: OpGraph, element_width: int = 4,
               wall_time: float | None = None) -> CostReport:
    """One read per distinct input, one write per output, per launch."""
    per_node = []
    reads = writes = 0
    for n in graph.nodes:
        if n.kind in STRUCTURAL:
            continue
        distinct = list(dict.fromkeys(tuple(r) for r in n.inputs))
        sizes = _value_sizes(graph)
        r = sum(sizes[ref] for ref in distinct) * element_width
        w = sum(int(np.prod(s)) for s in n.out_shapes) * element_width
        per_node.append((n.kind, r, w))
        reads += r
        writes += w
    return CostReport(node_count=len(graph.nodes),
                      launches=len(graph.launch_nodes()),
                      bytes_read=reads, bytes_written=writes,
                      per_node=per_node, wall_time=wall_time)


def _value_sizes(graph: OpGraph) -> dict:
    sizes = {}
    for n in graph.nodes:
        for slot, s in enumerate(n.out_shapes):
            sizes[(n.id, slot)] = int(np.prod(s)) if s else 1
    return sizes


def verify_equivalence(g1: OpGraph, g2: OpGraph, n_trials: int = 5,
                       dtype=np.float64, seed: int = 0) -> float:
    """Max relative output difference over random same-shaped inputs."""
    in1 = {n.attrs["name"]: n.shape() for n in g1.nodes if n.kind == "input"}
    in2 = {n.attrs["name"]: n.shape() for n in g2.nodes if n.kind == "input"}
    if in1 != in2 or len(g1.outputs) != len(g2.outputs):
        raise GraphError("graph signatures differ")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        feed = {k: rng.normal(size=s) for k, s in in1.items()}
        o1, _ = execute(g1, feed, dtype=dtype)
        o2, _ = execute(g2, feed, dtype=dtype)
        for a, b in zip(o1, o2):
            denom = np.maximum(np.abs(a) + np.abs(b), 1e-12)
            worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


# ---------------------------------------------------------------------------
# serialization


def save_graph(graph: OpGraph, stem: str) -> None:
    doc = {"nodes": [{"id": n.id, "kind": n.kind,
                      "inputs": [list(r) for r in n.inputs], "attrs": n.attrs,
                      "out_shapes": [list(s) for s in n.out_shapes]}
                     for n in graph.nodes],
           "inputs": graph.inputs,
           "outputs": [list(r) for r in graph.outputs],
           "constants": {}}
    offset = 0
    blobs = []
    for nid, arr in graph.constants.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        doc["constants"][str(nid)] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    with open(stem + ".graph.json", "w") as fh:
        json.dump(doc, fh)
    with open(stem + ".graph.bin", "wb") as fh:
        fh.write(b"".join(blobs))


def load_graph(stem: str) -> OpGraph:
    with open(stem + ".graph.json") as fh:
        doc = json.load(fh)
    payload = open(stem + ".graph.bin", "rb").read()
    g = OpGraph(inputs=list(doc["inputs"]),
                outputs=[tuple(r) for r in doc["outputs"]])
    for nd in doc["nodes"]:
        g.nodes.append(OpNode(nd["id"], nd["kind"],
                              [tuple(r) for r in nd["inputs"]], nd["attrs"],
                              [tuple(s) for s in nd["out_shapes"]]))
    for nid_s, meta in doc["constants"].items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = payload[meta["offset"]:meta["offset"] + 8 * n]
        if len(raw) != 8 * n:
            raise GraphError("graph payload truncated")
        g.constants[int(nid_s)] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    g.validate()
    return g


# ---------------------------------------------------------------------------
# the captured policy forward


def _affine_consts(bounds):
    """y = x*k + c form of the percentile normalizer and its inverse."""
    span = np.where(bounds.q99 - bounds.q01 == 0.0, 1.0, bounds.q99 - bounds.q01)
    k = 2.0 / span
    c = -2.0 * bounds.q01 / span - 1.0
    k_inv = span / 2.0
    c_inv = bounds.q01 + span / 2.0
    return (Tensor(k), Tensor(c)), (Tensor(k_inv), Tensor(c_inv))


def build_policy_forward(policy, emb: str, modules: dict | None = None,
                         steps: int | None = None, seed: int = 0):
    """The full acting pass as a capturable function of named tensors.

    Covers encode -> memory fusion -> unrolled Euler denoising ->
    denormalized chunk. Returns (forward, example_inputs). Inputs: raw
    patch matrix, raw state, queue features, initial noise, and (when
    physics is on) raw force reading plus its noise.
    """
    from .encoder import encode_batch, instruction_onehot
    from .memory import memory_forward_batch

    cfg = policy.cfg
    modules = modules if modules is not None else cfg.modules
    steps = steps or cfg.denoise_steps
    spec = policy.spec(emb)
    enc_cfg = policy.enc_cfg(emb)
    stats = policy.norm[emb]
    use_p = bool(modules.get("physics")) and spec.physics_dim > 0
    use_mem = bool(modules.get("memory"))
    (s_k, s_c), _ = _affine_consts(stats.state)
    if use_p:
        (p_k, p_c), _ = _affine_consts(stats.physics)
    _, (a_ki, a_ci) = _affine_consts(stats.action)

    rng = np.random.default_rng(seed)
    n_patch = cfg.n_frames * enc_cfg.patches_per_frame
    example = {
        "patches": Tensor(rng.normal(size=(1, n_patch, enc_cfg.patch_dim))),
        "state": Tensor(rng.normal(size=(1, spec.state_dim))),
        "noise": Tensor(rng.normal(size=(1, cfg.chunk, spec.action_dim))),
    }
    if use_mem:
        example["queue"] = Tensor(rng.normal(size=(1, cfg.n_mem, cfg.n_q, cfg.d)))
    if use_p:
        example["force"] = Tensor(rng.normal(size=(1, spec.physics_dim)))
        example["force_noise"] = Tensor(
            rng.normal(size=(1, cfg.chunk, spec.physics_dim)))

    def forward(patches, state, noise, queue=None, force=None, force_noise=None):
        onehot = instruction_onehot([spec.instr_id], enc_cfg.n_instructions)
        with trace_scope("vis"):
            h = encode_batch(policy.ps, enc_cfg, patches, onehot, cfg.n_frames,
                             motion=bool(modules.get("motion")), patch_key=emb)
        if use_mem:
            with trace_scope("memory"):
                m = memory_forward_batch(policy.ps, policy.mem_cfg, queue,
                                         np.ones((1, cfg.n_mem)), h)
        else:
            m = Tensor(np.zeros((1, cfg.n_q, cfg.d)))
        s_n = T.add(T.mul(state, s_k), s_c)
        p_n = T.add(T.mul(force, p_k), p_c) if use_p else None
        a = noise
        p_fut = force_noise if use_p else None
        for i in range(steps):
            tau = i / steps
            with trace_scope("llm"):
                v_a, v_p = policy.velocity(emb, h, m, s_n, a, tau, p_n, p_fut)
            a = T.add(a, T.scale(v_a, 1.0 / steps))
            if use_p and v_p is not None:
                p_fut = T.add(p_fut, T.scale(v_p, 1.0 / steps))
        return T.add(T.mul(a, a_ki), a_ci)

    return forward, example


def capture_policy(policy, emb: str, modules: dict | None = None,
                   steps: int | None = None, seed: int = 0):
    """Capture the policy acting pass; returns (graph, forward, example)."""
    forward, example = build_policy_forward(policy, emb, modules, steps, seed)
    graph = capture(forward, example)
    return graph, forward, example
