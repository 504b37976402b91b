"""Explicit long-term memory over periodically sampled cognition features.

A fixed-capacity FIFO stores one cognition feature every chunk period
(H+1 steps). The current feature is fused with the queue by a small
post-norm LayerNorm transformer under a block-causal mask: tokens of
entry i attend to entries <= i and attention is unrestricted inside an
entry. Output is the transformed current-feature block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NumericsError, ParamStore, Tensor


class MemoryError_(ValueError):
    pass


@dataclass
class MemoryConfig:
    d: int = 48
    n_layers: int = 2
    n_heads: int = 4
    n_mem: int = 3
    interval: int = 8          # H+1: queue sampling period
    n_q: int = 8
    ffn_mult: int = 2
    eps: float = 1e-6


@dataclass
class MemoryQueue:
    """FIFO of (timestep stamp, feature) with an enforced sampling interval."""

    capacity: int
    interval: int
    entries: list = field(default_factory=list)

    def push(self, stamp: int, feature: np.ndarray) -> "MemoryQueue":
        if self.entries and stamp != self.entries[-1][0] + self.interval:
            raise MemoryError_(
                f"stamp {stamp} breaks the interval contract "
                f"(expected {self.entries[-1][0] + self.interval})")
        self.entries.append((int(stamp), np.asarray(feature, dtype=np.float64)))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def stamps(self) -> list[int]:
        return [s for s, _ in self.entries]

    def features(self) -> list[np.ndarray]:
        return [f for _, f in self.entries]

    def clear(self) -> None:
        self.entries.clear()


def init_params(ps: ParamStore, cfg: MemoryConfig, rng: np.random.Generator,
                prefix: str = "mem.") -> None:
    d, p = cfg.d, prefix
    # one recency embedding per distance: row 0 = current feature block
    ps.add(p + "recency", T.normal_init(rng, (cfg.n_mem + 1, d), 0.02))
    h = cfg.ffn_mult * d
    for li in range(cfg.n_layers):
        lp = f"{p}l{li}."
        ps.add(lp + "qkv", T.normal_init(rng, (d, 3 * d), d ** -0.5))
        ps.add(lp + "out", T.normal_init(rng, (d, d), 0.5 * d ** -0.5))
        ps.add(lp + "ln1_g", np.ones(d))
        ps.add(lp + "ln1_b", np.zeros(d))
        ps.add(lp + "ffn1", T.normal_init(rng, (d, 2 * h), d ** -0.5))
        ps.add(lp + "ffn2", T.normal_init(rng, (h, d), 0.5 * h ** -0.5))
        ps.add(lp + "ln2_g", np.ones(d))
        ps.add(lp + "ln2_b", np.zeros(d))


def block_causal_mask(n_blocks: int, block: int,
                      present: np.ndarray | None = None) -> np.ndarray:
    """Entry-granular causal mask; absent entries keep only self-attention."""
    n = n_blocks * block
    blocks = np.tril(np.ones((n_blocks, n_blocks), dtype=bool))
    mask = np.kron(blocks, np.ones((block, block), dtype=bool))
    if present is not None:
        key_ok = np.repeat(np.asarray(present, dtype=bool), block, axis=-1)
        if key_ok.ndim == 1:
            mask = mask & key_ok[None, :]
        else:
            mask = mask[None] & key_ok[:, None, :]
        eye = np.eye(n, dtype=bool)
        mask = mask | eye
    return mask


def _recency_rows(ps: ParamStore, cfg: MemoryConfig, prefix: str) -> Tensor:
    """Per-token recency embedding: slot j holds distance n_mem - j, the
    current block distance 0."""
    table = ps[prefix + "recency"]
    rows = []
    for j in range(cfg.n_mem):
        dist = cfg.n_mem - j
        row = T.slice_axis(table, dist, dist + 1, axis=-2)
        rows.append(T.concat([row] * cfg.n_q, axis=-2))
    cur = T.slice_axis(table, 0, 1, axis=-2)
    rows.append(T.concat([cur] * cfg.n_q, axis=-2))
    return T.concat(rows, axis=-2)


def memory_forward_batch(ps: ParamStore, cfg: MemoryConfig, entries: Tensor,
                         present: np.ndarray, h: Tensor,
                         prefix: str = "mem.", return_all: bool = False) -> Tensor:
    """Fuse [B, n_mem, n_q, d] padded queue entries with [B, n_q, d] features.

    `present` is a [B, n_mem] 0/1 array marking real entries; padded slots
    are invisible to every other token. Entries sit oldest-first with the
    newest aligned to the last slot.
    """
    b = h.shape[0]
    flat = T.reshape(entries, (b, cfg.n_mem * cfg.n_q, cfg.d))
    x = T.concat([flat, h], axis=-2)
    x = T.add(x, _recency_rows(ps, cfg, prefix))
    blocks_present = np.concatenate(
        [np.asarray(present, dtype=bool), np.ones((b, 1), dtype=bool)], axis=-1)
    mask = T.log_mask(block_causal_mask(cfg.n_mem + 1, cfg.n_q, blocks_present))
    for li in range(cfg.n_layers):
        lp = f"{prefix}l{li}."
        d = cfg.d
        qkv = T.matmul(x, ps[lp + "qkv"])
        q = T.slice_axis(qkv, 0, d, axis=-1)
        k = T.slice_axis(qkv, d, 2 * d, axis=-1)
        v = T.slice_axis(qkv, 2 * d, 3 * d, axis=-1)
        att = T.matmul(T.mha(q, k, v, mask, cfg.n_heads), ps[lp + "out"])
        x = T.layernorm(T.add(x, att), ps[lp + "ln1_g"], ps[lp + "ln1_b"], cfg.eps)
        f = T.matmul(T.swiglu(T.matmul(x, ps[lp + "ffn1"])), ps[lp + "ffn2"])
        x = T.layernorm(T.add(x, f), ps[lp + "ln2_g"], ps[lp + "ln2_b"], cfg.eps)
    if return_all:
        return x
    n = x.shape[-2]
    return T.slice_axis(x, n - cfg.n_q, n, axis=-2)


def memory_forward(ps: ParamStore, cfg: MemoryConfig, queue: MemoryQueue,
                   h_t: Tensor, prefix: str = "mem.") -> Tensor:
    """Single-sample wrapper over a live queue; empty queues are fine."""
    q = len(queue)
    if q > cfg.n_mem:
        raise MemoryError_("queue exceeds configured capacity")
    pad = np.zeros((1, cfg.n_mem, cfg.n_q, cfg.d))
    present = np.zeros((1, cfg.n_mem))
    for j, feat in enumerate(queue.features()):
        slot = cfg.n_mem - q + j
        pad[0, slot] = feat
        present[0, slot] = 1.0
    hb = T.reshape(h_t, (1,) + h_t.shape)
    out = memory_forward_batch(ps, cfg, Tensor(pad), present, hb, prefix)
    return T.reshape(out, (cfg.n_q, cfg.d))


def queue_stamps_for(t: int, interval: int, n_mem: int) -> list[int]:
    """Stamps a deployment-time queue holds just before acting at step t:
    pushes happen after use, so stamp t itself is never included."""
    newest = ((t - 1) // interval) * interval if t > 0 else None
    if newest is None:
        return []
    stamps = [s for s in range(newest, -1, -interval)][:n_mem]
    return sorted(stamps)
