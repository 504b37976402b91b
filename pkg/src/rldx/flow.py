"""Flow-matching target construction, loss, sampling, and normalization.

Training regresses a velocity field toward (clean - noise) on linear
interpolation paths; inference integrates the field with Euler steps on a
fixed 1/T grid. Signals are normalized per embodiment to [-1, 1] between
the 1st and 99th percentile of the dataset (nearest-rank), without
clipping, so the map stays invertible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericsError, Tensor


@dataclass
class TauSchedule:
    mode: str = "beta"         # training draw: "beta" (1.5, 1.0) or "uniform"
    steps: int = 4             # inference grid size T

    def __post_init__(self):
        if self.mode not in ("beta", "uniform"):
            raise NumericsError(f"unknown tau mode {self.mode!r}")
        if self.steps < 1:
            raise NumericsError("need at least one denoising step")


def sample_tau(schedule: TauSchedule, rng: np.random.Generator, size=None):
    if schedule.mode == "uniform":
        draw = rng.uniform(0.0, 1.0, size=size)
    else:
        draw = rng.beta(1.5, 1.0, size=size)
        # keep draws in [0, 1) so the conditional field stays finite
        draw = np.minimum(draw, np.nextafter(1.0, 0.0))
    return draw


def nearest_rank_percentile(values: np.ndarray, pct: float) -> np.ndarray:
    """Per-column nearest-rank percentile: rank = ceil(pct/100 * N)."""
    v = np.sort(np.asarray(values, dtype=np.float64), axis=0)
    n = v.shape[0]
    rank = int(np.ceil(pct / 100.0 * n))
    rank = min(max(rank, 1), n)
    return v[rank - 1]


@dataclass
class Bounds:
    q01: np.ndarray
    q99: np.ndarray

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        span = self.q99 - self.q01
        safe = np.where(span == 0.0, 1.0, span)
        y = 2.0 * (x - self.q01) / safe - 1.0
        return np.where(span == 0.0, 0.0, y)

    def denormalize(self, y):
        y = np.asarray(y, dtype=np.float64)
        span = self.q99 - self.q01
        return np.where(span == 0.0, self.q01, (y + 1.0) / 2.0 * span + self.q01)


@dataclass
class NormStats:
    """Per-embodiment 1st/99th-percentile bounds for s, a, p channels."""

    embodiment: str
    state: Bounds
    action: Bounds
    physics: Bounds | None = None

    def to_doc(self) -> dict:
        doc = {"embodiment": self.embodiment,
               "state": {"q01": self.state.q01.tolist(), "q99": self.state.q99.tolist()},
               "action": {"q01": self.action.q01.tolist(), "q99": self.action.q99.tolist()}}
        if self.physics is not None:
            doc["physics"] = {"q01": self.physics.q01.tolist(),
                              "q99": self.physics.q99.tolist()}
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "NormStats":
        def b(d):
            return Bounds(np.asarray(d["q01"], dtype=np.float64),
                          np.asarray(d["q99"], dtype=np.float64))
        return NormStats(embodiment=doc["embodiment"], state=b(doc["state"]),
                         action=b(doc["action"]),
                         physics=b(doc["physics"]) if "physics" in doc else None)


def compute_norm_stats(episodes, embodiment: str | None = None) -> NormStats:
    """Nearest-rank percentile bounds over every timestep of every episode."""
    if not episodes:
        raise NumericsError("empty dataset")
    name = embodiment or episodes[0].embodiment

    def bounds(stack):
        return Bounds(nearest_rank_percentile(stack, 1.0),
                      nearest_rank_percentile(stack, 99.0))

    states = np.concatenate([e.states for e in episodes])
    actions = np.concatenate([e.actions for e in episodes])
    stats = NormStats(embodiment=name, state=bounds(states), action=bounds(actions))
    if episodes[0].physics.shape[-1] > 0:
        stats.physics = bounds(np.concatenate([e.physics for e in episodes]))
    return stats


def save_norm_stats(path: str, stats: dict) -> None:
    with open(path, "w") as fh:
        json.dump({k: v.to_doc() for k, v in stats.items()}, fh, indent=1, sort_keys=True)


def load_norm_stats(path: str) -> dict:
    with open(path) as fh:
        return {k: NormStats.from_doc(v) for k, v in json.load(fh).items()}


def make_noisy(x_clean, eps, tau):
    """Linear interpolation tau*x + (1-tau)*eps; tau broadcasts per sample."""
    x = np.asarray(x_clean, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if x.shape != e.shape:
        raise NumericsError("noise shape must match the clean signal")
    t = np.asarray(tau, dtype=np.float64)
    if t.ndim > 0:
        t = t.reshape(t.shape + (1,) * (x.ndim - t.ndim))
    return t * x + (1.0 - t) * e


@dataclass
class FlowBatch:
    """Normalized conditioning and targets for one loss evaluation."""

    a_clean: np.ndarray                 # [B, H+1, action_dim]
    p_future: np.ndarray | None = None  # [B, L, physics_dim]
    p_present: np.ndarray | None = None  # [B] 0/1 physics-availability mask


def fm_loss(model_fn, batch: FlowBatch, lam_p: float,
            rng: np.random.Generator, schedule: TauSchedule | None = None) -> Tensor:
    """Joint action+physics flow-matching objective.

    `model_fn(a_noisy, tau, p_noisy) -> (v_action, v_physics|None)` carries
    all conditioning by closure. tau and the noises are drawn here, one
    per batch element.
    """
    schedule = schedule or TauSchedule()
    b = batch.a_clean.shape[0]
    tau = sample_tau(schedule, rng, size=b)
    eps = rng.standard_normal(batch.a_clean.shape)
    a_noisy = Tensor(make_noisy(batch.a_clean, eps, tau))
    p_noisy = None
    if batch.p_future is not None:
        eps_p = rng.standard_normal(batch.p_future.shape)
        p_noisy = Tensor(make_noisy(batch.p_future, eps_p, tau))
    v_a, v_p = model_fn(a_noisy, tau, p_noisy)
    diff = T.sub(v_a, Tensor(batch.a_clean - eps))
    per_elem = T.rsum(T.square(diff), axis=-1)
    loss = T.scale(T.rsum(per_elem), 1.0 / b)
    if v_p is not None and batch.p_future is not None:
        dp = T.sub(v_p, Tensor(batch.p_future - eps_p))
        sq = T.rsum(T.square(dp), axis=-1)
        if batch.p_present is not None:
            sq = T.mul(sq, Tensor(np.asarray(batch.p_present,
                                             dtype=np.float64)[:, None]))
        loss = T.add(loss, T.scale(T.rsum(sq), lam_p / b))
    return loss


def euler_sample(model_fn, chunk_shape, steps: int, rng: np.random.Generator,
                 temperature: float = 1.0, denorm_action=None,
                 physics_shape=None, denorm_physics=None):
    """Integrate the velocity field from noise on the tau_i = i/T grid.

    Initial noise is N(0, temperature^2 I); each of the T updates adds
    (1/T) * v(a, tau_i). Returns (denormalized action chunk, physics
    forecast or None).
    """
    if steps < 1:
        raise NumericsError("need at least one Euler step")
    a = temperature * rng.standard_normal(chunk_shape)
    p = temperature * rng.standard_normal(physics_shape) if physics_shape else None
    with T.no_grad():
        for i in range(steps):
            tau = i / steps
            v_a, v_p = model_fn(Tensor(a), tau, Tensor(p) if p is not None else None)
            a = a + v_a.data / steps
            if p is not None and v_p is not None:
                p = p + v_p.data / steps
    chunk = denorm_action(a) if denorm_action else a
    forecast = None
    if p is not None:
        forecast = denorm_physics(p) if denorm_physics else p
    return chunk, forecast


def conditional_field(target: np.ndarray):
    """The analytic velocity field whose Euler path lands exactly on target."""
    def fn(a_noisy: Tensor, tau, p_noisy=None):
        t = np.asarray(tau, dtype=np.float64)
        t = t.reshape(t.shape + (1,) * (a_noisy.ndim - t.ndim)) if t.ndim else t
        return Tensor((target - a_noisy.data) / (1.0 - t)), None
    return fn
