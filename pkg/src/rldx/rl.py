"""Post-training refinement: advantage-conditioned iteration and critics.

Two critics live here. The progress critic classifies task progress into
integer buckets 0..100 (the discrete "native number" interface) from
pooled cognition features and proprioception; its decoded values drive
advantage annotation for the iterated refinement loop. The chunk critic
is an offline twin-Q/expectile setup over whole action chunks with a
Gaussian-smoothed categorical value head, used to score candidate chunks
for best-of-N selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import tensor as T
from .envs import EpisodeRecord
from .model import Policy, window_for_step
from .tensor import ParamStore, Tensor
from .trainer import AdamW, StageConfig, build_chunk_dataset, evaluate, run_stage


# ---------------------------------------------------------------------------
# losses and distributional heads


def expectile_loss(u: Tensor | np.ndarray, rho: float) -> Tensor:
    """Mean asymmetric squared loss |rho - 1[u<0]| * u^2."""
    if not 0.0 < rho < 1.0:
        raise ValueError("expectile parameter must lie in (0, 1)")
    ut = u if isinstance(u, Tensor) else Tensor(u)
    w = Tensor(np.where(ut.data < 0, 1.0 - rho, rho))
    return T.mean(T.mul(w, T.square(ut)))


def uniform_atoms(lo: float = -100.0, hi: float = 0.0, n: int = 101) -> np.ndarray:
    return np.linspace(lo, hi, n)


def hl_project(y, atoms: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-smoothed projection of scalars onto categorical bins.

    Bin i absorbs the normal CDF mass between its edges; the boundary
    bins take the tails, so each row sums to one.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    width = atoms[1] - atoms[0]
    edges = np.concatenate([[-np.inf], atoms[:-1] + width / 2.0, [np.inf]])

    def cdf(x):
        with np.errstate(invalid="ignore"):
            z = (x - y[..., None]) / (sigma * math.sqrt(2.0))
        out = 0.5 * (1.0 + erf(z))
        out = np.where(x == np.inf, 1.0, out)
        return np.where(x == -np.inf, 0.0, out)

    upper = cdf(edges[1:])
    lower = cdf(edges[:-1])
    return upper - lower


def hl_decode(probs, atoms: np.ndarray):
    """Expectation of the atom values under the categorical distribution."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return p @ atoms


def cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    p = T.softmax(logits, axis=-1)
    picked = T.rsum(T.mul(T.log(T.add(p, Tensor(1e-12))), Tensor(target_probs)),
                    axis=-1)
    return T.scale(T.mean(picked), -1.0)


def softmax_decode(logits: Tensor, atoms: np.ndarray) -> Tensor:
    """Differentiable expectation over atoms from raw logits."""
    p = T.softmax(logits, axis=-1)
    return T.matmul(p, Tensor(atoms[:, None]))


def polyak_update(online: ParamStore, target: ParamStore, rate: float) -> None:
    """target += rate * (online - target), parameter by parameter."""
    for name, src in online.items():
        tgt = target[name]
        tgt.data += rate * (src.data - tgt.data)


# ---------------------------------------------------------------------------
# shared MLP machinery (pre-norm residual blocks)


def init_mlp_head(ps: ParamStore, prefix: str, in_dim: int, width: int,
                  blocks: int, out_dim: int, rng: np.random.Generator) -> None:
    ps.add(prefix + "in_w", T.normal_init(rng, (in_dim, width), in_dim ** -0.5))
    ps.add(prefix + "in_b", np.zeros(width))
    for bi in range(blocks):
        bp = f"{prefix}b{bi}."
        ps.add(bp + "gain", np.ones(width))
        ps.add(bp + "w1", T.normal_init(rng, (width, 2 * width), width ** -0.5))
        ps.add(bp + "w2", T.normal_init(rng, (width, width), 0.5 * width ** -0.5))
    ps.add(prefix + "out_gain", np.ones(width))
    ps.add(prefix + "out_w", T.normal_init(rng, (width, out_dim), width ** -0.5))
    ps.add(prefix + "out_b", np.zeros(out_dim))


def mlp_head_forward(ps: ParamStore, prefix: str, x: Tensor, blocks: int) -> Tensor:
    h = T.add(T.matmul(x, ps[prefix + "in_w"]), ps[prefix + "in_b"])
    for bi in range(blocks):
        bp = f"{prefix}b{bi}."
        f = T.rmsnorm(h, ps[bp + "gain"])
        f = T.matmul(T.swiglu(T.matmul(f, ps[bp + "w1"])), ps[bp + "w2"])
        h = T.add(h, f)
    h = T.rmsnorm(h, ps[prefix + "out_gain"])
    return T.add(T.matmul(h, ps[prefix + "out_w"]), ps[prefix + "out_b"])


# ---------------------------------------------------------------------------
# progress critic


@dataclass
class ProgressCritic:
    in_dim: int
    width: int = 64
    blocks: int = 2
    buckets: int = 101
    ps: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        if len(self.ps) == 0:
            init_mlp_head(self.ps, "v.", self.in_dim, self.width, self.blocks,
                          self.buckets, np.random.default_rng(0))

    def logits(self, x: Tensor) -> Tensor:
        return mlp_head_forward(self.ps, "v.", x, self.blocks)

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.logits(Tensor(x)), axis=-1).data

    def decode(self, x: np.ndarray) -> np.ndarray:
        """Expected progress bucket in [0, 100]."""
        return self.probabilities(x) @ np.arange(self.buckets, dtype=np.float64)


def episode_features(policy: Policy, episodes: list[EpisodeRecord],
                     modules: dict, batch: int = 256) -> list[np.ndarray]:
    """Per-step critic inputs: pooled cognition feature ++ normalized state."""
    feats = []
    for ep in episodes:
        stats = policy.norm[ep.embodiment]
        frames = list(ep.frames)
        windows = np.stack([window_for_step(frames[:t + 1], policy.cfg.offsets)
                            for t in range(ep.length)])
        spec = policy.spec(ep.embodiment)
        pooled = []
        with T.no_grad():
            for lo in range(0, ep.length, batch):
                h = policy.encode_features(ep.embodiment, windows[lo:lo + batch],
                                           [spec.instr_id] * min(batch, ep.length - lo),
                                           motion=bool(modules.get("motion")))
                pooled.append(h.data.mean(axis=1))
        s = stats.state.normalize(ep.states)
        feats.append(np.concatenate([np.concatenate(pooled, axis=0), s], axis=-1))
    return feats


def progress_targets(length: int, buckets: int = 101) -> np.ndarray:
    """Bucket round(100 * t / T) for each step of a success episode."""
    denom = max(length - 1, 1)
    return np.clip(np.round((buckets - 1) * np.arange(length) / denom),
                   0, buckets - 1).astype(np.int64)


def train_progress_critic(policy: Policy, episodes: list[EpisodeRecord],
                          modules: dict, steps: int = 400, batch: int = 128,
                          lr: float = 1e-3, seed: int = 0,
                          critic: ProgressCritic | None = None) -> ProgressCritic:
    """Cross-entropy to normalized elapsed progress on success episodes."""
    succ = [ep for ep in episodes if ep.success]
    if not succ:
        raise ValueError("progress critic needs success demonstrations")
    feats = episode_features(policy, succ, modules)
    xs = np.concatenate(feats, axis=0)
    ys = np.concatenate([progress_targets(ep.length) for ep in succ])
    critic = critic or ProgressCritic(in_dim=xs.shape[-1])
    onehot = np.zeros((ys.size, critic.buckets))
    onehot[np.arange(ys.size), ys] = 1.0
    opt = AdamW(critic.ps, lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        idx = rng.integers(0, xs.shape[0], size=min(batch, xs.shape[0]))
        critic.ps.zero_grad()
        loss = cross_entropy(critic.logits(Tensor(xs[idx])), onehot[idx])
        grads = T.backward(loss, critic.ps)
        opt.step(grads)
    return critic


@dataclass
class AdvantageLabel:
    episode: int
    t: int
    delta: float
    positive: bool


def annotate_advantages(critic: ProgressCritic, policy: Policy,
                        episodes: list[EpisodeRecord], modules: dict,
                        chunk: int | None = None) -> list[AdvantageLabel]:
    """Per-chunk progress deltas, binarized at the dataset median.

    delta_t = V(t + H + 1, terminal-clamped) - V(t); ties count negative.
    """
    chunk = chunk or policy.cfg.chunk
    feats = episode_features(policy, episodes, modules)
    stride = policy.cfg.exec_horizon
    rows = []
    for ei, ep in enumerate(episodes):
        values = critic.decode(feats[ei])
        for t in range(0, ep.length, stride):
            nxt = min(t + chunk, ep.length - 1)
            rows.append(AdvantageLabel(ei, t, float(values[nxt] - values[t]), False))
    med = float(np.median([r.delta for r in rows]))
    for r in rows:
        r.positive = r.delta > med
    return rows


def monotonic_fraction(critic: ProgressCritic, feats: np.ndarray) -> float:
    """Share of adjacent step pairs with non-decreasing decoded value."""
    v = critic.decode(feats)
    return float(np.mean(np.diff(v) >= 0.0))


# ---------------------------------------------------------------------------
# advantage-conditioned policy training and the refinement loop


def train_policy_with_advantages(policy: Policy, episodes: list[EpisodeRecord],
                                 labels: list[AdvantageLabel], modules: dict,
                                 stage: StageConfig) -> list[dict]:
    policy.enable_adv_token()
    emb = episodes[0].embodiment
    ds = build_chunk_dataset(episodes, policy)
    bits = np.zeros(len(ds), dtype=np.int64)
    lookup = {(r.episode, r.t): int(r.positive) for r in labels}
    for i in range(len(ds)):
        bits[i] = lookup.get((int(ds.episode_idx[i]), int(ds.step_idx[i])), 0)
    ds.adv_bits = bits
    return run_stage(policy, stage, {emb: ds}, modules, "cosine")


def recap_iterate(policy: Policy, critic: ProgressCritic,
                  episodes: list[EpisodeRecord], env_kind: str, n_rollouts: int,
                  modules: dict, policy_stage: StageConfig,
                  critic_steps: int = 300, rollout_seed: int = 500,
                  env_kwargs: dict | None = None):
    """One refinement round: roll out, aggregate, refit critic on successes,
    re-annotate, retrain the advantage-conditioned policy."""
    new_eps = []
    if n_rollouts > 0:
        res = evaluate(policy, env_kind, n_rollouts, seed=rollout_seed,
                       modules=modules, record=True, adv_bit=1,
                       env_kwargs=env_kwargs)
        new_eps = res.episodes
    dataset = list(episodes) + new_eps
    succ = [ep for ep in dataset if ep.success]
    if succ:
        critic = train_progress_critic(policy, succ, modules, steps=critic_steps,
                                       critic=critic)
    labels = annotate_advantages(critic, policy, dataset, modules)
    train_policy_with_advantages(policy, dataset, labels, modules, policy_stage)
    return policy, critic, dataset


# ---------------------------------------------------------------------------
# chunk critic (expectile twin-Q with HL-Gaussian heads)


@dataclass
class ChunkCriticConfig:
    feat_dim: int = 16
    state_dim: int = 1
    chunk_dim: int = 8            # (H+1) * action_dim, flattened
    width: int = 64
    blocks: int = 4
    atoms: int = 101
    support: tuple = (-100.0, 0.0)
    sigma_bins: float = 0.75
    gamma1: float = 0.9           # in-chunk discount
    gamma2: float = 0.99          # chunk-level discount
    rho: float = 0.7              # expectile
    polyak: float = 0.005


class ChunkCritic:
    """Scalar V plus twin distributional Q over (features, state, chunk).

    The Qs carry the Gaussian-smoothed categorical head (their targets are
    projected TD values, which pins where the mass sits); V stays scalar
    because its loss is plain expectile regression on decoded values.
    """

    def __init__(self, cfg: ChunkCriticConfig, seed: int = 0):
        self.cfg = cfg
        self.atoms = uniform_atoms(*cfg.support, cfg.atoms)
        self.sigma = cfg.sigma_bins * (self.atoms[1] - self.atoms[0])
        rng = np.random.default_rng(seed)
        self.ps = ParamStore()
        in_v = cfg.feat_dim + cfg.state_dim
        in_q = in_v + cfg.chunk_dim
        init_mlp_head(self.ps, "v.", in_v, cfg.width, cfg.blocks, 1, rng)
        init_mlp_head(self.ps, "q1.", in_q, cfg.width, cfg.blocks, cfg.atoms, rng)
        init_mlp_head(self.ps, "q2.", in_q, cfg.width, cfg.blocks, cfg.atoms, rng)
        self.target = ParamStore()
        for name, t in self.ps.items():
            self.target.add(name, t.data.copy())

    def _head(self, prefix: str, x: Tensor, store: ParamStore | None = None) -> Tensor:
        return mlp_head_forward(store or self.ps, prefix, x, self.cfg.blocks)

    def v_value(self, sx: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self._head("v.", Tensor(sx)).data[:, 0]

    def q_value(self, sx: np.ndarray, chunk: np.ndarray,
                use_target: bool = False) -> np.ndarray:
        """min(Q1, Q2) decoded to scalars."""
        x = Tensor(np.concatenate([sx, chunk.reshape(chunk.shape[0], -1)], axis=-1))
        store = self.target if use_target else self.ps
        with T.no_grad():
            q1 = hl_decode(T.softmax(self._head("q1.", x, store), -1), self.atoms)
            q2 = hl_decode(T.softmax(self._head("q2.", x, store), -1), self.atoms)
        return np.minimum(q1, q2)


def chunk_returns(rewards: np.ndarray, t: int, chunk: int, gamma1: float) -> float:
    """In-chunk discounted sum of shifted rewards r-1; absorbing past the end."""
    total = 0.0
    for i in range(chunk):
        if t + i < rewards.shape[0]:
            total += (gamma1 ** i) * (float(rewards[t + i]) - 1.0)
    return total


def train_chunk_critic(critic: ChunkCritic, feats: list[np.ndarray],
                       episodes: list[EpisodeRecord], norm_action,
                       chunk: int, stride: int, steps: int = 600,
                       batch: int = 128, lr: float = 1e-3, seed: int = 0) -> ChunkCritic:
    """Offline expectile/TD fitting on chunked transitions.

    feats[i] are per-step critic inputs for episodes[i] (frozen backbone).
    """
    cfg = critic.cfg
    sx, ax, rs, nsx, terminal = [], [], [], [], []
    for f, ep in zip(feats, episodes):
        for t in range(0, ep.length, stride):
            sx.append(f[t])
            ax.append(norm_action(_chunk_slice(ep.actions, t, chunk)).reshape(-1))
            rs.append(chunk_returns(ep.rewards, t, chunk, cfg.gamma1))
            nxt = t + chunk
            terminal.append(nxt >= ep.length)
            nsx.append(f[min(nxt, ep.length - 1)])
    sx, ax = np.stack(sx), np.stack(ax)
    rs, nsx = np.asarray(rs), np.stack(nsx)
    done = np.asarray(terminal, dtype=np.float64)

    opt = AdamW(critic.ps, lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        idx = rng.integers(0, sx.shape[0], size=min(batch, sx.shape[0]))
        s_b, a_b = sx[idx], ax[idx]
        q_in = np.concatenate([s_b, a_b], axis=-1)

        # V regresses toward min target-Q via the expectile
        min_q = critic.q_value(s_b, a_b, use_target=True)
        critic.ps.zero_grad()
        v_scalar = critic._head("v.", Tensor(s_b))
        u = T.sub(Tensor(min_q[:, None]), v_scalar)
        loss_v = expectile_loss(u, cfg.rho)

        # Qs regress toward the projected TD target
        v_next = critic.v_value(nsx[idx])
        td = rs[idx] + cfg.gamma2 * (1.0 - done[idx]) * v_next
        td = np.clip(td, critic.atoms[0], critic.atoms[-1])
        target_probs = hl_project(td, critic.atoms, critic.sigma)
        loss_q1 = cross_entropy(critic._head("q1.", Tensor(q_in)), target_probs)
        loss_q2 = cross_entropy(critic._head("q2.", Tensor(q_in)), target_probs)
        loss = T.add(loss_v, T.add(loss_q1, loss_q2))
        grads = T.backward(loss, critic.ps)
        opt.step(grads)
        polyak_update(critic.ps, critic.target, cfg.polyak)
    return critic


def _chunk_slice(arr: np.ndarray, start: int, count: int) -> np.ndarray:
    end = min(start + count, arr.shape[0])
    body = arr[start:end]
    if body.shape[0] < count:
        body = np.concatenate([body, np.repeat(arr[-1:], count - body.shape[0],
                                               axis=0)])
    return body


# ---------------------------------------------------------------------------
# best-of-N selection


def best_of_n(sampler, scorer, n: int, rng: np.random.Generator):
    """Draw n candidate chunks, return the argmax under the scorer.

    Ties resolve to the lowest sample index; n=1 reduces to plain sampling.
    """
    if n < 1:
        raise ValueError("need at least one candidate")
    best_chunk, best_score, best_i = None, -np.inf, -1
    for i in range(n):
        chunk = sampler(rng)
        score = float(scorer(chunk))
        if score > best_score:
            best_chunk, best_score, best_i = chunk, score, i
    return best_chunk, best_i, best_score
