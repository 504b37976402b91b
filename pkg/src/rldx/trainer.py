"""Three-stage training pipeline and closed-loop evaluation.

Stage 1 (pretrain) teaches vision+action flow matching across several
embodiments with the motion/memory/physics modules disabled; a small
fraction of each batch routes through the embodiment-agnostic head.
Stage 2 (midtrain) switches the extra modules on, trains only the new
parameters during an alignment warmup, then everything jointly, with
per-sample dropout on each expanded modality. Stage 3 (finetune)
specializes on one task with the lower encoder layers frozen.

Training samples are chunk-aligned to the deployment replan grid, and
memory-queue entries are rebuilt exactly as the acting loop would hold
them, so train-time and run-time conditioning agree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .envs import EpisodeRecord, make_env
from .flow import FlowBatch, TauSchedule, compute_norm_stats, fm_loss
from .memory import MemoryQueue, queue_stamps_for
from .model import Policy, window_for_step
from .msat import AGNOSTIC, physics_param_names
from .tensor import ParamStore, Tensor

MODULE_KEYS = ("motion", "memory", "physics")


@dataclass
class StageConfig:
    stage: str                      # pretrain | midtrain | finetune
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.05
    modality_dropout: float = 0.0
    state_dropout: float = 0.0
    agnostic_frac: float = 0.0
    alignment_steps: int = 0        # midtrain: new-module-only phase
    gate_open_steps: int = 0        # midtrain: physics-gate ramp after alignment
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    frozen_prefixes: tuple = ()
    lam_p: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        for r in (self.modality_dropout, self.state_dropout, self.agnostic_frac,
                  self.warmup_frac):
            if not 0.0 <= r <= 1.0:
                raise ValueError("rates must lie in [0, 1]")


class AdamW:
    """Decoupled weight-decay Adam; decay applies to matrix weights only."""

    def __init__(self, params: ParamStore, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-12):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grads: dict, lr_scale: float = 1.0,
             trainable: set | None = None) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if trainable is not None and name not in trainable:
                continue
            g = grads.get(name)
            if g is None or not np.any(g):
                continue  # untouched modules neither update nor decay
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim >= 2:
                p.data -= lr * self.wd * p.data
            p.data -= lr * upd


def lr_scale(step: int, total: int, warmup_frac: float, kind: str) -> float:
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return (step + 1) / warm
    if kind == "constant":
        return 1.0
    frac = (step - warm) / max(1, total - warm)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads


# ---------------------------------------------------------------------------
# chunk-aligned samples


@dataclass
class ChunkDataset:
    """Stacked chunk samples of one embodiment, replan-grid aligned."""

    embodiment: str
    windows: np.ndarray        # [N, F, C, H, W]
    queue_windows: np.ndarray  # [N, n_mem, F, C, H, W]
    queue_present: np.ndarray  # [N, n_mem]
    states: np.ndarray         # [N, sd]
    actions: np.ndarray        # [N, H+1, ad]
    p_now: np.ndarray          # [N, pd]
    p_future: np.ndarray       # [N, L, pd]
    episode_idx: np.ndarray    # [N] provenance
    step_idx: np.ndarray       # [N]
    adv_bits: np.ndarray | None = None

    def __len__(self) -> int:
        return self.windows.shape[0]


def _padded_slice(arr: np.ndarray, start: int, count: int) -> np.ndarray:
    """arr[start:start+count], repeating the last row past the end."""
    end = min(start + count, arr.shape[0])
    body = arr[start:end]
    if body.shape[0] < count:
        pad = np.repeat(arr[-1:], count - body.shape[0], axis=0)
        body = np.concatenate([body, pad], axis=0)
    return body


def build_chunk_dataset(episodes: list[EpisodeRecord], policy: Policy,
                        stride: int | None = None) -> ChunkDataset:
    cfg = policy.cfg
    emb = episodes[0].embodiment
    stride = stride or cfg.exec_horizon
    rows = {k: [] for k in ("w", "qw", "qp", "s", "a", "pn", "pf", "ei", "ti")}
    for ei, ep in enumerate(episodes):
        frames = list(ep.frames)
        for t in range(0, ep.length, stride):
            rows["w"].append(window_for_step(frames[:t + 1], cfg.offsets))
            stamps = queue_stamps_for(t, cfg.chunk, cfg.n_mem)
            qw = np.zeros((cfg.n_mem,) + rows["w"][-1].shape, dtype=np.float32)
            qp = np.zeros(cfg.n_mem, dtype=np.float64)
            for j, stamp in enumerate(stamps):
                slot = cfg.n_mem - len(stamps) + j
                qw[slot] = window_for_step(frames[:stamp + 1], cfg.offsets)
                qp[slot] = 1.0
            rows["qw"].append(qw)
            rows["qp"].append(qp)
            rows["s"].append(ep.states[t])
            rows["a"].append(_padded_slice(ep.actions, t, cfg.chunk))
            if ep.physics.shape[-1] > 0:
                rows["pn"].append(ep.physics[t])
                rows["pf"].append(_padded_slice(ep.physics, t + 1, cfg.chunk))
            else:
                rows["pn"].append(np.zeros(0, np.float32))
                rows["pf"].append(np.zeros((cfg.chunk, 0), np.float32))
            rows["ei"].append(ei)
            rows["ti"].append(t)
    return ChunkDataset(
        embodiment=emb,
        windows=np.stack(rows["w"]),
        queue_windows=np.stack(rows["qw"]),
        queue_present=np.stack(rows["qp"]),
        states=np.stack(rows["s"]).astype(np.float64),
        actions=np.stack(rows["a"]).astype(np.float64),
        p_now=np.stack(rows["pn"]).astype(np.float64),
        p_future=np.stack(rows["pf"]).astype(np.float64),
        episode_idx=np.asarray(rows["ei"]),
        step_idx=np.asarray(rows["ti"]))


# ---------------------------------------------------------------------------
# loss assembly


def batch_loss(policy: Policy, ds: ChunkDataset, idx: np.ndarray, modules: dict,
               rng: np.random.Generator, stage: StageConfig,
               schedule: TauSchedule, head: str | None = None) -> Tensor:
    """Flow-matching loss over one batch of chunk samples."""
    cfg = policy.cfg
    emb = ds.embodiment
    spec = policy.spec(emb)
    stats = policy.norm[emb]
    b = idx.size

    motion = bool(modules.get("motion"))
    motion_drop = None
    if motion and stage.modality_dropout > 0:
        keep = (rng.random(b) >= stage.modality_dropout).astype(np.float64)
        motion_drop = Tensor(keep.reshape(b, 1, 1, 1))

    if modules.get("memory"):
        main = ds.windows[idx]
        queue = ds.queue_windows[idx]
        stacked = np.concatenate(
            [main, queue.reshape((b * cfg.n_mem,) + queue.shape[2:])], axis=0)
        feats = policy.encode_features(
            emb, stacked, [spec.instr_id] * (b * (1 + cfg.n_mem)), motion,
            _tile_drop(motion_drop, cfg.n_mem))
        h = T.slice_axis(feats, 0, b, axis=0)
        entries = T.reshape(T.slice_axis(feats, b, b * (1 + cfg.n_mem), axis=0),
                            (b, cfg.n_mem, cfg.n_q, cfg.d))
        m = policy.memory_features(entries, ds.queue_present[idx], h)
        if stage.modality_dropout > 0:
            keep = (rng.random(b) >= stage.modality_dropout).astype(np.float64)
            m = T.mul(m, Tensor(keep.reshape(b, 1, 1)))
    else:
        h = policy.encode_features(emb, ds.windows[idx], [spec.instr_id] * b,
                                   motion, motion_drop)
        m = policy.zero_memory(b)

    s = stats.state.normalize(ds.states[idx])
    if stage.state_dropout > 0:
        s = s * (rng.random((b, 1)) >= stage.state_dropout)
    s = Tensor(s)

    a_clean = stats.action.normalize(ds.actions[idx])
    use_p = bool(modules.get("physics")) and spec.physics_dim > 0
    p_now = p_fut = p_present = None
    if use_p:
        p_now_np = stats.physics.normalize(ds.p_now[idx])
        p_fut = stats.physics.normalize(ds.p_future[idx])
        p_present = np.ones(b)
        if stage.modality_dropout > 0:
            p_present = (rng.random(b) >= stage.modality_dropout).astype(np.float64)
        p_now = Tensor(p_now_np)

    adv = ds.adv_bits[idx] if ds.adv_bits is not None else None

    def model_fn(a_noisy, tau, p_noisy):
        return policy.velocity(head or emb, h, m, s, a_noisy, tau,
                               p_now, p_noisy, p_present, adv)

    batch = FlowBatch(a_clean=a_clean, p_future=p_fut, p_present=p_present)
    return fm_loss(model_fn, batch, stage.lam_p, rng, schedule)


def _tile_drop(motion_drop: Tensor | None, n_mem: int) -> Tensor | None:
    if motion_drop is None:
        return None
    d = motion_drop.data
    return Tensor(np.concatenate([d] + [d] * n_mem, axis=0))


# ---------------------------------------------------------------------------
# stages


def ensure_norm_stats(policy: Policy, datasets: dict) -> None:
    for emb, episodes in datasets.items():
        if emb not in policy.norm:
            policy.norm[emb] = compute_norm_stats(episodes, emb)


def _trainable_set(policy: Policy, frozen_prefixes) -> set:
    frozen = tuple(frozen_prefixes)
    return {n for n in policy.ps.names() if not n.startswith(frozen)}


def new_module_param_names(policy: Policy, fresh_embodiments=()) -> set:
    """Parameters introduced by the expanded modules (and any embodiment
    unseen during pretraining)."""
    names = set()
    for n in policy.ps.names():
        if n.startswith("enc.stss_") or n.startswith("mem."):
            names.add(n)
        if n in ("msat.proj_m", "msat.proj_m_b"):
            names.add(n)
    names.update(physics_param_names(policy.ps))
    for emb in fresh_embodiments:
        for n in policy.ps.names():
            if n.startswith(f"enc.{emb}.") or n.startswith(f"msat.head.{emb}."):
                names.add(n)
    return names


def run_stage(policy: Policy, stage: StageConfig, datasets: dict,
              modules: dict, schedule_kind: str = "constant",
              trainable: set | None = None,
              alignment_set: set | None = None,
              log_path: str | None = None) -> list[dict]:
    """Shared optimization loop; datasets round-robin per step.

    `datasets` maps embodiment -> episode list or prebuilt ChunkDataset
    (prebuilt sets require norm stats to exist already)."""
    ensure_norm_stats(policy, {emb: d for emb, d in datasets.items()
                               if not isinstance(d, ChunkDataset)})
    chunk_sets = {emb: d if isinstance(d, ChunkDataset)
                  else build_chunk_dataset(d, policy)
                  for emb, d in datasets.items()}
    embs = sorted(chunk_sets)
    opt = AdamW(policy.ps, stage.lr, stage.weight_decay)
    rng = np.random.default_rng(stage.seed)
    schedule = TauSchedule(policy.cfg.tau_mode, policy.cfg.denoise_steps)
    base_trainable = (trainable if trainable is not None
                      else _trainable_set(policy, stage.frozen_prefixes))
    history = []
    log_fh = open(log_path, "w") if log_path else None
    for step in range(stage.steps):
        emb = embs[step % len(embs)]
        ds = chunk_sets[emb]
        idx = rng.integers(0, len(ds), size=min(stage.batch_size, len(ds)))
        policy.ps.zero_grad()
        n_agn = int(round(stage.agnostic_frac * idx.size))
        if n_agn > 0:
            loss_a = batch_loss(policy, ds, idx[:n_agn], modules, rng, stage,
                                schedule, head=AGNOSTIC)
            loss_s = batch_loss(policy, ds, idx[n_agn:], modules, rng, stage,
                                schedule)
            loss = T.add(T.scale(loss_a, n_agn / idx.size),
                         T.scale(loss_s, (idx.size - n_agn) / idx.size))
        else:
            loss = batch_loss(policy, ds, idx, modules, rng, stage, schedule)
        grads = T.backward(loss, policy.ps)
        grads = clip_gradients(grads, stage.grad_clip)
        active = base_trainable
        if alignment_set is not None and step < stage.alignment_steps:
            active = alignment_set
        opt.step(grads, lr_scale(step, stage.steps, stage.warmup_frac,
                                 schedule_kind), trainable=active)
        if stage.gate_open_steps > 0:
            # physics attention gates start almost closed so that enabling
            # the P stream is invisible; a gradient cannot open them (its
            # magnitude carries the e^{-gate} attention mass), so midtrain
            # ramps them open deterministically after alignment.
            k = step - stage.alignment_steps
            frac = min(max(k / stage.gate_open_steps, 0.0), 1.0)
            for name in policy.ps.names():
                if name.endswith("pgate"):
                    policy.ps[name].data[:] = min(
                        float(policy.ps[name].data[0]), 1.0 - frac)
        rec = {"step": step, "loss": float(loss.item()),
               "lr": stage.lr * lr_scale(step, stage.steps, stage.warmup_frac,
                                         schedule_kind)}
        if step % stage.log_every == 0 or step == stage.steps - 1:
            history.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
    if log_fh:
        log_fh.close()
    return history


def pretrain(policy: Policy, datasets: dict, stage: StageConfig,
             log_path: str | None = None) -> list[dict]:
    """Stage 1: multi-embodiment vision+action flow matching."""
    if len(datasets) < 2:
        raise ValueError("pretraining expects at least two embodiment datasets")
    if not all(eps for eps in datasets.values()):
        raise ValueError("empty dataset")
    modules = {"motion": False, "memory": False, "physics": False}
    policy.cfg.modules = dict(modules)
    return run_stage(policy, stage, datasets, modules, "constant",
                     log_path=log_path)


def midtrain(policy: Policy, datasets: dict, stage: StageConfig,
             pretrain_embodiments=("conveyor", "shell"),
             log_path: str | None = None) -> list[dict]:
    """Stage 2: functionality expansion with alignment warmup."""
    modules = {"motion": True, "memory": True, "physics": True}
    policy.cfg.modules = dict(modules)
    fresh = [e for e in datasets if e not in pretrain_embodiments]
    align = new_module_param_names(policy, fresh)
    return run_stage(policy, stage, datasets, modules, "constant",
                     alignment_set=align, log_path=log_path)


def finetune(policy: Policy, dataset: dict, stage: StageConfig,
             modules: dict, top_layers: int = 2,
             log_path: str | None = None) -> list[dict]:
    """Stage 3: task specialization; lower encoder layers frozen."""
    policy.cfg.modules = dict(modules)
    frozen = encoder_freeze_prefixes(policy, top_layers)
    trainable = {n for n in policy.ps.names()
                 if not any(n.startswith(p) for p in frozen)}
    return run_stage(policy, stage, dataset, modules, "cosine",
                     trainable=trainable, log_path=log_path)


def encoder_freeze_prefixes(policy: Policy, top_layers: int) -> list[str]:
    """Patch front-ends plus every encoder layer below the top `top_layers`."""
    prefixes = []
    for spec in policy.cfg.embodiments:
        prefixes.append(f"enc.{spec.name}.")
    for li in range(policy.cfg.enc_layers - top_layers):
        prefixes.append(f"enc.l{li}.")
    return prefixes


# ---------------------------------------------------------------------------
# closed-loop evaluation


@dataclass
class EvalResult:
    success_rate: float
    mean_len: float
    mean_success_len: float
    n: int
    episodes: list = field(default_factory=list)

    def to_doc(self) -> dict:
        return {"success_rate": self.success_rate, "mean_len": self.mean_len,
                "mean_success_len": self.mean_success_len, "n": self.n}


def policy_planner(policy: Policy, modules: dict, steps: int | None = None,
                   temperature: float | None = None, adv_bit: int | None = None,
                   offsets=None, head: str | None = None):
    """Adapt a Policy into the planner interface used by run_episode."""
    offs = tuple(offsets) if offsets is not None else policy.cfg.offsets

    def plan(emb, history, queue, s_raw, p_raw, rng):
        window = window_for_step(history, offs)
        return policy.plan_chunk(emb, window, queue, s_raw, p_raw, rng,
                                 modules=modules, steps=steps,
                                 temperature=temperature, adv_bit=adv_bit,
                                 head=head)[0]

    def cognition(emb, history):
        window = window_for_step(history, offs)
        return policy.cognition_feature(emb, window, bool(modules.get("motion")))

    plan.cognition = cognition
    return plan


def run_episode(planner, env, seed: int, exec_horizon: int, chunk: int,
                n_mem: int, use_memory: bool, rng: np.random.Generator,
                record: bool = False):
    """Closed loop: replan every exec_horizon steps, push memory on the
    chunk grid (after acting), execute the first actions of each chunk."""
    frame = env.reset(seed)
    history = [frame]
    queue = MemoryQueue(n_mem, chunk)
    rows = {k: [] for k in ("f", "s", "a", "p", "r")}
    t = 0
    plan = None
    while not env.done:
        if t % exec_horizon == 0:
            s_raw, p_raw = env.state(), env.physics()
            plan = planner(env.embodiment, history, queue, s_raw,
                           p_raw if env.physics_dim else None, rng)
            if use_memory and t % chunk == 0:
                queue.push(t, planner.cognition(env.embodiment, history))
        a = plan[t % exec_horizon]
        if record:
            rows["f"].append(history[-1])
            rows["s"].append(env.state())
            rows["p"].append(env.physics())
            rows["a"].append(np.asarray(a, dtype=np.float32))
        frame, _, _, r, _ = env.step(a)
        history.append(frame)
        if record:
            rows["r"].append(r)
        t += 1
    ep = None
    if record:
        ep = EpisodeRecord(
            frames=np.stack(rows["f"]).astype(np.float32),
            states=np.stack(rows["s"]).astype(np.float32),
            actions=np.stack(rows["a"]).astype(np.float32),
            physics=np.stack(rows["p"]).astype(np.float32)
            if env.physics_dim else np.zeros((t, 0), np.float32),
            rewards=np.asarray(rows["r"], dtype=np.float32),
            success=env.success, task_id=0, embodiment=env.embodiment)
    return env.success, t, ep


def evaluate(policy_or_planner, env_kind: str, n_episodes: int, seed: int,
             exec_horizon: int | None = None, steps: int | None = None,
             modules: dict | None = None, offsets=None, record: bool = False,
             env_kwargs: dict | None = None, adv_bit: int | None = None,
             temperature: float | None = None) -> EvalResult:
    """Success rate and episode length over seeded closed-loop episodes."""
    env = make_env(env_kind, **(env_kwargs or {}))
    if isinstance(policy_or_planner, Policy):
        policy = policy_or_planner
        modules = modules if modules is not None else policy.cfg.modules
        planner = policy_planner(policy, modules, steps=steps, offsets=offsets,
                                 adv_bit=adv_bit, temperature=temperature)
        m = exec_horizon or policy.cfg.exec_horizon
        chunk, n_mem = policy.cfg.chunk, policy.cfg.n_mem
        use_memory = bool(modules.get("memory"))
    else:
        # a callable env -> planner (scripted experts, random baselines)
        planner = policy_or_planner(env)
        modules = modules or {}
        m = exec_horizon or 1
        chunk, n_mem = m, 0
        use_memory = False
    wins, lens, win_lens, episodes = 0, [], [], []
    for i in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 77]))
        ok, length, ep = run_episode(planner, env, seed + i, m, chunk, n_mem,
                                     use_memory, rng, record)
        wins += ok
        lens.append(length)
        if ok:
            win_lens.append(length)
        if record and ep is not None:
            episodes.append(ep)
    return EvalResult(success_rate=wins / n_episodes,
                      mean_len=float(np.mean(lens)),
                      mean_success_len=float(np.mean(win_lens)) if win_lens else 0.0,
                      n=n_episodes, episodes=episodes)
