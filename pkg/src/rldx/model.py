"""Policy assembly: encoder trunk + memory + action transformer + heads.

One `Policy` owns every parameter, the per-embodiment observation
geometry, and the normalization stats, and provides the two call paths
everything else uses: batched feature/velocity evaluation for training,
and `plan_chunk` for closed-loop acting. Checkpoints are a JSON index
(config + name -> dtype/shape/offset) next to a raw little-endian
payload file.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .encoder import (EncoderConfig, encode_batch, init_patch_params,
                      init_trunk_params, instruction_onehot, patchify,
                      window_from_history)
from .flow import NormStats, TauSchedule, euler_sample, load_norm_stats, save_norm_stats
from .memory import MemoryConfig, MemoryQueue, memory_forward_batch
from .memory import init_params as init_memory_params
from .msat import (AGNOSTIC, Embodiment, EmbodimentRegistry, MsatConfig,
                   add_advantage_params, msat_forward)
from .msat import init_params as init_msat_params
from .tensor import NumericsError, ParamStore, Tensor

CHECKPOINT_FORMAT = 1


@dataclass
class EmbodimentSpec:
    name: str
    state_dim: int
    action_dim: int
    physics_dim: int
    frame_shape: tuple
    patch_w: int
    instr_id: int


def default_embodiments() -> list[EmbodimentSpec]:
    return [
        EmbodimentSpec("conveyor", 1, 1, 0, (3, 1, 24), 4, 0),
        EmbodimentSpec("shell", 1, 2, 0, (3, 1, 9), 3, 1),
        EmbodimentSpec("probe", 1, 1, 1, (2, 1, 16), 4, 2),
    ]


@dataclass
class PolicyConfig:
    d: int = 48
    enc_layers: int = 4
    enc_heads: int = 4
    n_q: int = 6
    n_frames: int = 4
    offsets: tuple = (-6, -4, -2, 0)
    stss_layer: int = 1
    stss_radius: int = 1
    stss_hidden: int = 16
    compress_layer: int = 2
    extract_layer: int = 0          # 0 -> last layer
    n_instructions: int = 4
    enc_ffn_mult: int = 2
    d_model: int = 48
    msat_heads: int = 4
    n_phase1: int = 2
    n_phase2: int = 2
    msat_ffn_mult: int = 2
    chunk: int = 8                  # H+1
    n_mem: int = 3
    mem_layers: int = 2
    mem_heads: int = 4
    mem_ffn_mult: int = 2
    rope_base: float = 10000.0
    adv_token: bool = False
    denoise_steps: int = 4
    tau_mode: str = "beta"
    exec_horizon: int = 4
    temperature: float = 1.0
    seed: int = 0
    modules: dict = field(default_factory=lambda: {
        "motion": False, "memory": False, "physics": False})
    embodiments: list = field(default_factory=default_embodiments)

    def __post_init__(self):
        self.offsets = tuple(self.offsets)
        self.embodiments = [e if isinstance(e, EmbodimentSpec)
                            else EmbodimentSpec(**{**e, "frame_shape": tuple(e["frame_shape"])})
                            for e in self.embodiments]
        if self.exec_horizon > self.chunk:
            raise NumericsError("execution horizon cannot exceed the chunk")
        if self.chunk % self.exec_horizon != 0:
            raise NumericsError("execution horizon must divide the chunk")

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["offsets"] = list(self.offsets)
        for e in doc["embodiments"]:
            e["frame_shape"] = list(e["frame_shape"])
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "PolicyConfig":
        return PolicyConfig(**doc)


class Policy:
    def __init__(self, cfg: PolicyConfig, init_seed: int | None = None):
        self.cfg = cfg
        self.ps = ParamStore()
        self.norm: dict[str, NormStats] = {}
        rng = np.random.default_rng(cfg.seed if init_seed is None else init_seed)

        self.registry = EmbodimentRegistry()
        for spec in cfg.embodiments:
            self.registry.add(Embodiment(spec.name, spec.state_dim,
                                         spec.action_dim, spec.physics_dim))

        init_trunk_params(self.ps, self.enc_cfg(cfg.embodiments[0].name), rng)
        for spec in cfg.embodiments:
            init_patch_params(self.ps, self.enc_cfg(spec.name), rng, key=spec.name)
        init_memory_params(self.ps, self.mem_cfg, rng)
        init_msat_params(self.ps, self.msat_cfg, self.registry, rng)

    # -- config views -------------------------------------------------------

    def spec(self, name: str) -> EmbodimentSpec:
        for spec in self.cfg.embodiments:
            if spec.name == name:
                return spec
        raise NumericsError(f"unknown embodiment {name!r}")

    def enc_cfg(self, name: str) -> EncoderConfig:
        c = self.cfg
        spec = self.spec(name)
        return EncoderConfig(
            d=c.d, n_layers=c.enc_layers, n_heads=c.enc_heads, n_q=c.n_q,
            n_frames=c.n_frames, offsets=c.offsets, frame_shape=spec.frame_shape,
            patch_w=spec.patch_w, stss_layer_index=c.stss_layer,
            stss_radius=c.stss_radius, stss_hidden=c.stss_hidden,
            compress_layer_index=c.compress_layer, extract_layer_index=c.extract_layer,
            n_instructions=c.n_instructions, ffn_mult=c.enc_ffn_mult)

    @property
    def msat_cfg(self) -> MsatConfig:
        c = self.cfg
        return MsatConfig(d_model=c.d_model, n_heads=c.msat_heads,
                          n_phase1=c.n_phase1, n_phase2=c.n_phase2, chunk=c.chunk,
                          n_q=c.n_q, d_cond=c.d, rope_base=c.rope_base,
                          ffn_mult=c.msat_ffn_mult, adv_token=c.adv_token)

    @property
    def mem_cfg(self) -> MemoryConfig:
        c = self.cfg
        return MemoryConfig(d=c.d, n_layers=c.mem_layers, n_heads=c.mem_heads,
                            n_mem=c.n_mem, interval=c.chunk, n_q=c.n_q,
                            ffn_mult=c.mem_ffn_mult)

    def enable_adv_token(self) -> None:
        if not self.cfg.adv_token:
            self.cfg.adv_token = True
            add_advantage_params(self.ps, self.msat_cfg)

    # -- forward paths ------------------------------------------------------

    def encode_features(self, emb: str, frames: np.ndarray, instr_ids,
                        motion: bool, motion_drop: Tensor | None = None) -> Tensor:
        """[B, F, C, H, W] frames -> [B, n_q, d] cognition features."""
        cfg = self.enc_cfg(emb)
        patches = Tensor(patchify(frames, cfg))
        onehot = instruction_onehot(instr_ids, cfg.n_instructions)
        return encode_batch(self.ps, cfg, patches, onehot, frames.shape[1],
                            motion=motion, motion_drop=motion_drop, patch_key=emb)

    def memory_features(self, entries: Tensor, present: np.ndarray,
                        h: Tensor) -> Tensor:
        return memory_forward_batch(self.ps, self.mem_cfg, entries, present, h)

    def zero_memory(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, self.cfg.n_q, self.cfg.d)))

    def velocity(self, emb: str, h: Tensor, m: Tensor, s_norm: Tensor,
                 a_noisy: Tensor, tau, p_now: Tensor | None = None,
                 p_noisy: Tensor | None = None, p_present=None, adv_bits=None):
        return msat_forward(self.ps, self.msat_cfg, self.registry, emb, h, m,
                            s_norm, a_noisy, tau, p_now, p_noisy, p_present,
                            adv_bits)

    def plan_chunk(self, emb: str, window_frames: np.ndarray, queue: MemoryQueue,
                   s_raw: np.ndarray, p_raw: np.ndarray | None,
                   rng: np.random.Generator, modules: dict | None = None,
                   steps: int | None = None, temperature: float | None = None,
                   adv_bit: int | None = None, head: str | None = None):
        """One closed-loop planning call: returns (chunk [H+1, ad], forecast).

        `window_frames` is the [F, C, H, W] observation window; the queue
        holds raw cognition features on the chunk grid. `head` overrides
        the projection head (e.g. the embodiment-agnostic one).
        """
        cfg = self.cfg
        modules = modules if modules is not None else cfg.modules
        stats = self.norm[emb]
        spec = self.spec(emb)
        with T.no_grad():
            h = self.encode_features(emb, window_frames[None], [spec.instr_id],
                                     motion=bool(modules.get("motion")))
            if modules.get("memory"):
                pad = np.zeros((1, cfg.n_mem, cfg.n_q, cfg.d))
                present = np.zeros((1, cfg.n_mem))
                q = len(queue)
                for j, featv in enumerate(queue.features()):
                    pad[0, cfg.n_mem - q + j] = featv
                    present[0, cfg.n_mem - q + j] = 1.0
                m = self.memory_features(Tensor(pad), present, h)
            else:
                m = self.zero_memory(1)
            s_norm = Tensor(stats.state.normalize(s_raw)[None])
            use_p = bool(modules.get("physics")) and spec.physics_dim > 0
            p_now = None
            if use_p:
                p_now = Tensor(stats.physics.normalize(p_raw)[None])
            adv = None
            if cfg.adv_token:
                adv = np.array([1 if adv_bit is None else int(adv_bit)])

            def model_fn(a_noisy, tau, p_noisy):
                return self.velocity(head or emb, h, m, s_norm,
                                     T.reshape(a_noisy, (1,) + a_noisy.shape),
                                     tau,
                                     p_now,
                                     T.reshape(p_noisy, (1,) + p_noisy.shape)
                                     if p_noisy is not None else None,
                                     adv_bits=adv)

            def squeeze(fn):
                def inner(a_noisy, tau, p_noisy):
                    va, vp = fn(a_noisy, tau, p_noisy)
                    va = T.reshape(va, va.shape[1:])
                    vp = T.reshape(vp, vp.shape[1:]) if vp is not None else None
                    return va, vp
                return inner

            chunk, forecast = euler_sample(
                squeeze(model_fn), (cfg.chunk, spec.action_dim),
                steps or cfg.denoise_steps, rng,
                temperature=temperature if temperature is not None else cfg.temperature,
                denorm_action=stats.action.denormalize,
                physics_shape=(cfg.chunk, spec.physics_dim) if use_p else None,
                denorm_physics=stats.physics.denormalize if use_p else None)
        return chunk, forecast

    def cognition_feature(self, emb: str, window_frames: np.ndarray,
                          motion: bool) -> np.ndarray:
        spec = self.spec(emb)
        with T.no_grad():
            h = self.encode_features(emb, window_frames[None], [spec.instr_id],
                                     motion=motion)
        return h.data[0]

    # -- persistence --------------------------------------------------------

    def param_hash(self, names=None) -> str:
        md = hashlib.sha256()
        for name in (names if names is not None else self.ps.names()):
            md.update(name.encode())
            md.update(self.ps[name].data.tobytes())
        return md.hexdigest()

    def save(self, stem: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
        index = {"format": CHECKPOINT_FORMAT, "config": self.cfg.to_doc(),
                 "params": {}}
        offset = 0
        chunks = []
        for name, t in self.ps.items():
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            index["params"][name] = {"dtype": "<f8", "shape": list(t.shape),
                                     "offset": offset}
            chunks.append(raw)
            offset += len(raw)
        with open(stem + ".bin", "wb") as fh:
            fh.write(b"".join(chunks))
        with open(stem + ".json", "w") as fh:
            json.dump(index, fh, indent=1, sort_keys=True)
        if self.norm:
            save_norm_stats(stem + ".norm.json", self.norm)

    @staticmethod
    def load(stem: str) -> "Policy":
        with open(stem + ".json") as fh:
            index = json.load(fh)
        if index.get("format") != CHECKPOINT_FORMAT:
            raise NumericsError(f"unsupported checkpoint format {index.get('format')}")
        cfg = PolicyConfig.from_doc(index["config"])
        policy = Policy(cfg)
        with open(stem + ".bin", "rb") as fh:
            payload = fh.read()
        for name, meta in index["params"].items():
            shape = tuple(meta["shape"])
            n = int(np.prod(shape)) if shape else 1
            start = meta["offset"]
            raw = payload[start:start + 8 * n]
            if len(raw) != 8 * n:
                raise NumericsError(f"checkpoint payload truncated at {name}")
            if name not in policy.ps:
                raise NumericsError(f"unexpected parameter {name} in checkpoint")
            policy.ps[name].data[:] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        if os.path.exists(stem + ".norm.json"):
            policy.norm = load_norm_stats(stem + ".norm.json")
        return policy


def window_for_step(history: list[np.ndarray], offsets) -> np.ndarray:
    return window_from_history(history, offsets).frames
