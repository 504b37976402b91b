"""Multi-stream action transformer.

Cognition (C), action (A) and optional physics (P) token streams carry
their own parameters and meet in joint self-attention. The first phase
keeps per-stream blocks; the second merges C and A into one sequence,
with P (when present) staying separate throughout.

Layout of the joint sequence is always [C | A | P]. The A stream is
[timestep token, (advantage token), state token, H+1 noisy-action
tokens]; rotary positions count only inside A (everything else sits at
position 0, an identity rotation). Query/key RMSNorm uses one gain pair
per block applied after concatenation; since both the norm and the
rotation are per-token maps, this equals per-stream application while
keeping the norm->rope->attention chain contiguous for the fusion pass.

Physics isolation works at the attention-mask level: C/A attention onto
P is opened by a learned per-block gate that starts far negative, so a
freshly enabled P stream is invisible to the action output; masking P
out entirely reproduces a physics-free model exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NumericsError, ParamStore, Tensor

NEG_INF = float("-inf")
AGNOSTIC = "agnostic"
GATE_SCALE = 24.0      # attention gate = -GATE_SCALE * gate_param, param init 1


@dataclass(frozen=True)
class Embodiment:
    name: str
    state_dim: int
    action_dim: int
    physics_dim: int = 0

    @property
    def has_physics(self) -> bool:
        return self.physics_dim > 0


@dataclass
class EmbodimentRegistry:
    embodiments: dict = field(default_factory=dict)

    def add(self, emb: Embodiment) -> "EmbodimentRegistry":
        self.embodiments[emb.name] = emb
        return self

    def __getitem__(self, name: str) -> Embodiment:
        if name not in self.embodiments:
            raise NumericsError(f"unknown embodiment {name!r}")
        return self.embodiments[name]

    def __contains__(self, name: str) -> bool:
        return name in self.embodiments

    def names(self) -> list[str]:
        return list(self.embodiments)

    @property
    def max_state(self) -> int:
        return max(e.state_dim for e in self.embodiments.values())

    @property
    def max_action(self) -> int:
        return max(e.action_dim for e in self.embodiments.values())

    @property
    def max_physics(self) -> int:
        return max((e.physics_dim for e in self.embodiments.values()), default=0)

    def agnostic(self) -> Embodiment:
        return Embodiment(AGNOSTIC, self.max_state, self.max_action, self.max_physics)


@dataclass
class MsatConfig:
    d_model: int = 48
    n_heads: int = 4
    n_phase1: int = 2
    n_phase2: int = 2
    chunk: int = 8                 # H+1 actions per chunk
    n_q: int = 8                   # cognition tokens per feature
    d_cond: int = 48               # encoder feature dim
    rope_base: float = 10000.0
    ffn_mult: int = 2
    adv_token: bool = False        # advantage-conditioning token in A
    eps: float = 1e-6

    @property
    def horizon_future(self) -> int:
        return self.chunk            # L = H+1 future physics steps

    @property
    def n_c(self) -> int:
        return 2 * self.n_q          # current feature + memory feature

    @property
    def n_a(self) -> int:
        # timestep, (advantage), state, H+1 noisy actions
        return self.chunk + 2 + (1 if self.adv_token else 0)

    @property
    def n_p(self) -> int:
        return self.horizon_future + 1


@dataclass
class StreamSet:
    """Joint-attention operand: per-stream token blocks plus presence."""

    c: Tensor
    a: Tensor
    p: Tensor | None = None
    p_present: np.ndarray | None = None   # [B] 0/1, per-sample physics dropout

    @property
    def has_p(self) -> bool:
        return self.p is not None


def mask_physics(streams: StreamSet) -> StreamSet:
    """Drop the P stream entirely; later blocks neither read nor write it."""
    return StreamSet(c=streams.c, a=streams.a, p=None, p_present=None)


def _bundle(ps: ParamStore, prefix: str, d: int, h: int, rng) -> None:
    ps.add(prefix + "gain1", np.ones(d))
    ps.add(prefix + "qkv", T.normal_init(rng, (d, 3 * d), d ** -0.5))
    ps.add(prefix + "out", T.normal_init(rng, (d, d), 0.5 * d ** -0.5))
    ps.add(prefix + "gain2", np.ones(d))
    ps.add(prefix + "ffn1", T.normal_init(rng, (d, 2 * h), d ** -0.5))
    ps.add(prefix + "ffn2", T.normal_init(rng, (h, d), 0.5 * h ** -0.5))


def _zero_bundle_outputs(ps: ParamStore, prefix: str) -> None:
    ps[prefix + "out"].data[:] = 0.0
    ps[prefix + "ffn2"].data[:] = 0.0


def init_params(ps: ParamStore, cfg: MsatConfig, registry: EmbodimentRegistry,
                rng: np.random.Generator, prefix: str = "msat.") -> None:
    d, p = cfg.d_model, prefix
    h = cfg.ffn_mult * d
    ps.add(p + "proj_h", T.normal_init(rng, (cfg.d_cond, d), cfg.d_cond ** -0.5))
    ps.add(p + "proj_h_b", np.zeros(d))
    # zero so that enabling the memory module leaves the policy untouched
    ps.add(p + "proj_m", np.zeros((cfg.d_cond, d)))
    ps.add(p + "proj_m_b", np.zeros(d))
    ps.add(p + "tau_w1", T.normal_init(rng, (d, 2 * d), d ** -0.5))
    ps.add(p + "tau_b1", np.zeros(2 * d))
    ps.add(p + "tau_w2", T.normal_init(rng, (d, d), d ** -0.5))
    ps.add(p + "tau_b2", np.zeros(d))
    ps.add(p + "p_pos", T.normal_init(rng, (cfg.n_p, d), 0.02))
    if cfg.adv_token:
        add_advantage_params(ps, cfg, prefix)

    for bi in range(cfg.n_phase1):
        bp = f"{p}p1b{bi}."
        for stream in ("C", "A", "P"):
            _bundle(ps, f"{bp}{stream}.", d, h, rng)
        ps.add(bp + "qgain", np.ones(d))
        ps.add(bp + "kgain", np.ones(d))
        ps.add(bp + "pgate", np.ones(1))
        _zero_bundle_outputs(ps, f"{bp}P.")
    for bi in range(cfg.n_phase2):
        bp = f"{p}p2b{bi}."
        for stream in ("CA", "P"):
            _bundle(ps, f"{bp}{stream}.", d, h, rng)
        ps.add(bp + "qgain", np.ones(d))
        ps.add(bp + "kgain", np.ones(d))
        ps.add(bp + "pgate", np.ones(1))
        _zero_bundle_outputs(ps, f"{bp}P.")
    ps.add(p + "final_gain_A", np.ones(d))
    ps.add(p + "final_gain_P", np.ones(d))

    names = registry.names() + [AGNOSTIC]
    for name in names:
        emb = registry.agnostic() if name == AGNOSTIC else registry[name]
        hp = f"{p}head.{name}."
        ps.add(hp + "s_in", T.normal_init(rng, (emb.state_dim, d), emb.state_dim ** -0.5))
        ps.add(hp + "s_in_b", np.zeros(d))
        ps.add(hp + "a_in", T.normal_init(rng, (emb.action_dim, d), emb.action_dim ** -0.5))
        ps.add(hp + "a_in_b", np.zeros(d))
        ps.add(hp + "a_out", np.zeros((d, emb.action_dim)))
        ps.add(hp + "a_out_b", np.zeros(emb.action_dim))
        if emb.has_physics or name == AGNOSTIC and registry.max_physics > 0:
            pd = emb.physics_dim
            ps.add(hp + "p_in", T.normal_init(rng, (pd, d), pd ** -0.5))
            ps.add(hp + "p_in_b", np.zeros(d))
            ps.add(hp + "pf_in", T.normal_init(rng, (pd, d), pd ** -0.5))
            ps.add(hp + "pf_in_b", np.zeros(d))
            ps.add(hp + "p_out", np.zeros((d, pd)))
            ps.add(hp + "p_out_b", np.zeros(pd))


def add_advantage_params(ps: ParamStore, cfg: MsatConfig, prefix: str = "msat.") -> None:
    """Two-row embedding selected by the advantage indicator bit."""
    if prefix + "adv_emb" not in ps:
        ps.add(prefix + "adv_emb", np.zeros((2, cfg.d_model)))


def physics_param_names(ps: ParamStore, prefix: str = "msat.") -> list[str]:
    """Parameters that exist purely for the physics stream."""
    keys = []
    for name in ps.names():
        if not name.startswith(prefix):
            continue
        tail = name[len(prefix):]
        if (".P." in tail or tail.endswith("pgate") or tail == "p_pos"
                or tail == "final_gain_P"
                or tail.split(".")[-1] in ("p_in", "p_in_b", "pf_in", "pf_in_b",
                                           "p_out", "p_out_b")):
            keys.append(name)
    return keys


def _zero_pad(x: Tensor, target: int) -> Tensor:
    width = x.shape[-1]
    if width == target:
        return x
    pad = Tensor(np.zeros(x.shape[:-1] + (target - width,)))
    return T.concat([x, pad], axis=-1)


def _row_tokens(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Project a [B, dim] vector into a single [B, 1, d] token."""
    out = T.add(T.matmul(T.reshape(x, (x.shape[0], 1, x.shape[-1])), w), b)
    return out


def timestep_token(ps: ParamStore, cfg: MsatConfig, tau, batch: int,
                   prefix: str = "msat.") -> Tensor:
    """MLP over the sinusoidal embedding of the denoising time."""
    tv = np.asarray(tau, dtype=np.float64).reshape(-1)
    if tv.size == 1 and batch > 1:
        tv = np.full(batch, tv[0])
    emb = T.sinusoidal_embed(Tensor(tv), cfg.d_model)
    hdn = T.swiglu(T.add(T.matmul(emb, ps[prefix + "tau_w1"]), ps[prefix + "tau_b1"]))
    tok = T.add(T.matmul(hdn, ps[prefix + "tau_w2"]), ps[prefix + "tau_b2"])
    return T.reshape(tok, (batch, 1, cfg.d_model))


def project_inputs(ps: ParamStore, cfg: MsatConfig, registry: EmbodimentRegistry,
                   embodiment: str, h_feat: Tensor, m_feat: Tensor, s: Tensor,
                   a_noisy: Tensor, tau, p_now: Tensor | None = None,
                   p_noisy: Tensor | None = None,
                   p_present: np.ndarray | None = None,
                   adv_bits: np.ndarray | None = None,
                   prefix: str = "msat.") -> StreamSet:
    """Assemble the stream set for one embodiment (or the agnostic head)."""
    emb = registry.agnostic() if embodiment == AGNOSTIC else registry[embodiment]
    hp = f"{prefix}head.{embodiment}."
    b = h_feat.shape[0]

    c_h = T.add(T.matmul(h_feat, ps[prefix + "proj_h"]), ps[prefix + "proj_h_b"])
    c_m = T.add(T.matmul(m_feat, ps[prefix + "proj_m"]), ps[prefix + "proj_m_b"])
    c = T.concat([c_h, c_m], axis=-2)

    a_parts = [timestep_token(ps, cfg, tau, b, prefix)]
    if cfg.adv_token:
        if adv_bits is None:
            raise NumericsError("advantage conditioning enabled but bits missing")
        onehot = np.zeros((b, 1, 2))
        onehot[np.arange(b), 0, np.asarray(adv_bits, dtype=np.int64)] = 1.0
        a_parts.append(T.matmul(Tensor(onehot), ps[prefix + "adv_emb"]))
    a_parts.append(_row_tokens(_zero_pad(s, emb.state_dim), ps[hp + "s_in"],
                               ps[hp + "s_in_b"]))
    a_parts.append(T.add(T.matmul(_zero_pad(a_noisy, emb.action_dim),
                                  ps[hp + "a_in"]), ps[hp + "a_in_b"]))
    a = T.concat(a_parts, axis=-2)

    p = None
    if p_now is not None:
        if not emb.has_physics:
            raise NumericsError(f"embodiment {emb.name} carries no physics")
        head_now = _row_tokens(_zero_pad(p_now, emb.physics_dim), ps[hp + "p_in"],
                               ps[hp + "p_in_b"])
        fut = T.add(T.matmul(_zero_pad(p_noisy, emb.physics_dim), ps[hp + "pf_in"]),
                    ps[hp + "pf_in_b"])
        p = T.add(T.concat([head_now, fut], axis=-2), ps[prefix + "p_pos"])
    return StreamSet(c=c, a=a, p=p, p_present=p_present)


def _rope_positions(cfg: MsatConfig, n_c: int, n_a: int, n_p: int) -> list[int]:
    return [0] * n_c + list(range(n_a)) + [0] * n_p


def joint_log_mask(ps: ParamStore, block_prefix: str, n_ca: int, n_p: int,
                   p_present: np.ndarray | None, batch: int) -> Tensor:
    """Additive attention mask for one block.

    Zeros everywhere, except C/A -> P cells which carry the learned gate
    (-GATE_SCALE * pgate); per-sample dropped physics isolates P fully.
    """
    n = n_ca + n_p
    if n_p == 0:
        return Tensor(np.zeros((n, n)))
    sel = np.zeros((n, n))
    sel[:n_ca, n_ca:] = 1.0
    base = np.zeros((batch, n, n))
    selector = np.tile(sel, (batch, 1, 1))
    if p_present is not None:
        dropped = ~np.asarray(p_present, dtype=bool)
        base[dropped, :n_ca, n_ca:] = NEG_INF
        base[dropped, n_ca:, :n_ca] = NEG_INF
        selector[dropped] = 0.0
    gate = T.mul(Tensor(selector), T.scale(ps[block_prefix + "pgate"], -GATE_SCALE))
    return T.add(Tensor(base), gate)


def multi_stream_block(ps: ParamStore, cfg: MsatConfig, block_prefix: str,
                       stream_names: list[str], xs: list[Tensor],
                       rope_positions: list[int], mask: Tensor) -> list[Tensor]:
    """One joint-attention block over per-stream parameter bundles."""
    d = cfg.d_model
    qs, ks, vs = [], [], []
    for name, x in zip(stream_names, xs):
        sp = f"{block_prefix}{name}."
        normed = T.rmsnorm(x, ps[sp + "gain1"], cfg.eps)
        qkv = T.matmul(normed, ps[sp + "qkv"])
        qs.append(T.slice_axis(qkv, 0, d, axis=-1))
        ks.append(T.slice_axis(qkv, d, 2 * d, axis=-1))
        vs.append(T.slice_axis(qkv, 2 * d, 3 * d, axis=-1))
    q = qs[0] if len(qs) == 1 else T.concat(qs, axis=-2)
    k = ks[0] if len(ks) == 1 else T.concat(ks, axis=-2)
    v = vs[0] if len(vs) == 1 else T.concat(vs, axis=-2)
    q = T.rope(T.rmsnorm(q, ps[block_prefix + "qgain"], cfg.eps), rope_positions,
               cfg.rope_base)
    k = T.rope(T.rmsnorm(k, ps[block_prefix + "kgain"], cfg.eps), rope_positions,
               cfg.rope_base)
    att = T.mha(q, k, v, mask, cfg.n_heads)

    outs, start = [], 0
    for name, x in zip(stream_names, xs):
        sp = f"{block_prefix}{name}."
        n_tok = x.shape[-2]
        seg = T.slice_axis(att, start, start + n_tok, axis=-2)
        start += n_tok
        h = T.add(x, T.matmul(seg, ps[sp + "out"]))
        f = T.rmsnorm(h, ps[sp + "gain2"], cfg.eps)
        f = T.matmul(T.swiglu(T.matmul(f, ps[sp + "ffn1"])), ps[sp + "ffn2"])
        outs.append(T.add(h, f))
    return outs


def merge_streams(c: Tensor, a: Tensor) -> tuple[Tensor, dict]:
    """[C tokens, A tokens] in one sequence plus a segment map for re-splits."""
    merged = T.concat([c, a], axis=-2)
    seg = {"c": (0, c.shape[-2]), "a": (c.shape[-2], c.shape[-2] + a.shape[-2])}
    return merged, seg


def split_streams(ca: Tensor, seg: dict) -> tuple[Tensor, Tensor]:
    (c0, c1), (a0, a1) = seg["c"], seg["a"]
    return T.slice_axis(ca, c0, c1, axis=-2), T.slice_axis(ca, a0, a1, axis=-2)


def msat_forward(ps: ParamStore, cfg: MsatConfig, registry: EmbodimentRegistry,
                 embodiment: str, h_feat: Tensor, m_feat: Tensor, s: Tensor,
                 a_noisy: Tensor, tau, p_now: Tensor | None = None,
                 p_noisy: Tensor | None = None, p_present: np.ndarray | None = None,
                 adv_bits: np.ndarray | None = None, prefix: str = "msat."
                 ) -> tuple[Tensor, Tensor | None]:
    """Full velocity-field forward; returns (v_action, v_physics|None)."""
    emb = registry.agnostic() if embodiment == AGNOSTIC else registry[embodiment]
    streams = project_inputs(ps, cfg, registry, embodiment, h_feat, m_feat, s,
                             a_noisy, tau, p_now, p_noisy, p_present, adv_bits,
                             prefix)
    n_c, n_a = streams.c.shape[-2], streams.a.shape[-2]
    n_p = streams.p.shape[-2] if streams.has_p else 0
    batch = streams.c.shape[0]
    pos = _rope_positions(cfg, n_c, n_a, n_p)

    c, a, p = streams.c, streams.a, streams.p
    for bi in range(cfg.n_phase1):
        bp = f"{prefix}p1b{bi}."
        mask = joint_log_mask(ps, bp, n_c + n_a, n_p, streams.p_present, batch)
        if streams.has_p:
            c, a, p = multi_stream_block(ps, cfg, bp, ["C", "A", "P"], [c, a, p],
                                         pos, mask)
        else:
            c, a = multi_stream_block(ps, cfg, bp, ["C", "A"], [c, a], pos, mask)

    ca, seg = merge_streams(c, a)
    for bi in range(cfg.n_phase2):
        bp = f"{prefix}p2b{bi}."
        mask = joint_log_mask(ps, bp, n_c + n_a, n_p, streams.p_present, batch)
        if streams.has_p:
            ca, p = multi_stream_block(ps, cfg, bp, ["CA", "P"], [ca, p], pos, mask)
        else:
            (ca,) = multi_stream_block(ps, cfg, bp, ["CA"], [ca], pos, mask)

    _, a = split_streams(ca, seg)
    hp = f"{prefix}head.{embodiment}."
    act = T.slice_axis(a, n_a - cfg.chunk, n_a, axis=-2)
    act = T.rmsnorm(act, ps[prefix + "final_gain_A"], cfg.eps)
    v_action = T.add(T.matmul(act, ps[hp + "a_out"]), ps[hp + "a_out_b"])
    v_physics = None
    if streams.has_p:
        fut = T.slice_axis(p, 1, n_p, axis=-2)
        fut = T.rmsnorm(fut, ps[prefix + "final_gain_P"], cfg.eps)
        v_physics = T.add(T.matmul(fut, ps[hp + "p_out"]), ps[hp + "p_out_b"])
    return v_action, v_physics
