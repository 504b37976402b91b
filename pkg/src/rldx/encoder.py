"""Observation encoder: the trainable stand-in for a vision-language backbone.

Multi-frame observations are patch-embedded, an instruction id and a block
of learnable query tokens are appended, and the sequence runs through
causal pre-RMSNorm transformer blocks. Two mid-stack hooks provide the
extra functionality:

* motion injection -- a space-time self-similarity tensor (cosine
  similarities between each frame/position feature and its spatial
  neighborhood in every frame) encoded by a zero-initialized 2-layer MLP
  and added residually, and
* past-frame compression -- all past-frame tokens are mean-pooled into a
  single context token, shrinking the sequence for the remaining layers.

The activations of the query tokens at the extraction depth are the
cognition feature handed to the action model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericsError, ParamStore, Tensor


@dataclass
class ObservationWindow:
    """K+1 stacked frames, oldest first, with their temporal offsets."""

    frames: np.ndarray                     # [K+1, C, H, W] float32
    offsets: tuple = (-6, -4, -2, 0)

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise NumericsError("window frames must be [K+1, C, H, W]")
        if len(self.offsets) != self.frames.shape[0]:
            raise NumericsError("one offset per frame required")
        if list(self.offsets) != sorted(set(self.offsets)) or self.offsets[-1] != 0:
            raise NumericsError("offsets must strictly increase and end at 0")


@dataclass
class EncoderConfig:
    d: int = 48
    n_layers: int = 4
    n_heads: int = 4
    n_q: int = 8
    n_frames: int = 4                      # K+1
    offsets: tuple = (-6, -4, -2, 0)
    frame_shape: tuple = (3, 1, 24)        # (C, H, W)
    patch_w: int = 4
    stss_layer_index: int = 1              # motion hook after this (1-based) layer
    stss_radius: int = 1
    stss_hidden: int = 16
    compress_layer_index: int = 2          # compression hook after this layer
    extract_layer_index: int = 0           # 0 -> after the last layer
    n_instructions: int = 4
    ffn_mult: int = 2
    eps: float = 1e-6

    def __post_init__(self):
        if self.extract_layer_index == 0:
            self.extract_layer_index = self.n_layers
        c, h, w = self.frame_shape
        if w % self.patch_w != 0:
            raise NumericsError(f"frame width {w} not divisible by patch {self.patch_w}")
        if not (1 <= self.stss_layer_index < self.n_layers):
            raise NumericsError("stss hook must sit strictly inside the stack")
        if not (self.stss_layer_index < self.compress_layer_index <= self.n_layers):
            raise NumericsError("compression must come after the motion hook")
        if not (1 <= self.extract_layer_index <= self.n_layers):
            raise NumericsError("extraction depth out of range")

    @property
    def patches_per_frame(self) -> int:
        c, h, w = self.frame_shape
        return h * (w // self.patch_w)

    @property
    def patch_dim(self) -> int:
        c, h, w = self.frame_shape
        return c * self.patch_w

    @property
    def stss_dim(self) -> int:
        return self.n_frames * (2 * self.stss_radius + 1)


def init_patch_params(ps: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                      prefix: str = "enc.", key: str = "") -> None:
    """Patch projection + positional table; one set per observation geometry."""
    d = cfg.d
    kp = f"{prefix}{key}." if key else prefix
    ps.add(kp + "patch_w", T.normal_init(rng, (cfg.patch_dim, d), cfg.patch_dim ** -0.5))
    ps.add(kp + "patch_b", np.zeros(d))
    ps.add(kp + "pos", T.normal_init(rng, (cfg.n_frames * cfg.patches_per_frame, d), 0.02))


def init_trunk_params(ps: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                      prefix: str = "enc.") -> None:
    """Shared transformer stack, instruction table, queries, motion MLP."""
    d, p = cfg.d, prefix
    ps.add(p + "instr", T.normal_init(rng, (cfg.n_instructions, d), 0.02))
    ps.add(p + "query", T.normal_init(rng, (cfg.n_q, d), 0.02))
    h = cfg.ffn_mult * d
    for li in range(cfg.n_layers):
        lp = f"{p}l{li}."
        ps.add(lp + "gain1", np.ones(d))
        ps.add(lp + "qkv", T.normal_init(rng, (d, 3 * d), d ** -0.5))
        ps.add(lp + "out", T.normal_init(rng, (d, d), 0.5 * d ** -0.5))
        ps.add(lp + "gain2", np.ones(d))
        ps.add(lp + "ffn1", T.normal_init(rng, (d, 2 * h), d ** -0.5))
        ps.add(lp + "ffn2", T.normal_init(rng, (h, d), 0.5 * h ** -0.5))
    ps.add(p + "stss_w1", T.normal_init(rng, (cfg.stss_dim, 2 * cfg.stss_hidden),
                                        cfg.stss_dim ** -0.5))
    ps.add(p + "stss_b1", np.zeros(2 * cfg.stss_hidden))
    ps.add(p + "stss_w2", np.zeros((cfg.stss_hidden, d)))  # zero: identity at init
    ps.add(p + "stss_b2", np.zeros(d))


def init_params(ps: ParamStore, cfg: EncoderConfig, rng: np.random.Generator,
                prefix: str = "enc.") -> None:
    init_patch_params(ps, cfg, rng, prefix)
    init_trunk_params(ps, cfg, rng, prefix)


def patchify(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """[..., F, C, H, W] -> [..., F*P, C*patch_w] raw patch matrix (no grads)."""
    f = np.asarray(frames, dtype=np.float64)
    lead = f.shape[:-4]
    nf, c, h, w = f.shape[-4:]
    pw = cfg.patch_w
    # (F, C, H, W) -> (F, H, W/pw, C, pw): patches in scan order per frame
    f = f.reshape(lead + (nf, c, h, w // pw, pw))
    f = np.moveaxis(f, -4, -2)  # (..., F, H, W/pw, C, pw)
    return f.reshape(lead + (nf * h * (w // pw), c * pw))


def _expand_rows(x: Tensor, batch: int) -> Tensor:
    """Broadcast a [n, d] parameter block to [batch, n, d]."""
    return T.add(Tensor(np.zeros((batch,) + x.shape)), x)


def _causal_mask(n: int) -> Tensor:
    return T.log_mask(np.tril(np.ones((n, n), dtype=bool)))


def _block(h: Tensor, ps: ParamStore, lp: str, mask: Tensor, cfg: EncoderConfig) -> Tensor:
    d = cfg.d
    a = T.rmsnorm(h, ps[lp + "gain1"], cfg.eps)
    qkv = T.matmul(a, ps[lp + "qkv"])
    q = T.slice_axis(qkv, 0, d, axis=-1)
    k = T.slice_axis(qkv, d, 2 * d, axis=-1)
    v = T.slice_axis(qkv, 2 * d, 3 * d, axis=-1)
    att = T.mha(q, k, v, mask, cfg.n_heads)
    h = T.add(h, T.matmul(att, ps[lp + "out"]))
    f = T.rmsnorm(h, ps[lp + "gain2"], cfg.eps)
    f = T.matmul(T.swiglu(T.matmul(f, ps[lp + "ffn1"])), ps[lp + "ffn2"])
    return T.add(h, f)


def stss(features: Tensor, cfg: EncoderConfig) -> Tensor:
    """Space-time self-similarity of [..., F, P, d] features.

    Entry [f, p, f'*(2U+1)+u] is the cosine similarity between feature
    (f, p) and feature (f', p+u-U); out-of-range neighbors and zero-norm
    vectors contribute 0.
    """
    nf, np_, d = features.shape[-3:]
    u = cfg.stss_radius
    unit = T.rmsnorm(features, Tensor(np.full(d, d ** -0.5)), eps=1e-24)
    ones = Tensor(np.ones((d, 1)))
    cols = []
    for f2 in range(nf):
        row = T.slice_axis(unit, f2, f2 + 1, axis=-3)
        for shift in range(-u, u + 1):
            if shift > 0:
                body = T.slice_axis(row, shift, np_, axis=-2)
                pad = Tensor(np.zeros(body.shape[:-2] + (shift, d)))
                nb = T.concat([body, pad], axis=-2)
            elif shift < 0:
                body = T.slice_axis(row, 0, np_ + shift, axis=-2)
                pad = Tensor(np.zeros(body.shape[:-2] + (-shift, d)))
                nb = T.concat([pad, body], axis=-2)
            else:
                nb = row
            cols.append(T.matmul(T.mul(unit, nb), ones))
    return T.concat(cols, axis=-1)


def motion_inject(features: Tensor, ps: ParamStore, cfg: EncoderConfig,
                  prefix: str = "enc.", drop_mask: Tensor | None = None) -> Tensor:
    """features + MLP(stss(features)); exact identity at init (zero final layer)."""
    sim = stss(features, cfg)
    hidden = T.swiglu(T.add(T.matmul(sim, ps[prefix + "stss_w1"]), ps[prefix + "stss_b1"]))
    delta = T.add(T.matmul(hidden, ps[prefix + "stss_w2"]), ps[prefix + "stss_b2"])
    if drop_mask is not None:
        delta = T.mul(delta, drop_mask)
    return T.add(features, delta)


def compress_past(hidden: Tensor, n_past: int) -> Tensor:
    """Replace the leading n_past tokens by their mean, placed first."""
    if n_past == 0:
        return hidden
    past = T.slice_axis(hidden, 0, n_past, axis=-2)
    pool = Tensor(np.full((1, n_past), 1.0 / n_past))
    ctx = T.matmul(pool, past)
    rest = T.slice_axis(hidden, n_past, hidden.shape[-2], axis=-2)
    return T.concat([ctx, rest], axis=-2)


def encode_batch(ps: ParamStore, cfg: EncoderConfig, patches: Tensor,
                 instr_onehot: Tensor, n_frames: int, motion: bool = True,
                 motion_drop: Tensor | None = None, prefix: str = "enc.",
                 patch_key: str = "") -> Tensor:
    """Core batched forward: [B, F*P, patch_dim] patches -> [B, n_q, d].

    `patches` may carry fewer frames than the config (single-frame
    ablations); the current frame always aligns with the last positional
    slot. Shapes are static per call, which keeps the pass capturable.
    `patch_key` selects which patch front-end to use when several
    observation geometries share the trunk.
    """
    b = patches.shape[0]
    kp = f"{prefix}{patch_key}." if patch_key else prefix
    p_per = cfg.patches_per_frame
    n_tok = n_frames * p_per
    tok = T.add(T.matmul(patches, ps[kp + "patch_w"]), ps[kp + "patch_b"])
    pos = ps[kp + "pos"]
    full = cfg.n_frames * p_per
    if n_tok != full:
        pos = T.slice_axis(pos, full - n_tok, full, axis=-2)
    tok = T.add(tok, pos)
    instr_tok = T.matmul(instr_onehot, ps[prefix + "instr"])
    queries = _expand_rows(ps[prefix + "query"], b)
    h = T.concat([tok, instr_tok, queries], axis=-2)
    mask = _causal_mask(h.shape[-2])

    compressed = False
    for li in range(cfg.n_layers):
        h = _block(h, ps, f"{prefix}l{li}.", mask, cfg)
        layer = li + 1
        if layer == cfg.stss_layer_index and motion and not compressed:
            seg = T.slice_axis(h, 0, n_tok, axis=-2)
            seg = T.reshape(seg, (b, n_frames, p_per, cfg.d))
            seg = motion_inject(seg, ps, cfg, prefix, motion_drop)
            seg = T.reshape(seg, (b, n_tok, cfg.d))
            h = T.concat([seg, T.slice_axis(h, n_tok, h.shape[-2], axis=-2)], axis=-2)
        if layer == cfg.compress_layer_index and n_frames > 1 and not compressed:
            h = compress_past(h, (n_frames - 1) * p_per)
            mask = _causal_mask(h.shape[-2])
            compressed = True
        if layer == cfg.extract_layer_index:
            break
    return T.slice_axis(h, h.shape[-2] - cfg.n_q, h.shape[-2], axis=-2)


def instruction_onehot(ids, n_instructions: int, batched: bool = True) -> Tensor:
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if np.any(ids >= n_instructions) or np.any(ids < 0):
        raise NumericsError("instruction id outside the embedding table")
    oh = np.zeros((ids.size, 1, n_instructions))
    oh[np.arange(ids.size), 0, ids] = 1.0
    return Tensor(oh if batched else oh[0])


def encode(ps: ParamStore, cfg: EncoderConfig, obs: ObservationWindow, instr_id: int,
           motion: bool = True, prefix: str = "enc.") -> Tensor:
    """Single-window convenience wrapper; returns the [n_q, d] cognition feature."""
    patches = Tensor(patchify(obs.frames, cfg)[None])
    oh = instruction_onehot([instr_id], cfg.n_instructions)
    out = encode_batch(ps, cfg, patches, oh, obs.frames.shape[0], motion, prefix=prefix)
    return T.reshape(out, out.shape[1:])


def window_from_history(history: list[np.ndarray], offsets) -> ObservationWindow:
    """Assemble a window from per-step frames, repeating the first frame
    for offsets that reach before the episode start."""
    t = len(history) - 1
    frames = np.stack([history[max(0, t + off)] for off in offsets])
    return ObservationWindow(frames=frames, offsets=tuple(offsets))
