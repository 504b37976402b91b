import numpy as np
import pytest

from rldx import encoder as E
from rldx import tensor as T
from rldx.encoder import (EncoderConfig, ObservationWindow, compress_past,
                          encode, encode_batch, init_params, instruction_onehot,
                          motion_inject, patchify, stss, window_from_history)
from rldx.tensor import ParamStore, Tensor, finite_diff_check


def tiny_cfg(**kw):
    base = dict(d=8, n_layers=2, n_heads=2, n_q=2, n_frames=2, offsets=(-2, 0),
                frame_shape=(2, 1, 4), patch_w=2, stss_layer_index=1,
                stss_radius=1, stss_hidden=4, compress_layer_index=2,
                n_instructions=2, ffn_mult=1)
    base.update(kw)
    return EncoderConfig(**base)


def make(cfg, seed=0):
    ps = ParamStore()
    init_params(ps, cfg, np.random.default_rng(seed))
    return ps


def rand_window(cfg, seed=0):
    r = np.random.default_rng(seed)
    return ObservationWindow(
        frames=r.normal(size=(cfg.n_frames,) + cfg.frame_shape).astype(np.float32),
        offsets=cfg.offsets)


def test_patchify_counts():
    cfg = tiny_cfg()
    obs = rand_window(cfg)
    mat = patchify(obs.frames, cfg)
    assert mat.shape == (cfg.n_frames * cfg.patches_per_frame, cfg.patch_dim)
    # 1 frame of 1x1x4 with patch width 1 -> 4 tokens
    cfg2 = EncoderConfig(d=8, n_layers=2, n_heads=2, n_frames=1, offsets=(0,),
                         frame_shape=(1, 1, 4), patch_w=1,
                         stss_layer_index=1, compress_layer_index=2)
    assert patchify(np.zeros((1, 1, 1, 4), np.float32), cfg2).shape == (4, 1)


def test_window_invariants():
    with pytest.raises(Exception):
        ObservationWindow(np.zeros((2, 1, 1, 4), np.float32), offsets=(0, -2))
    with pytest.raises(Exception):
        ObservationWindow(np.zeros((2, 1, 1, 4), np.float32), offsets=(-2,))


def test_encode_shape_and_determinism():
    cfg = tiny_cfg()
    ps = make(cfg)
    obs = rand_window(cfg)
    a = encode(ps, cfg, obs, 1)
    b = encode(ps, cfg, obs, 1)
    assert a.shape == (cfg.n_q, cfg.d)
    assert np.array_equal(a.data, b.data)


def test_stss_values():
    cfg = tiny_cfg()
    # all features the same nonzero vector -> in-range entries 1
    feats = Tensor(np.tile(np.array([1.0, 2.0, 0.5, -1.0, 0.3, 0.0, 1.1, 2.2]),
                           (2, 3, 1)))
    sim = stss(feats, cfg).data
    u = cfg.stss_radius
    for f in range(2):
        for p in range(3):
            for f2 in range(2):
                for du in range(2 * u + 1):
                    val = sim[f, p, f2 * (2 * u + 1) + du]
                    if 0 <= p + du - u < 3:
                        assert val == pytest.approx(1.0, abs=1e-9)
                    else:
                        assert val == 0.0

    # orthogonal neighbors -> entry 0; zero-norm feature row -> zeros
    d = 8
    feats = np.zeros((1, 3, d))
    feats[0, 0, 0] = 1.0
    feats[0, 1, 1] = 1.0
    sim = stss(Tensor(feats), tiny_cfg()).data
    assert sim[0, 0, 2] == pytest.approx(0.0, abs=1e-9)   # (f'=0, neighbor p=1)
    assert np.allclose(sim[0, 2, :], 0.0, atol=1e-9)      # zero-norm row


def test_motion_inject_identity_at_init():
    cfg = tiny_cfg()
    ps = make(cfg)
    feats = Tensor(np.random.default_rng(1).normal(size=(2, cfg.n_frames, 2, cfg.d)))
    out = motion_inject(feats, ps, cfg)
    assert np.array_equal(out.data, feats.data)
    assert out.shape == feats.shape


def test_motion_gradient_reaches_stss_params():
    cfg = tiny_cfg()
    ps = make(cfg)
    obs = rand_window(cfg, seed=3)
    loss = T.sum_squares(encode(ps, cfg, obs, 0))
    grads = T.backward(loss, ps)
    # zero final layer blocks w2's output but w2 itself still receives gradient
    assert np.any(grads["enc.stss_w2"] != 0.0)


def test_compress_past_values():
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = compress_past(Tensor(a), 2)
    assert np.allclose(out.data, [[2.0, 3.0], [5.0, 6.0]])
    one = compress_past(Tensor(a), 1)
    assert np.allclose(one.data, a)  # mean of one token is itself
    assert compress_past(Tensor(a), 0) is not None
    assert np.array_equal(compress_past(Tensor(a), 0).data, a)


def test_single_frame_reduces_to_plain_encoder():
    cfg = tiny_cfg()
    ps = make(cfg)
    frames = np.random.default_rng(2).normal(size=(1,) + cfg.frame_shape
                                             ).astype(np.float32)
    obs = ObservationWindow(frames, offsets=(0,))
    got = encode(ps, cfg, obs, 1, motion=False)

    # reference: plain pre-norm causal stack without the two hooks
    patches = Tensor(patchify(frames, cfg)[None])
    tok = T.add(T.matmul(patches, ps["enc.patch_w"]), ps["enc.patch_b"])
    full = cfg.n_frames * cfg.patches_per_frame
    pos = T.slice_axis(ps["enc.pos"], full - cfg.patches_per_frame, full, axis=-2)
    tok = T.add(tok, pos)
    itok = T.matmul(instruction_onehot([1], cfg.n_instructions), ps["enc.instr"])
    q = T.add(Tensor(np.zeros((1, cfg.n_q, cfg.d))), ps["enc.query"])
    h = T.concat([tok, itok, q], axis=-2)
    mask = T.log_mask(np.tril(np.ones((h.shape[-2],) * 2, dtype=bool)))
    for li in range(cfg.n_layers):
        h = E._block(h, ps, f"enc.l{li}.", mask, cfg)
    ref = T.slice_axis(h, h.shape[-2] - cfg.n_q, h.shape[-2], axis=-2)
    assert np.allclose(got.data, ref.data[0], atol=0, rtol=0)


def test_query_permutation_symmetry(monkeypatch):
    # with the last two queries given identical mask rows, swapping their
    # initialization rows swaps exactly those output rows
    cfg = tiny_cfg()
    ps = make(cfg)

    def sym_mask(n):
        m = np.tril(np.ones((n, n), dtype=bool))
        m[-2, -1] = True
        return T.log_mask(m)

    monkeypatch.setattr(E, "_causal_mask", sym_mask)
    obs = rand_window(cfg, seed=5)
    base = encode(ps, cfg, obs, 0).data.copy()
    qp = ps["enc.query"]
    qp.data[[cfg.n_q - 2, cfg.n_q - 1]] = qp.data[[cfg.n_q - 1, cfg.n_q - 2]]
    swapped = encode(ps, cfg, obs, 0).data
    assert np.allclose(swapped[-1], base[-2], atol=1e-12)
    assert np.allclose(swapped[-2], base[-1], atol=1e-12)


def test_past_frame_sensitivity():
    cfg = tiny_cfg()
    ps = make(cfg)
    obs = rand_window(cfg, seed=6)
    out1 = encode(ps, cfg, obs, 0).data
    frames2 = obs.frames.copy()
    frames2[0] += 1.0  # change only a past frame
    out2 = encode(ps, cfg, ObservationWindow(frames2, obs.offsets), 0).data
    assert not np.allclose(out1, out2)


def test_mask_lengths_before_and_after_compression():
    cfg = tiny_cfg()
    seen = []
    orig = E._causal_mask

    def spy(n):
        seen.append(n)
        return orig(n)

    E._causal_mask = spy
    try:
        encode(make(cfg), cfg, rand_window(cfg), 0)
    finally:
        E._causal_mask = orig
    p = cfg.patches_per_frame
    pre = cfg.n_frames * p + 1 + cfg.n_q
    post = 1 + p + 1 + cfg.n_q
    assert seen == [pre, post]


def test_encoder_gradient_check():
    cfg = tiny_cfg()
    ps = make(cfg)
    obs = rand_window(cfg, seed=7)
    patches = Tensor(patchify(obs.frames, cfg)[None])
    oh = instruction_onehot([0], cfg.n_instructions)

    def f():
        return T.gradcheck_loss(encode_batch(ps, cfg, patches, oh, cfg.n_frames))

    assert finite_diff_check(f, ps) <= 1e-4


def test_window_from_history_pads_with_first_frame():
    frames = [np.full((1, 1, 2), i, np.float32) for i in range(3)]
    win = window_from_history(frames, (-6, -4, -2, 0))
    assert np.array_equal(win.frames[:, 0, 0, 0], [0.0, 0.0, 0.0, 2.0])


def test_instruction_onehot_bounds():
    with pytest.raises(Exception):
        instruction_onehot([5], 4)
