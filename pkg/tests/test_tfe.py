import numpy as np
import pytest

from conftest import random_weights, scalar_forward
from tfempc.tfe import (
    DegenerateReferenceError,
    ShapeError,
    TfeConfig,
    attention,
    bfr,
    embed,
    forward,
    load_weights,
    output,
    save_weights,
    softmax_rows,
)


def _case(seed=0, w=2, p=3, d_k=2):
    cfg = TfeConfig(w, p, d_k)
    rng = np.random.default_rng(seed)
    wt = random_weights(cfg, seed + 1)
    x_p = rng.normal(size=(w, 2))
    u = rng.normal(size=p)
    return cfg, wt, x_p, u


def test_embed_zero_future_inputs_zero_bias():
    cfg, wt, x_p, _ = _case()
    wt.b_em2 = np.zeros_like(wt.b_em2)
    z1 = embed(x_p, np.zeros(cfg.p), wt, cfg)
    assert np.all(z1[cfg.w:] == 0.0)


def test_embed_linear_in_future_inputs():
    cfg, wt, x_p, u = _case()
    wt.b_em2 = np.zeros_like(wt.b_em2)
    z_once = embed(x_p, u, wt, cfg)[cfg.w:]
    z_twice = embed(x_p, 2 * u, wt, cfg)[cfg.w:]
    assert np.allclose(z_twice, 2 * z_once)


def test_embed_matches_scalar_expansion():
    cfg, wt, x_p, u = _case(seed=5)
    z1 = embed(x_p, u, wt, cfg)
    for i in range(cfg.w):
        for d in range(cfg.d_k):
            expect = wt.w_em1[d, 0] * x_p[i, 0] + wt.w_em1[d, 1] * x_p[i, 1] + wt.b_em1[d]
            assert z1[i, d] == pytest.approx(expect, abs=1e-12)
    for m in range(cfg.p):
        for d in range(cfg.d_k):
            assert z1[cfg.w + m, d] == pytest.approx(wt.w_em2[d, 0] * u[m] + wt.b_em2[d], abs=1e-12)


def test_embed_shape_mismatch():
    cfg, wt, x_p, u = _case()
    with pytest.raises(ShapeError):
        embed(x_p[:1], u, wt, cfg)
    with pytest.raises(ShapeError):
        embed(x_p, u[:-1], wt, cfg)


def test_attention_zero_scores_give_uniform_rows():
    cfg, wt, x_p, u = _case()
    wt.w_q = np.zeros_like(wt.w_q)
    wt.w_k = np.zeros_like(wt.w_k)
    wt.b_q = np.zeros_like(wt.b_q)
    wt.b_k = np.zeros_like(wt.b_k)
    z1 = embed(x_p, u, wt, cfg)
    p, r, z2 = attention(z1, wt, cfg)
    assert np.all(p == 0.0)
    assert np.allclose(r, 1.0 / cfg.L)


def test_attention_uniform_at_benchmark_length():
    cfg = TfeConfig(8, 20, 3)
    wt = random_weights(cfg, 3)
    wt.w_q = np.zeros_like(wt.w_q)
    wt.w_k = np.zeros_like(wt.w_k)
    wt.b_q = np.zeros_like(wt.b_q)
    wt.b_k = np.zeros_like(wt.b_k)
    rng = np.random.default_rng(0)
    z1 = embed(rng.normal(size=(8, 2)), rng.normal(size=20), wt, cfg)
    _, r, _ = attention(z1, wt, cfg)
    assert np.allclose(r, 1.0 / 28.0)
    assert r[0, 0] == pytest.approx(0.035714, abs=1e-6)


def test_attention_matches_two_pass_softmax_oracle():
    cfg, wt, x_p, u = _case(seed=11)
    z1 = embed(x_p, u, wt, cfg)
    p, r, z2 = attention(z1, wt, cfg)
    # naive two-pass oracle without the max shift
    for n in range(cfg.L):
        es = np.exp(p[n])
        assert np.allclose(r[n], es / es.sum(), atol=1e-12)
    assert np.allclose(z2, r @ (z1 @ wt.w_v.T + wt.b_v), atol=1e-14)


def test_output_zero_inner_gives_bias():
    cfg, wt, _, _ = _case()
    wt.b_l1 = np.zeros_like(wt.b_l1)
    z = np.zeros((cfg.L, cfg.d_k))
    assert np.allclose(output(z, z, wt), wt.b_l2)


def test_output_selector_reproduces_inner_map():
    cfg, wt, x_p, u = _case(seed=7)
    wt.w_l2 = np.hstack([np.zeros((cfg.p, cfg.w)), np.eye(cfg.p)])
    wt.b_l2 = np.zeros_like(wt.b_l2)
    z1 = embed(x_p, u, wt, cfg)
    _, _, z2 = attention(z1, wt, cfg)
    y = output(z1, z2, wt)
    inner = (z1 + z2) @ wt.w_l1[0] + wt.b_l1[0]
    assert np.allclose(y, inner[cfg.w:], atol=1e-14)


def test_output_matches_scalar_loop():
    cfg, wt, x_p, u = _case(seed=13)
    y, acts = forward(x_p, u, wt, cfg)
    y_ref, _, _ = scalar_forward(x_p, u, wt, cfg)
    assert np.allclose(y, y_ref, atol=1e-10)


def test_forward_equals_manual_composition():
    cfg, wt, x_p, u = _case(seed=17)
    y, acts = forward(x_p, u, wt, cfg)
    z1 = embed(x_p, u, wt, cfg)
    p, r, z2 = attention(z1, wt, cfg)
    assert np.array_equal(acts.z1, z1)
    assert np.allclose(acts.p, p, atol=0)
    assert np.allclose(y, output(z1, z2, wt), atol=0)


def test_forward_sensitive_to_inputs():
    cfg, wt, x_p, u = _case(seed=19)
    y0, _ = forward(x_p, u, wt, cfg)
    u2 = u.copy()
    u2[1] += 1e-4
    y1, _ = forward(x_p, u2, wt, cfg)
    assert np.max(np.abs(y1 - y0)) > 1e-9


def test_forward_repeatable():
    cfg, wt, x_p, u = _case(seed=23)
    y0, _ = forward(x_p, u, wt, cfg)
    y1, _ = forward(x_p, u, wt, cfg)
    assert np.array_equal(y0, y1)


def test_row_stochastic_and_positive():
    cfg, wt, x_p, u = _case(seed=29)
    _, acts = forward(x_p, u, wt, cfg)
    assert np.max(np.abs(acts.r.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(acts.r > 0.0) and np.all(acts.r < 1.0)
    assert np.allclose(acts.z2, acts.r @ acts.v, atol=0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(31)
    p = rng.normal(size=(6, 6))
    shifted = p + rng.normal(size=(6, 1))
    assert np.max(np.abs(softmax_rows(p) - softmax_rows(shifted))) < 1e-12


def test_output_affine_superposition():
    # Y is affine in (Z1 + Z2): exact superposition of increments
    cfg, wt, _, _ = _case(seed=37)
    rng = np.random.default_rng(2)
    za, zb = rng.normal(size=(2, cfg.L, cfg.d_k))
    zeros = np.zeros_like(za)
    y0 = output(zeros, zeros, wt)
    ya = output(za, zeros, wt)
    yb = output(zb, zeros, wt)
    yab = output(za + zb, zeros, wt)
    assert np.allclose(yab - y0, (ya - y0) + (yb - y0), atol=1e-10)


def test_full_forward_scalar_oracle_small_shapes():
    for seed, (w, p, d_k) in enumerate([(2, 3, 2), (3, 3, 3), (2, 4, 3), (4, 2, 2)]):
        cfg, wt, x_p, u = _case(seed=40 + seed, w=w, p=p, d_k=d_k)
        y, acts = forward(x_p, u, wt, cfg)
        y_ref, p_ref, r_ref = scalar_forward(x_p, u, wt, cfg)
        assert np.allclose(y, y_ref, atol=1e-10)
        assert np.allclose(acts.p, p_ref, atol=1e-10)
        assert np.allclose(acts.r, r_ref, atol=1e-10)


def test_bfr_perfect_and_mean_predictor():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert bfr(y, y) == 1.0
    assert bfr(np.full(4, y.mean()), y) == 0.0


def test_bfr_floors_at_zero():
    y = np.array([1.0, 2.0, 3.0])
    assert bfr(np.array([100.0, -50.0, 3.0]), y) == 0.0


def test_bfr_constant_reference_rejected():
    with pytest.raises(DegenerateReferenceError):
        bfr(np.zeros(3), np.full(3, 2.0))


def test_weights_roundtrip(tmp_path):
    cfg, wt, x_p, u = _case(seed=51)
    path = tmp_path / "weights.json"
    save_weights(path, wt, cfg)
    assert '"format": "tfe-v1"' in path.read_text()
    back, cfg2 = load_weights(path)
    assert cfg2 == cfg
    y0, _ = forward(x_p, u, wt, cfg)
    y1, _ = forward(x_p, u, back, cfg2)
    assert np.array_equal(y0, y1)


def test_weights_shape_mismatch_refused(tmp_path):
    import json

    cfg, wt, _, _ = _case()
    path = tmp_path / "weights.json"
    save_weights(path, wt, cfg)
    doc = json.loads(path.read_text())
    doc["arrays"]["w_q"] = [[1.0]]
    doc["shapes"]["w_q"] = [1, 1]
    path.write_text(json.dumps(doc))
    with pytest.raises(ShapeError):
        load_weights(path)


def test_weights_format_field_required(tmp_path):
    import json

    cfg, wt, _, _ = _case()
    path = tmp_path / "weights.json"
    save_weights(path, wt, cfg)
    doc = json.loads(path.read_text())
    doc["format"] = "tfe-v0"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_weights(path)
