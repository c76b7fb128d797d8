import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unimm import backbone as bb
from unimm import numerics as nx
from unimm import unirep
from unimm.harness.gradcheck import MICRO_CODEC, micro_config
from unimm.latents import CodecConfig, MediaSample, encode
from unimm.optim import AdamW


def wide_config():
    return replace(micro_config(), max_visual_tokens=128)


@pytest.fixture(scope="module")
def ps():
    return bb.init_params(wide_config(), 0)


def lat(rng, t=1, h=4, w=4, c=12):
    return rng.standard_normal((t, h, w, c))


def test_semantic_token_counts(ps):
    rng = np.random.default_rng(0)
    assert unirep.semantic_features(ps, ps.config, lat(rng)).shape == (1, 4, 8)
    assert unirep.semantic_features(ps, ps.config, lat(rng, t=5, h=8, w=8)).shape == (1, 80, 8)


def test_semantic_729_tokens():
    cfg = bb.ModelConfig(model_dim=16, n_layers=1, n_heads=2, latent_patch_dim=4 * 8, semantic_dim=8,
                         semantic_layers=1, semantic_heads=2, lowlevel_dim=8, flow_head_dim=16,
                         flow_head_heads=2, flow_head_layers=1, max_visual_tokens=729, time_freq_dim=8)
    p = bb.init_params(cfg, 0)
    out = unirep.semantic_features(p, cfg, np.zeros((1, 54, 54, 8)))
    assert out.shape == (1, 729, 8)


def test_too_many_visual_tokens(ps):
    with pytest.raises(ValueError):
        unirep.semantic_features(ps, ps.config, np.zeros((1, 24, 24, 12)))


def test_projector_linearity(ps):
    assert np.all(ps["projector.patch.b"].data == 0)
    np.testing.assert_array_equal(unirep.project(ps, np.zeros((1, 4, 4, 12))).data, 0.0)
    x = lat(np.random.default_rng(1))
    np.testing.assert_allclose(unirep.project(ps, 2 * x).data, 2 * unirep.project(ps, x).data, rtol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3))
def test_paths_agree_on_token_count(t, h, w):
    p = bb.init_params(wide_config(), 0)
    x = np.zeros((t, 2 * h, 2 * w, 12))
    assert unirep.semantic_features(p, p.config, x).shape[:2] == unirep.project(p, x).shape[:2]


def test_fuse_shapes(ps):
    rng = np.random.default_rng(2)
    out = unirep.fuse(ps, rng.standard_normal((3, 5, 8)), rng.standard_normal((3, 5, 8)))
    assert out.shape == (3, 5, 16)
    assert unirep.fuse(ps, np.zeros((0, 8)), np.zeros((0, 8))).shape == (0, 16)
    with pytest.raises(nx.ShapeError):
        unirep.fuse(ps, np.zeros((2, 8)), np.zeros((3, 8)))


def test_fuse_gradient():
    p = bb.init_params(micro_config(), 3)
    rng = np.random.default_rng(3)
    x = lat(rng)
    params = p.group("semantic") + p.group("projector") + p.group("fusion")

    def f():
        return nx.mean(unirep.fuse(p, unirep.semantic_features(p, p.config, x), unirep.project(p, x)))
    assert nx.finite_diff_check(f, params, eps=1e-6, max_entries=16) < 1e-4


def test_time_token(ps):
    rng = np.random.default_rng(4)
    u = rng.standard_normal((4, 16))
    out = unirep.prepend_time_token(ps, ps.config, u, 1.0)
    assert out.shape == (1, 5, 16)
    again = unirep.prepend_time_token(ps, ps.config, rng.standard_normal((4, 16)), 1.0)
    np.testing.assert_array_equal(out.data[0, 0], again.data[0, 0])
    other = unirep.prepend_time_token(ps, ps.config, u, 0.5)
    assert not np.array_equal(out.data[0, 0], other.data[0, 0])
    with pytest.raises(ValueError):
        unirep.prepend_time_token(ps, ps.config, u, 1.5)


def test_unified_shape(ps):
    out = unirep.unified(ps, ps.config, np.zeros((3, 1, 4, 4, 12)), np.array([0.1, 0.5, 1.0]))
    assert out.shape == (3, 5, 16)


def test_distill_loss_values():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 4))
    assert float(unirep.distill_loss(a, a).data) == pytest.approx(0.0, abs=1e-12)
    e = np.eye(4)
    assert float(unirep.distill_loss(e[:2], e[2:]).data) == pytest.approx(-math.log(1e-4), rel=1e-12)
    assert -math.log(1e-4) == pytest.approx(9.2103, abs=1e-4)
    with pytest.raises(nx.ShapeError):
        unirep.distill_loss(np.zeros((0, 3)), np.zeros((0, 3)))


def test_teacher_geometry_and_frozen():
    codec = CodecConfig(8, 4)
    teacher = unirep.TeacherNet(codec, 8)
    vid = MediaSample("video", np.random.default_rng(6).random((5, 32, 32, 3)))
    assert teacher(vid).shape == (encode(vid, codec).n_tokens, 8)
    with pytest.raises(ValueError):
        teacher.filters[0, 0, 0, 0] = 1.0


def test_distill_step_keeps_teacher_and_other_groups():
    codec = MICRO_CODEC
    p = bb.init_params(micro_config(), 7)
    teacher = unirep.TeacherNet(codec, 8)
    fp = teacher.fingerprint()
    before = {q.name: q.data.copy() for q in p if q.group != "semantic"}
    rng = np.random.default_rng(7)
    px = rng.random((4, 1, 8, 8, 3))
    opt = AdamW(lr=1e-2)
    losses = [unirep.distill_step(p, p.config, codec, teacher, px, opt, rng, noise_prob=0.0) for _ in range(100)]
    assert teacher.fingerprint() == fp
    assert losses[-1] < losses[0]
    for q in p:
        if q.group != "semantic":
            np.testing.assert_array_equal(q.data, before[q.name])


def test_distill_step_clean_when_noise_prob_zero():
    codec = MICRO_CODEC
    p = bb.init_params(micro_config(), 8)
    teacher = unirep.TeacherNet(codec, 8)
    px = np.random.default_rng(8).random((2, 1, 8, 8, 3))
    lats = np.stack([encode(MediaSample("image", x), codec).grid for x in px])
    seen = []
    orig = unirep.semantic_features

    def spy(ps_, cfg, x):
        seen.append(np.array(x))
        return orig(ps_, cfg, x)
    unirep.semantic_features = spy
    try:
        unirep.distill_step(p, p.config, codec, teacher, px, AdamW(lr=0.0), np.random.default_rng(0), 0.0)
    finally:
        unirep.semantic_features = orig
    np.testing.assert_array_equal(seen[0], lats)
    with pytest.raises(ValueError):
        unirep.distill_step(p, p.config, codec, teacher, px, AdamW(lr=0.0), np.random.default_rng(0), 1.5)
