import numpy as np
import pytest

from unimm import backbone as bb
from unimm import numerics as nx
from unimm.harness.gradcheck import micro_batch, micro_config
from unimm.latents import VisualLatent, patchify
from unimm.optim import AdamW
from unimm.sequence import VisualItem, collate, pack
from unimm.training import fm_loss, pack_batch, span_velocities, visual_inputs


@pytest.fixture(scope="module")
def ps():
    return bb.init_params(micro_config(), 0)


def jitter(p, seed=0, scale=0.05):
    rng = np.random.default_rng(seed)
    out = p.copy()
    for q in out:
        q.data += rng.standard_normal(q.shape) * scale
    return out


def test_config_validation():
    with pytest.raises(ValueError):
        bb.ModelConfig(model_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        bb.ModelConfig(n_layers=0)


def test_bos_only_forward(ps):
    lay, ids = pack([""], complete=False)
    h = bb.forward(ps, collate([lay], [ids]))
    assert h.shape == (1, 1, 16)


def test_context_overflow(ps):
    lay, ids = pack(["x" * 80])
    with pytest.raises(ValueError):
        bb.forward(ps, collate([lay], [ids]))


def test_future_perturbation_leaves_past_unchanged():
    p = jitter(bb.init_params(micro_config(), 1))
    rng = np.random.default_rng(1)
    items = ["ab", VisualItem(VisualLatent(rng.standard_normal((1, 4, 4, 12)))), "cd"]
    packed = pack_batch([items])
    rows, feats = visual_inputs(p, packed)
    h0 = bb.forward(p, packed.batch, rows, feats).data
    # zero out the last text token's input embedding
    batch = packed.batch
    ids = batch.ids.copy()
    ids[0, -2] = 0
    b2 = type(batch)(ids, batch.mask, batch.valid, batch.text_stream, batch.layouts)
    h1 = bb.forward(p, b2, rows, feats).data
    np.testing.assert_array_equal(h0[0, :-2], h1[0, :-2])
    assert not np.array_equal(h0[0, -2], h1[0, -2])


def test_visual_span_permutation_equivariance():
    p = jitter(bb.init_params(micro_config(), 2))
    rng = np.random.default_rng(2)
    items = ["ab", VisualItem(VisualLatent(rng.standard_normal((1, 4, 4, 12)))), "c"]
    packed = pack_batch([items])
    rows, feats = visual_inputs(p, packed)
    span = packed.spans[0][1]
    i, j = span.start + 1, span.start + 3
    pos = np.arange(packed.batch.ids.shape[1])
    pos[j] = pos[i]  # equal position ids for the swapped pair
    h0 = bb.forward(p, packed.batch, rows, feats, pos).data
    perm = np.arange(len(rows))
    a, b = list(rows).index(i), list(rows).index(j)
    perm[a], perm[b] = perm[b], perm[a]
    h1 = bb.forward(p, packed.batch, rows, nx.take_rows(feats, perm), pos).data
    np.testing.assert_allclose(h1[0, i], h0[0, j], atol=1e-12)
    np.testing.assert_allclose(h1[0, j], h0[0, i], atol=1e-12)
    others = [k for k in range(len(pos)) if k not in (i, j)]
    np.testing.assert_allclose(h1[0, others], h0[0, others], atol=1e-12)


def test_language_head(ps):
    z = bb.language_head(ps, np.zeros((2, 3, 16))).data
    assert z.shape == (2, 3, 263)
    np.testing.assert_array_equal(z, 0.0)
    h = np.random.default_rng(3).standard_normal((1, 4, 16))
    np.testing.assert_allclose(bb.language_head(ps, 2 * h).data, 2 * bb.language_head(ps, h).data, rtol=1e-13)


def test_flow_head_is_zero_at_init(ps):
    rng = np.random.default_rng(4)
    for t in (0.0, 0.3, 1.0):
        out = bb.flow_head(ps, rng.standard_normal((2, 4, 16)), np.full(2, t),
                           rng.standard_normal((2, 16)), rng.standard_normal((2, 4, 48)))
        assert out.shape == (2, 4, 48)
        assert np.all(out.data == 0.0)


def test_flow_head_modulation_gradient():
    p = jitter(bb.init_params(micro_config(), 5), seed=5)
    rng = np.random.default_rng(5)
    h, th, xt = rng.standard_normal((2, 4, 16)), rng.standard_normal((2, 16)), rng.standard_normal((2, 4, 48))
    t = np.array([0.2, 0.7])
    params = p.group("flow_head")
    err = nx.finite_diff_check(lambda: nx.mean(nx.mul(bb.flow_head(p, h, t, th, xt), xt)), params,
                               eps=1e-6, max_entries=16)
    assert err < 1e-4


def test_adapt_head_preserves_and_reshapes(ps):
    trained = jitter(ps, seed=6)
    before = {q.name: q.data.copy() for q in trained.group("flow_head")}
    big = bb.adapt_head(trained, 24, seed=0)
    for q in trained.group("flow_head"):
        np.testing.assert_array_equal(q.data, before[q.name])
        np.testing.assert_array_equal(big[q.name].data, q.data)
    rng = np.random.default_rng(6)
    out = bb.flow_head(big, rng.standard_normal((1, 4, 24)), 0.5, rng.standard_normal((1, 24)),
                       rng.standard_normal((1, 4, 48)))
    assert out.shape == (1, 4, 48)
    with pytest.raises(ValueError):
        bb.adapt_head(trained, 16)


def test_adapter_finetune_reduces_fm():
    src = jitter(bb.init_params(micro_config(), 7), seed=7)
    big = bb.adapt_head(src, 24, seed=1)
    big.set_trainable(["adapter"])
    rng = np.random.default_rng(7)
    h, th = rng.standard_normal((3, 4, 24)), rng.standard_normal((3, 24))
    x1, x0 = rng.standard_normal((3, 1, 4, 4, 12)), rng.standard_normal((3, 1, 4, 4, 12))
    t = np.array([0.2, 0.5, 0.8])
    xt = t[:, None, None, None, None] * x1 + (1 - t[:, None, None, None, None]) * x0
    def loss():
        return fm_loss([bb.flow_head(big, h, t, th, patchify(xt))], [x1], [x0])
    opt = AdamW(lr=1e-2)
    first = float(loss().data)
    for _ in range(30):
        big.zero_grad()
        with nx.Tape() as tape:
            tape.backward(loss())
        opt.step(big.trainable())
    assert float(loss().data) < first
    for q in big.group("flow_head"):
        np.testing.assert_array_equal(q.data, src[q.name].data)


def test_checkpoint_round_trip(tmp_path, ps):
    p = jitter(ps, seed=8)
    path = tmp_path / "m.ckpt"
    bb.save_checkpoint(path, p, lineage={"stage": "x"})
    header, q = bb.load_checkpoint(path)
    assert header["lineage"] == {"stage": "x"}
    assert q.config == p.config
    for a in p:
        np.testing.assert_array_equal(q[a.name].data, a.data)
        assert q[a.name].group == a.group
    raw = path.read_bytes()
    assert raw[:8] == b"UMMCKPT1"
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        bb.read_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_group_subset_and_shape_check(tmp_path, ps):
    path = tmp_path / "fh.ckpt"
    bb.save_checkpoint(path, ps, groups=["flow_head"])
    header, arrays = bb.read_checkpoint(path)
    assert {e["group"] for e in header["manifest"]} == {"flow_head"}
    target = bb.init_params(micro_config(), 9)
    bb.load_checkpoint(path, into=target)
    np.testing.assert_array_equal(target["flow_head.out.w"].data, ps["flow_head.out.w"].data)
    other = bb.init_params(bb.ModelConfig(**{**ps.config.__dict__, "flow_head_dim": 8}), 0)
    with pytest.raises(ValueError):
        bb.load_checkpoint(path, into=other)
