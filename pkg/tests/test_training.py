import math
from dataclasses import replace

import numpy as np
import pytest

from unimm import backbone as bb
from unimm import numerics as nx
from unimm import training as tr
from unimm.harness.gradcheck import MICRO_CODEC, micro_config
from unimm.harness.scenes import gen_dataset
from unimm.latents import MediaSample, patchify
from unimm.numerics import Parameter
from unimm.optim import AdamW
from unimm.sequence import ntp_mask


def micro_model(seed=0):
    return bb.init_params(replace(micro_config(), max_len=160), seed)


@pytest.fixture(scope="module")
def corpus():
    kw = dict(height=8, width=8, max_objects=1)
    return tr.Corpus(MICRO_CODEC, gen=gen_dataset("gen", 16, 0, **kw).samples,
                     und=gen_dataset("und", 16, 0, **kw).samples,
                     interleaved=gen_dataset("interleaved", 4, 0, **kw).samples)


def test_ntp_loss_cases():
    targets = np.array([[1, 2, 3]])
    mask = np.ones((1, 3), bool)
    perfect = np.full((1, 3, 263), -1e4)
    perfect[0, np.arange(3), targets[0]] = 1e4
    assert float(tr.ntp_loss(perfect, targets, mask).data) == pytest.approx(0.0, abs=1e-12)
    assert float(tr.ntp_loss(np.zeros((1, 3, 263)), targets, mask).data) == pytest.approx(math.log(263), rel=1e-12)
    assert math.log(263) == pytest.approx(5.572, abs=1e-3)


def test_ntp_mask_skips_visual_positions(corpus):
    rng = np.random.default_rng(0)
    kind, sample = "gen", corpus.streams["gen"][0]
    packed = tr.pack_batch([tr.sample_items(kind, sample, corpus, rng, drop_p=0.0)])
    _, m = ntp_mask(packed.batch)
    span = packed.spans[0][1]
    assert not m[0, span.start:span.end].any()


def test_fm_loss_cases():
    rng = np.random.default_rng(1)
    x1, x0 = rng.standard_normal((2, 1, 4, 4, 3)), rng.standard_normal((2, 1, 4, 4, 3))
    v = patchify(x1 - x0)
    assert float(tr.fm_loss([nx.Tensor(v)], [x1], [x0]).data) == 0.0
    zero = float(tr.fm_loss([nx.Tensor(np.zeros_like(v))], [x1], [x0]).data)
    assert zero == pytest.approx(np.mean((x1 - x0) ** 2), rel=1e-13)
    assert float(tr.fm_loss([], [], []).data) == 0.0
    with pytest.raises(ValueError):
        tr.fm_loss([nx.Tensor(v)], [x1], [None])


def test_fm_target_independent_of_t():
    rng = np.random.default_rng(2)
    x1, x0 = rng.standard_normal((1, 4, 4, 3)), rng.standard_normal((1, 4, 4, 3))
    pred = nx.Tensor(rng.standard_normal((1, 4, 12)))
    # target depends on (x1, x0) only, so the loss is the same at any t
    a = tr.fm_loss([pred], [x1[None]], [x0[None]])
    b = tr.fm_loss([pred], [x1[None]], [x0[None]])
    assert float(a.data) == float(b.data)


def test_total_loss_and_stage_alphas():
    assert float(tr.total_loss(0.0, 0.0, 0.2).data) == 0.0
    assert float(tr.total_loss(2.0, 1.0, 0.2).data) == pytest.approx(1.4)
    assert tr.stage1_spec().alpha == 0.2 and tr.stage2_spec().alpha == 1.0
    with pytest.raises(ValueError):
        tr.total_loss(1.0, 1.0, -1.0)


def test_caption_dropout():
    s = tr.GenSample("red", MediaSample.image(np.zeros((8, 8, 3))))
    rng = np.random.default_rng(3)
    assert all(tr.caption_dropout(s, 0.0, rng) is s for _ in range(50))
    assert all(tr.caption_dropout(s, 1.0, rng).caption == "" for _ in range(50))
    assert tr.StageSpec("x").caption_dropout == 0.1
    rate = np.mean([tr.caption_dropout(s, 0.1, rng).caption == "" for _ in range(5000)])
    assert abs(rate - 0.1) < 0.015


def test_sample_items_kinds(corpus):
    rng = np.random.default_rng(4)
    und = tr.sample_items("und", corpus.streams["und"][0], corpus, rng)
    assert not und[0].noised and und[0].t == 1.0 and isinstance(und[1], str)
    gen = tr.sample_items("gen", corpus.streams["gen"][0], corpus, rng, drop_p=0.0)
    assert gen[1].noised and 0 <= gen[1].t <= 1
    np.testing.assert_allclose(gen[1].latent.grid, gen[1].t * gen[1].x1 + (1 - gen[1].t) * gen[1].x0)
    story = tr.sample_items("interleaved", corpus.streams["interleaved"][0], corpus, rng)
    flags = [it.noised for it in story if not isinstance(it, str)]
    assert flags[-1] and flags == sorted(flags)


def test_adamw_first_step_and_zero_grad():
    p = Parameter(np.array([1.0]), name="w")
    p.grad = np.array([1.0])
    AdamW(lr=0.1, weight_decay=0.0).step([p])
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)
    q = Parameter(np.array([1.0, -2.0]), name="q")
    AdamW(lr=0.1, weight_decay=0.0).step([q])
    np.testing.assert_array_equal(q.data, [1.0, -2.0])


def test_adamw_decay_only_on_flagged():
    w = Parameter(np.array([2.0]), name="w", decay=True)
    b = Parameter(np.array([2.0]), name="b", decay=False)
    AdamW(lr=0.1, weight_decay=0.5).step([w, b])
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05))
    assert b.data[0] == 2.0


def test_adamw_clip_and_nonfinite():
    p = Parameter(np.array([0.0, 0.0]), name="p")
    p.grad = np.array([3.0, 4.0])
    assert AdamW(max_grad_norm=1.0).step([p]) == pytest.approx(5.0)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(nx.NumericsError):
        AdamW().step([p])


def test_stage1_gating_and_progress(corpus):
    ps = micro_model(0)
    frozen = {q.name: q.data.copy() for q in ps if q.group in ("backbone", "lm_head", "semantic")}
    spec = tr.stage1_spec(steps=30, batch_size=4, lr=3e-3, weights={"gen": 1.0, "und": 1.0})
    metrics = tr.run_stage(spec, corpus, ps)
    for q in ps:
        if q.name in frozen:
            np.testing.assert_array_equal(q.data, frozen[q.name])
    assert not np.array_equal(ps["flow_head.out.w"].data, 0.0)
    assert [r["step"] for r in metrics] == list(range(30))
    assert set(metrics[0]) == {"step", "stage", "ntp", "fm", "total", "lr", "wall_ms"}


def test_stage2_updates_backbone_and_loss_drops(corpus):
    ps = micro_model(1)
    before = ps["backbone.blocks.0.fc1.w"].data.copy()
    spec = tr.stage2_spec(steps=200, batch_size=4, lr=3e-3, weights={"gen": 1.0, "und": 1.0})
    metrics = tr.run_stage(spec, corpus, ps)
    assert not np.array_equal(ps["backbone.blocks.0.fc1.w"].data, before)
    first = np.mean([r["total"] for r in metrics[:10]])
    last = np.mean([r["total"] for r in metrics[-10:]])
    assert last < first


def test_run_stage_deterministic(corpus):
    spec = tr.stage2_spec(steps=5, batch_size=3, weights={"gen": 1.0, "interleaved": 1.0})
    a, b = micro_model(2), micro_model(2)
    tr.run_stage(spec, corpus, a)
    tr.run_stage(spec, corpus, b)
    for p in a:
        np.testing.assert_array_equal(p.data, b[p.name].data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(corpus):
    ps = micro_model(3)
    ps["flow_head.out.w"].data[:] = np.inf
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.run_stage(tr.stage1_spec(steps=2, batch_size=2), corpus, ps)
    assert '"stage": "stage1"' in str(info.value)


def test_stage_spec_validation():
    with pytest.raises(ValueError):
        tr.StageSpec("x", ("nope",))
    with pytest.raises(ValueError):
        tr.StageSpec("x", schedule="linear")
    s = tr.StageSpec("x", steps=10, lr=1.0, schedule="cosine")
    assert s.lr_at(0) == 1.0 and s.lr_at(5) == pytest.approx(0.5) and s.lr_at(10) == pytest.approx(0.0)
