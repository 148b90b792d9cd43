import numpy as np
import pytest

from semforge import attacks as at
from semforge import watermark_gs as gs
from semforge import watermark_tr as tr
from semforge.diffusion import decode, encode, image_from_latent, make_corpus
from semforge.numerics import SeededRng

TAU = 0.70703125


@pytest.fixture(scope="module")
def setup(model_a1):
    rng = SeededRng(21)
    params = gs.GsParams.for_latent(model_a1.latent_shape)
    keys = [gs.GsKey.random(rng.derive(i)) for i in range(4)]
    z = np.stack([gs.gs_embed(params, k, rng.derive(10 + i)) for i, k in enumerate(keys)])
    images = image_from_latent(model_a1, z, 3)
    covers = make_corpus(rng.derive(99), 4)[0]
    return params, keys, images, covers


def test_gs_verifier(model_a1, setup):
    params, keys, images, covers = setup
    verify = at.gs_verifier(model_a1, params, keys, TAU)
    v = verify(images)
    assert v.detected.all() and v.metric.shape == (4,)
    assert not verify(covers).detected.any()
    single = at.gs_verifier(model_a1, params, keys[0], TAU)(images[0])
    assert single.metric.shape == () and bool(single.detected)
    with pytest.raises(ValueError):
        verify(images[:2])


def test_gs_verifier_with_pool(model_a1, setup):
    params, keys, images, _ = setup
    pool = np.stack([k.message for k in keys])
    v = at.gs_verifier(model_a1, params, keys, TAU, user_pool=pool)(images)
    assert v.detected.all()


def test_tr_verifier(model_a1):
    key = tr.tr_make_key(SeededRng(1))
    z = tr.tr_embed(SeededRng(2).normal(model_a1.latent_shape), key)
    verify = at.tr_verifier(model_a1, key, 0.01)
    v = verify(image_from_latent(model_a1, z))
    assert v.detected and v.score == -v.metric


def test_imprint_forgery_improves_and_records(model_a1, model_a2, setup):
    params, keys, images, covers = setup
    cfg = at.ImprintConfig(steps=40, eval_every=10)
    traces = at.imprint_forgery(model_a2, images, covers, cfg, at.gs_verifier(model_a1, params, keys, TAU))
    assert len(traces) == 4
    for t in traces:
        assert [r.step for r in t.records] == [0, 10, 20, 30, 40]
        assert t.records[-1].loss < t.records[0].loss
        assert t.metric_at(40) > t.metric_at(0)
        assert t.image.shape == (32, 32) and t.final.step == 40


def test_imprint_mask_protects_pixels(model_a1, model_a2, setup):
    params, keys, images, covers = setup
    mask = np.zeros((8, 8))
    mask[:4] = 1
    cfg = at.ImprintConfig(steps=10, eval_every=10, mask=mask)
    t = at.imprint_forgery(model_a2, images[0], covers[0], cfg, at.gs_verifier(model_a1, params, keys[0], TAU))
    assert np.allclose(t.image[:16], covers[0][:16])
    assert not np.allclose(t.image[16:], covers[0][16:])


def test_detector_feedback_stops_early(model_a1, model_a2, setup):
    params, keys, images, covers = setup
    cfg = at.ImprintConfig(steps=150, eval_every=5, stop_rule="detector-feedback")
    traces = at.imprint_forgery(model_a2, images, covers, cfg, at.gs_verifier(model_a1, params, keys, TAU))
    for t in traces:
        assert t.records[-1].detected
        assert t.stop_step < 150


def test_imprint_removal(model_a1, model_a2, setup):
    params, keys, images, _ = setup
    cfg = at.ImprintConfig(steps=60, eval_every=30)
    traces = at.imprint_removal(model_a2, images, cfg, at.gs_verifier(model_a1, params, keys, TAU))
    assert all(t.metric_at(60) < t.metric_at(0) for t in traces)


def test_imprint_config_validation():
    with pytest.raises(ValueError):
        at.ImprintConfig(steps=0)
    with pytest.raises(ValueError):
        at.ImprintConfig(stop_rule="never")
    with pytest.raises(ValueError):
        at.ImprintConfig(mask=np.full((8, 8), 0.5))


def test_reprompt_and_plus(model_a1, model_a2, setup):
    params, keys, images, _ = setup
    out = at.reprompt(model_a2, images, 5)
    assert out.shape == images.shape
    verify = at.gs_verifier(model_a1, params, keys[0], TAU)
    res = at.reprompt_plus(model_a2, images[0], [5, 6, 7], 3, "gs", verify, SeededRng(3))
    assert len(res.candidates) == 9 and res.candidates[0] == (0, 0)
    basic = float(verify(at.reprompt(model_a2, images[0], 5)).metric)
    assert res.metrics[0] == pytest.approx(basic)
    assert res.success or res.metrics[res.best_index] >= basic
    with pytest.raises(ValueError):
        at.reprompt_plus(model_a2, images[0], [], 3, "gs", verify, SeededRng(3))


def test_averaging_attack():
    refs = np.stack([np.full((4, 4), 0.5), np.full((4, 4), -0.5)])
    refs[0, 0, 0] = 1.0
    out = at.averaging_attack(refs, np.zeros((4, 4)), "forge")
    mean = refs.mean(axis=0)
    assert np.allclose(out, mean - mean.mean())
    assert np.allclose(at.averaging_attack(refs, np.zeros((4, 4)), "remove"), -(mean - mean.mean()))
    with pytest.raises(ValueError):
        at.averaging_attack(refs, np.zeros((4, 4)), "blend")


def test_regeneration(model_a1, setup):
    images = setup[2]
    assert np.allclose(at.regeneration_attack(model_a1, images[0], 0, SeededRng(1)),
                       decode(model_a1, encode(model_a1, images[0])))
    out = at.regeneration_attack(model_a1, images[0], 10, SeededRng(1))
    assert out.shape == (32, 32)
    with pytest.raises(ValueError):
        at.regeneration_attack(model_a1, images[0], 51, SeededRng(1))
