import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from semforge import watermark_gs as gs
from semforge.diffusion import image_from_latent, latent_from_image
from semforge.numerics import SeededRng

THRESHOLD_TABLE = {1e-6: (0.64844, 0.70703), 1e-16: (0.75000, 0.78906),
                   1e-32: (0.85156, 0.87500), 1e-64: (0.97266, 0.98438)}


@pytest.mark.parametrize("fpr", sorted(THRESHOLD_TABLE))
def test_threshold_table(fpr):
    zero_bit, multi = THRESHOLD_TABLE[fpr]
    t0, t1 = gs.gs_threshold(256, fpr, 1), gs.gs_threshold(256, fpr, 100_000)
    assert round(t0, 5) == zero_bit and round(t1, 5) == multi
    assert (t0 * 256).is_integer() and (t1 * 256).is_integer()


def test_threshold_is_minimal():
    for n_users in (1, 100_000):
        j = round(gs.gs_threshold(256, 1e-6, n_users) * 256)
        assert gs.exceedance_fpr(256, j, n_users) <= 1e-6 < gs.exceedance_fpr(256, j - 1, n_users)


def test_exceedance_matches_binomial():
    for j in (128, 165, 200):
        assert gs.exceedance_fpr(256, j) == pytest.approx(stats.binom.sf(j, 256, 0.5), rel=1e-10)


def test_infeasible_and_invalid_thresholds():
    with pytest.raises(gs.InfeasibleThreshold):
        gs.gs_threshold(8, 1e-6)
    with pytest.raises(ValueError):
        gs.gs_threshold(256, 0.0)


class TestLayout:
    def test_family_layouts(self):
        assert gs.GsParams.for_latent((4, 8, 8)).rep == 1
        p = gs.GsParams.for_latent((16, 8, 8))
        assert p.rep == 4 and p.tiling == (1, 2, 2) and p.block_shape == (16, 4, 4)
        assert gs.GsParams.for_latent((4, 64, 64)).tiling == (1, 8, 8)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            gs.GsParams.for_latent((3, 7, 7))
        with pytest.raises(ValueError):
            gs.GsParams(256, 2, (4, 8, 8))
        with pytest.raises(ValueError):
            gs.GsParams(256, 1, (4, 8, 8), ell=2)

    def test_ties_resolve_to_one(self, rng):
        p = gs.GsParams.for_latent((16, 8, 8))
        key = gs.GsKey.random(rng, message=np.zeros(256, dtype=np.uint8))
        # two of the four spatial copies of every bit decode to 1
        plain = np.zeros((16, 8, 8), dtype=np.uint8)
        plain[:, :4] = 1
        cipher = plain.ravel() ^ key.keystream(p.n_elements)
        z = np.where(cipher == 1, 1.0, -1.0).reshape(16, 8, 8)
        assert np.all(gs.gs_extract(z, p, key) == 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([(4, 8, 8), (16, 8, 8), (4, 16, 16)]))
def test_embed_extract_roundtrip(seed, shape):
    rng = SeededRng(seed)
    p = gs.GsParams.for_latent(shape)
    key = gs.GsKey.random(rng.derive(1))
    z = gs.gs_embed(p, key, rng.derive(2))
    assert z.shape == shape
    assert np.array_equal(gs.gs_extract(z, p, key), key.message)
    assert np.array_equal(p.votes(p.diffuse(key.message)), key.message.astype(np.int64) * p.rep)


def test_embedded_latent_is_standard_normal(rng):
    p = gs.GsParams.for_latent((4, 8, 8))
    z = np.concatenate([gs.gs_embed(p, gs.GsKey.random(rng.derive(i)), rng.derive(1000 + i)).ravel()
                        for i in range(40)])
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_batched_extract(rng):
    p = gs.GsParams.for_latent((4, 8, 8))
    key = gs.GsKey.random(rng)
    z = np.stack([gs.gs_embed(p, key, rng.derive(i)) for i in range(3)])
    assert gs.gs_extract(z, p, key).shape == (3, 256)


def test_key_hex_roundtrip(rng):
    key = gs.GsKey.random(rng)
    back = gs.GsKey.from_hex(key.to_hex())
    assert back.key == key.key and back.nonce == key.nonce and np.array_equal(back.message, key.message)
    with pytest.raises(ValueError):
        gs.GsKey.from_hex(key.to_hex()[:-2])
    with pytest.raises(ValueError):
        gs.GsKey(bytes(31), bytes(12), np.zeros(256))


def test_wrong_key_gives_chance_accuracy(rng, model_a1):
    p = gs.GsParams.for_latent(model_a1.latent_shape)
    accs = []
    for i in range(30):
        z = gs.gs_embed(p, gs.GsKey.random(rng.derive(i)), rng.derive(100 + i))
        other = gs.GsKey.random(rng.derive(200 + i))
        accs.append(gs.gs_detect(z, p, other, 0.70703).bit_accuracy)
    assert 0.4 < np.mean(accs) < 0.6


def test_detect_through_model(model_a1, rng):
    p = gs.GsParams.for_latent(model_a1.latent_shape)
    key = gs.GsKey.random(rng)
    z = gs.gs_embed(p, key, rng.derive(1))
    det = gs.gs_detect(latent_from_image(model_a1, image_from_latent(model_a1, z)), p, key, 0.70703)
    assert det.detected and det.bit_accuracy == 1.0


def test_attribution(rng):
    pool = gs.make_user_pool(rng, 50)
    user, acc = gs.attribute(pool[7], pool, 0.70703)
    assert user == 7 and acc == 1.0
    dup = np.vstack([pool[:3], pool[7:8], pool[7:8]])
    assert gs.attribute(pool[7], dup, 0.70703)[0] == 3
    noise = rng.derive(9).bits(256)
    assert gs.attribute(noise, pool, 0.70703)[0] is None
    with pytest.raises(ValueError):
        gs.attribute(noise, np.zeros((0, 256)), 0.5)


def test_resample_bins_preserves_message(rng):
    p = gs.GsParams.for_latent((16, 8, 8))
    for i in range(50):
        key = gs.GsKey.random(rng.derive(i))
        z = gs.gs_embed(p, key, rng.derive(100 + i))
        z2 = gs.resample_bins(z, rng.derive(200 + i))
        assert not np.allclose(z, z2)
        assert np.array_equal(gs.gs_extract(z2, p, key), key.message)
