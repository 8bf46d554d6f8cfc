import numpy as np
import pytest

from llvit.census import Census
from llvit.config import MixerConfig
from llvit.mixer import LUTMixer, MLPMixer, make_mixer, mixer_param_count
from llvit.nn_core import UsageError


def lut_mixer(rng, dim=8, widths=(24, 12), fan_in=3, bits=4):
    cfg = MixerConfig(kind="lut", widths=list(widths), fan_in=fan_in, bits=bits)
    m = LUTMixer(dim, cfg, "m", rng, mapping_seed=3)
    m.codec.calibrate(rng.normal(size=(256, dim)))
    return m


def test_uncalibrated_codec_raises(rng):
    m = LUTMixer(8, MixerConfig(kind="lut", widths=[16, 8], fan_in=3, bits=2), "m", rng, 0)
    with pytest.raises(UsageError):
        m.forward(np.zeros((2, 8), np.float32))


def test_negative_final_tables_give_pure_residual(rng):
    m = lut_mixer(rng)
    m.luts[-1].latent.value[...] = -1.0
    z = rng.normal(size=(5, 8)).astype(np.float32)
    assert np.array_equal(m.forward(z), z)
    skip = rng.normal(size=(5, 8)).astype(np.float32)
    assert np.array_equal(m.forward(z, skip=skip), skip)


def test_mlp_zero_weights_identity(rng):
    m = MLPMixer(8, MixerConfig(kind="mlp"), "m", rng)
    for p in m.parameters():
        p.value[...] = 0
    z = rng.normal(size=(3, 8)).astype(np.float32)
    assert np.array_equal(m.forward(z), z)


@pytest.mark.parametrize("kind", ["lut", "mlp"])
def test_row_permutation_equivariance(kind, rng):
    m = lut_mixer(rng) if kind == "lut" else MLPMixer(8, MixerConfig(kind="mlp"), "m", rng)
    z = rng.normal(size=(12, 8)).astype(np.float32)
    perm = rng.permutation(12)
    assert np.allclose(m.forward(z)[perm], m.forward(z[perm]), atol=1e-6)


@pytest.mark.parametrize("kind", ["lut", "mlp"])
def test_token_independence(kind, rng):
    m = lut_mixer(rng) if kind == "lut" else MLPMixer(8, MixerConfig(kind="mlp"), "m", rng)
    z = rng.normal(size=(10, 8)).astype(np.float32)
    base = m.forward(z)
    z2 = z.copy()
    z2[4] += rng.normal(size=8).astype(np.float32) * 3
    out = m.forward(z2)
    others = np.arange(10) != 4
    assert np.array_equal(out[others], base[others])


def test_shapes_match_between_kinds(rng):
    z = rng.normal(size=(2, 7, 8)).astype(np.float32)
    a = lut_mixer(rng).forward(z)
    b = MLPMixer(8, MixerConfig(kind="mlp"), "m", rng).forward(z)
    assert a.shape == b.shape == z.shape


def test_lut_path_is_multiplication_free(rng):
    m = lut_mixer(rng)
    cen = Census()
    m.forward(rng.normal(size=(6, 8)).astype(np.float32), counter=cen.at("mix"))
    c = cen.blocks["mix"]
    assert c["mults"] == 0
    assert c["compares"] == 6 * 8 * 4
    assert c["lookups"] == 6 * (24 + 12)


def test_backward_routes_to_skip(rng):
    m = lut_mixer(rng)
    z = rng.normal(size=(4, 8)).astype(np.float32)
    m.forward(z)
    g = rng.normal(size=(4, 8)).astype(np.float32)
    gz, gskip = m.backward(g)
    assert np.all(gz == 0) and np.array_equal(gskip, g)
    assert np.any(m.luts[0].latent.grad != 0)


def test_make_mixer_dispatch(rng):
    assert make_mixer(8, MixerConfig(kind="mlp"), "m", rng).kind == "mlp"
    cfg = MixerConfig(kind="lut", widths=[8], fan_in=2, bits=2)
    assert make_mixer(8, cfg, "m", rng).kind == "lut"


def test_param_count_mlp():
    c = mixer_param_count(MixerConfig(kind="mlp"), 192)
    assert c["ff1"] * 12 == 1_769_472 and c["ff2"] * 12 == 1_769_472


def test_param_count_lut():
    c = mixer_param_count(MixerConfig(kind="lut", widths=[768, 192], fan_in=6, bits=8), 192)
    assert c["truth_table_bits"] == 768 * 64 + 192 * 64 == 61_440
    assert c["encoded_bytes"] == 18_432
    assert c["thresholds"] == 192 * 8
