import numpy as np
import pytest

from fnac import ndtensor as nd
from fnac.localization import localize, masked_features
from fnac.losses import HyperParams, adjacency, fns_loss, nce_loss, sim_matrix, tne_loss, total_loss
from fnac.model import (ConfigError, ModelConfig, encode_arrays, encode_batch, init_params,
                        load_checkpoint, save_checkpoint, zero_params)
from fnac.ndtensor import gradcheck, numerical_grad, relative_error
from fnac.synthdata import WorldConfig, sample_batch
from fnac.trainer import forward_losses

WORLD = WorldConfig(h=3, w=3, region_min=2, region_max=4, d_a_raw=6, d_v_raw=5)


def small_params(seed=0, d=4):
    return init_params(ModelConfig(WORLD.d_a_raw, WORLD.d_v_raw, hidden=7, d=d), np.random.default_rng(seed))


def test_output_shapes_and_norms():
    batch = sample_batch(WORLD, 2, 0.0, np.random.default_rng(0))
    emb = encode_batch(small_params(), batch)
    assert emb.z_audio.shape == (2, 4)
    assert emb.z_visual_spatial.shape == (2, 4, 3, 3)
    assert emb.z_visual_pooled.shape == (2, 4)
    np.testing.assert_allclose(np.linalg.norm(emb.z_audio.data, axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(emb.z_visual_spatial.data, axis=1), 1, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(emb.z_visual_pooled.data, axis=1), 1, atol=1e-6)


def test_zero_weights_give_equal_rows_and_warn():
    nd.reset_warnings()
    batch = sample_batch(WORLD, 3, 0.0, np.random.default_rng(1))
    emb = encode_batch(zero_params(ModelConfig(WORLD.d_a_raw, WORLD.d_v_raw, 7, 4)), batch)
    za = emb.z_audio.data
    assert (za == za[0]).all()
    assert np.isfinite(za).all()
    assert nd.WARNINGS["l2_normalize_zero_norm"] > 0


def test_input_dimension_mismatch():
    with pytest.raises(ConfigError):
        encode_arrays(small_params(), np.zeros((2, 3)), np.zeros((2, 3, 3, 5)))
    with pytest.raises(ConfigError):
        encode_arrays(small_params(), np.zeros((2, 6)), np.zeros((2, 3, 3, 4)))


def test_encode_is_pure_and_permutation_equivariant():
    batch = sample_batch(WORLD, 5, 0.0, np.random.default_rng(2))
    params = small_params(3)
    a = encode_batch(params, batch)
    b = encode_batch(params, batch)
    assert a.z_audio.data.tobytes() == b.z_audio.data.tobytes()
    perm = np.array([3, 0, 4, 1, 2])
    p = encode_arrays(params, batch.audio[perm], batch.images[perm])
    np.testing.assert_array_equal(p.z_audio.data, a.z_audio.data[perm])
    np.testing.assert_array_equal(p.z_visual_spatial.data, a.z_visual_spatial.data[perm])
    np.testing.assert_array_equal(p.z_visual_pooled.data, a.z_visual_pooled.data[perm])


def test_full_objective_gradients_for_every_encoder_weight():
    batch = sample_batch(WORLD, 4, 0.3, np.random.default_rng(4))
    params = small_params(5, d=8)
    hp = HyperParams(tau=0.2, tau_adj=0.3, detach_adjacency=False)
    errs = gradcheck(lambda: forward_losses(params, batch.audio, batch.images, hp).total, list(params))
    assert max(errs.values()) < 1e-4, errs


def test_detached_gradients_match_frozen_target_differences():
    # with detached adjacencies the tape differentiates the objective at fixed targets
    batch = sample_batch(WORLD, 4, 0.3, np.random.default_rng(8))
    params = small_params(9, d=8)
    hp = HyperParams(tau=0.2, tau_adj=0.3, detach_adjacency=True)
    with nd.no_grad():
        emb = encode_batch(params, batch)
        s_a = adjacency(emb.z_audio, hp.tau_adj)
        s_v = adjacency(emb.z_visual_pooled, hp.tau_adj)

    def frozen():
        emb = encode_batch(params, batch)
        z_sound = masked_features(localize(emb.z_audio, emb.z_visual_spatial), emb.z_visual_spatial)
        sims = sim_matrix(emb.z_audio, emb.z_visual_pooled)
        f1, f2 = fns_loss(sims, s_a, s_v, hp.tau)
        return total_loss(nce_loss(sims, hp.tau), f1, f2, tne_loss(s_a, z_sound, hp.tau_adj), hp).total

    for p in params:
        p.grad = None
    with nd.Tape() as tape:
        loss = forward_losses(params, batch.audio, batch.images, hp).total
    assert loss.item() == pytest.approx(frozen().item(), abs=1e-12)
    nd.backward(loss, tape)
    for p in params:
        assert relative_error(p.grad, numerical_grad(frozen, p)) < 1e-4, p.name


def test_checkpoint_roundtrip_is_exact(tmp_path):
    params = small_params(6)
    save_checkpoint(tmp_path / "c.json", params, {"seed": 6}, step=12)
    loaded, doc = load_checkpoint(tmp_path / "c.json")
    assert doc["step"] == 12 and doc["config"] == {"seed": 6}
    for k, t in params.tensors.items():
        assert loaded[k].data.tobytes() == t.data.tobytes()
    save_checkpoint(tmp_path / "d.json", loaded, {"seed": 6}, step=12)
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "d.json").read_bytes()


def test_checkpoint_rejects_tampering(tmp_path):
    save_checkpoint(tmp_path / "c.json", small_params(), {"seed": 1})
    text = (tmp_path / "c.json").read_text().replace('"seed": 1', '"seed": 2')
    (tmp_path / "c.json").write_text(text)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "c.json")


def test_init_bounds():
    p = init_params(ModelConfig(16, 9, 25, 8), np.random.default_rng(7))
    assert np.abs(p["audio.w1"].data).max() <= 1 / 4
    assert np.abs(p["visual.w1"].data).max() <= 1 / 3
    assert np.abs(p["visual.w2"].data).max() <= 1 / 5
