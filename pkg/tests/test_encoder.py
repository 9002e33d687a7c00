import math

import numpy as np
import pytest

from exitembed.datagen import generate, mixing_matrix, nuisance_basis
from exitembed.encoder import (
    EncoderConfig,
    block_forward,
    checkpoint_bytes,
    init_encoder,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from exitembed.numerics import Rng


def gelu64(u):
    return 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u**3)))


def forward64(stack, modality, raw, upto):
    """Independent float64 forward pass over the stored weights."""
    h = np.asarray(raw, np.float64) @ stack.lifts[modality].astype(np.float64).T
    scale = stack.config.lora_scale
    for blk in stack.blocks[modality][:upto]:
        up, down = blk.w_up.astype(np.float64), blk.w_down.astype(np.float64)
        out = h + gelu64(h @ up.T) @ down.T
        if blk.lora_a is not None:
            out = out + scale * (h @ blk.lora_a.astype(np.float64).T) @ blk.lora_b.astype(np.float64).T
        h = out
    return h


def head64(stack, h):
    z = h @ stack.head.astype(np.float64).T
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    return np.where(n > 0, z / np.where(n > 0, n, 1), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(num_layers=1)
    with pytest.raises(ValueError):
        EncoderConfig(unified_dim=128)
    with pytest.raises(ValueError):
        EncoderConfig(denoise_rate=1.5)
    with pytest.raises(ValueError):
        EncoderConfig(modalities=("A", "A"), input_dims=(8, 8))
    assert EncoderConfig(lora_rank=0).lora_scale == 0.0
    assert EncoderConfig().lora_scale == 2.0


def test_init_is_deterministic_and_seed_sensitive():
    assert init_encoder().weights_equal(init_encoder())
    assert not init_encoder().weights_equal(init_encoder(EncoderConfig(seed=7)))


def test_forward_matches_float64_oracle(stack):
    raw = Rng(1).symmetric((5, stack.config.input_dim("A")))
    got = stack.hidden_trajectory("A", raw)
    for n in (1, 6, 12):
        want = forward64(stack, "A", raw, n)
        np.testing.assert_allclose(got[n - 1], want, rtol=1e-4, atol=1e-4)
    np.testing.assert_allclose(stack.fine_embed("A", raw), head64(stack, forward64(stack, "A", raw, 12)), atol=1e-5)


def test_lora_branch_with_nonzero_b():
    s = init_encoder()
    for blk in s.blocks["B"]:
        blk.lora_b[:] = Rng(3).symmetric(blk.lora_b.shape, 0.05)
    raw = Rng(2).symmetric((3, s.config.input_dim("B")))
    np.testing.assert_allclose(s.exit_hidden("B", raw, 4), forward64(s, "B", raw, 4), rtol=1e-4, atol=1e-4)
    off = s.forward_range("B", 0, 4, s.embed_input("B", raw), lora_on=False)
    assert not np.allclose(off, s.exit_hidden("B", raw, 4))


def test_zero_lora_b_is_identity_of_adapter(stack):
    h = Rng(4).symmetric((2, stack.config.d_model))
    blk = stack.blocks["A"][0]
    on = block_forward(blk, h, stack.config.lora_scale, True)
    off = block_forward(blk, h, stack.config.lora_scale, False)
    assert on.tobytes() == off.tobytes()


def test_head_is_unit_norm_and_zero_convention(stack):
    h = Rng(5).symmetric((4, stack.config.d_model))
    emb = stack.apply_head(h)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(stack.apply_head(np.zeros(stack.config.d_model)), np.zeros(stack.config.unified_dim))


def test_prefix_property_bitwise(stack):
    raw = Rng(6).symmetric((7, stack.config.input_dim("B")))
    traj = stack.hidden_trajectory("B", raw)
    for n in range(1, stack.num_layers + 1):
        assert stack.exit_hidden("B", raw, n).tobytes() == traj[n - 1].tobytes()


def test_batch_equals_single(stack):
    raw = Rng(7).symmetric((6, stack.config.input_dim("A")))
    batch, snap = stack.coarse_embed("A", raw, 5)
    for k in range(6):
        e, s = stack.coarse_embed("A", raw[k], 5, k)
        assert e.tobytes() == batch[k].tobytes()
        assert s.hidden.tobytes() == snap.hidden[k].tobytes()
        assert s.item_id == k and s.layer_index == 5


def test_cache_resume_is_bitwise(stack):
    raw = Rng(8).symmetric((3, stack.config.input_dim("A")))
    for e in (1, 5, 11):
        _, snap = stack.coarse_embed("A", raw, e)
        resumed = stack.apply_head(stack.forward_range("A", e, stack.num_layers, snap.hidden))
        assert resumed.tobytes() == stack.fine_embed("A", raw).tobytes()


def test_input_validation(stack):
    with pytest.raises(ValueError):
        stack.embed_input("A", np.zeros(3))
    with pytest.raises(KeyError):
        stack.embed_input("Z", np.zeros(3))
    with pytest.raises(IndexError):
        stack.coarse_embed("A", np.zeros(stack.config.input_dim("A")), 0)
    with pytest.raises(IndexError):
        stack.forward_range("A", 3, 3, np.zeros(stack.config.d_model))
    with pytest.raises(ValueError):
        stack.embed_input("A", np.full(stack.config.input_dim("A"), np.nan))


def test_layer_calls_counted():
    s = init_encoder()
    s.hidden_trajectory("A", np.zeros((4, s.config.input_dim("A"))), upto=3)
    assert s.layer_calls[("A", 1)] == 4 and s.layer_calls[("A", 4)] == 0


def test_denoise_units_shrink_nuisance_only(stack):
    cfg = stack.config
    u = nuisance_basis(cfg.seed, "A", cfg.input_dim("A"), cfg.nuisance_rank)[:, 0]
    h0 = stack.embed_input("A", u * 5.0)
    h1 = stack.forward_layer("A", 1, h0)
    # along the nuisance direction the layer removes denoise_rate of the signal
    v = h0 / np.linalg.norm(h0)
    assert float(h1 @ v) == pytest.approx((1 - cfg.denoise_rate) * float(h0 @ v), rel=1e-4)


def test_pre_aligned_lift_pairs_modalities(stack):
    c = generate(5, seed=1, noise_high=0.0, noise_floor=0.0)
    ha = stack.embed_input("A", c.raw["A"])
    hb = stack.embed_input("B", c.raw["B"])
    np.testing.assert_allclose(ha, hb, atol=1e-4)
    g = mixing_matrix(stack.config.seed, "A", stack.config.input_dim("A"), stack.config.latent_dim)
    assert g.shape == (stack.config.input_dim("A"), stack.config.latent_dim)


def test_checkpoint_round_trip(tmp_path, stack):
    s = stack.copy()
    s.blocks["A"][2].lora_b[:] = 0.25
    save_checkpoint(s, tmp_path / "m.bin", echo="hello")
    t = load_checkpoint(tmp_path / "m.bin")
    assert t.weights_equal(s) and t.config == s.config
    cfg, echo, _ = read_header((tmp_path / "m.bin").read_bytes())
    assert echo == "hello" and cfg == s.config
    assert checkpoint_bytes(s, "hello") == (tmp_path / "m.bin").read_bytes()


def test_checkpoint_corruption_detected(tmp_path, stack):
    data = bytearray(checkpoint_bytes(stack))
    data[200] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(data))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "magic.bin").write_bytes(b"NOPE" + bytes(data[4:]))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "magic.bin")


def test_copy_is_independent(stack):
    c = stack.copy()
    c.blocks["A"][0].lora_b[:] = 1.0
    assert not c.weights_equal(stack)
    assert c.weights_equal(stack, include_lora=False)
