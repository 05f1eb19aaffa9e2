import numpy as np
import pytest

from neoxfuse.config import PRESETS, ModelConfig, preset
from neoxfuse.weights import (
    KVCache,
    load_weights,
    save_weights,
    synth_weights,
)


def test_preset_dimensions():
    cfg = preset("pythia-2.8b")
    assert (cfg.hidden, cfg.n_heads, cfg.d_head) == (2560, 32, 80)
    assert (cfg.n_layers, cfg.d_mlp, cfg.vocab) == (32, 10240, 50304)
    assert cfg.rotary_pct == 0.25
    assert cfg.rotary_dims == 20
    assert cfg.parallel_residual

    big = preset("pythia-6.9b")
    assert (big.hidden, big.d_mlp) == (4096, 16384)

    tiny = preset("tiny")
    assert tiny.hidden == tiny.n_heads * tiny.d_head


def test_unknown_preset():
    with pytest.raises(KeyError, match="tiny"):
        preset("nope")


def test_config_validation():
    with pytest.raises(ValueError, match="hidden"):
        ModelConfig(hidden=10, n_heads=2, d_head=4, n_layers=1, d_mlp=8,
                    rotary_pct=0.5, vocab=7)
    with pytest.raises(ValueError):
        ModelConfig(hidden=8, n_heads=2, d_head=4, n_layers=0, d_mlp=8,
                    rotary_pct=0.5, vocab=7)
    with pytest.raises(ValueError, match="rotary"):
        ModelConfig(hidden=8, n_heads=2, d_head=4, n_layers=1, d_mlp=8,
                    rotary_pct=1.5, vocab=7)
    # floor(0.3 * 4) = 1 rotary dim: odd, cannot pair
    with pytest.raises(ValueError, match="even"):
        ModelConfig(hidden=8, n_heads=2, d_head=4, n_layers=1, d_mlp=8,
                    rotary_pct=0.3, vocab=7)


def test_with_override():
    cfg = preset("pythia-2.8b").with_(n_layers=2)
    assert cfg.n_layers == 2
    assert cfg.hidden == 2560


def test_presets_are_all_valid():
    for name in PRESETS:
        cfg = preset(name)
        assert cfg.rotary_dims % 2 == 0


# ---------------------------------------------------------------------------
# Weight synthesis and serialization.

def test_synth_deterministic():
    cfg = preset("tiny")
    a = synth_weights(cfg, seed=5)
    b = synth_weights(cfg, seed=5)
    c = synth_weights(cfg, seed=6)
    assert np.array_equal(a.qkv_weight, b.qkv_weight)
    assert np.array_equal(a.down_bias, b.down_bias)
    assert not np.array_equal(a.qkv_weight, c.qkv_weight)


def test_synth_shapes_validate():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=0)
    w.validate(cfg)
    assert w.qkv_weight.shape == (3 * cfg.hidden, cfg.hidden)
    assert w.up_weight.shape == (cfg.d_mlp, cfg.hidden)


def test_save_load_round_trip(tmp_path):
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=2)
    manifest = tmp_path / "weights.json"
    blob = tmp_path / "weights.bin"
    save_weights(w, manifest, blob)
    loaded = load_weights(manifest, blob)
    loaded.validate(cfg)
    # storage is float32; loading returns the float32-rounded values
    assert np.array_equal(loaded.qkv_weight, w.qkv_weight.astype(np.float32))
    assert np.array_equal(loaded.ln2_bias, w.ln2_bias.astype(np.float32))


def test_load_rejects_truncated_blob(tmp_path):
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=2)
    manifest = tmp_path / "weights.json"
    blob = tmp_path / "weights.bin"
    save_weights(w, manifest, blob)
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_weights(manifest, blob)


# ---------------------------------------------------------------------------
# KV cache.

def test_cache_append_and_views():
    cache = KVCache(n_heads=2, d_head=4)
    assert len(cache) == 0
    k = np.arange(8, dtype=float).reshape(2, 4)
    v = -k
    cache.append(k, v)
    cache.append(k + 10, v - 10)
    assert len(cache) == 2
    keys = cache.keys()
    assert keys.shape == (2, 2, 4)
    assert np.array_equal(keys[:, 0], k)
    hk, hv = cache.head(1)
    assert hk.shape == (2, 4)
    assert np.array_equal(hv[1], v[1] - 10)


def test_cache_growth_beyond_initial_capacity():
    cache = KVCache(n_heads=1, d_head=2)
    rows = [np.array([[float(t), -float(t)]]) for t in range(100)]
    for r in rows:
        cache.append(r, r * 2)
    assert len(cache) == 100
    assert np.array_equal(cache.keys()[0, 37], rows[37][0])
    assert np.array_equal(cache.values()[0, 99], rows[99][0] * 2)


def test_cache_shape_checks():
    cache = KVCache(n_heads=2, d_head=4)
    with pytest.raises(ValueError):
        cache.append(np.zeros((2, 3)), np.zeros((2, 4)))


def test_cache_from_arrays_copies():
    k = np.zeros((1, 3, 2))
    v = np.ones((1, 3, 2))
    cache = KVCache.from_arrays(k, v)
    k[0, 0, 0] = 99.0
    assert cache.keys()[0, 0, 0] == 0.0
    assert len(cache) == 3


def test_cache_views_are_copies():
    cache = KVCache(n_heads=1, d_head=2)
    cache.append(np.zeros((1, 2)), np.zeros((1, 2)))
    out = cache.keys()
    out[0, 0, 0] = 5.0
    assert cache.keys()[0, 0, 0] == 0.0
