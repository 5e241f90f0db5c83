import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dppo.net import (LOG_STD_MAX, LOG_STD_MIN, CheckpointError, NetConfig, NonFiniteError, PolicyNet, ValueNet,
                      checkpoint_io, gaussian_logprob_entropy, load_checkpoint, logprob_grads, read_checkpoint,
                      sample_actions, save_checkpoint, transfer_params)
from dppo.terrain import ConfigError
from gradcheck import CHECKS, TINY, numeric, rel_err

GOLDEN_MEAN = [0.01907207083225312, 0.023757566317143375, -0.00273300141600791, 0.021687039747213806,
               -0.02749278790025434, -0.019646179766015105, -0.039949767998641666, 0.01584304678637013,
               0.026696813239243312, -0.02779323500742717, 0.0025836896636050634, -0.004410129102825131,
               0.006806712133481526, 0.02335677762271334, -0.00022612537385597112, 0.009125944481376904,
               -0.04328155373452129, -0.02147149049714839]
GOLDEN_VALUE = 1.3883343920714855


@pytest.mark.parametrize("name", list(CHECKS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(name, seed):
    assert CHECKS[name](seed) < 1e-4


def test_golden_output():
    cfg = NetConfig()
    obs = np.random.default_rng(0).normal(0, 0.1, (1, cfg.obs_dim))
    m, ls, _ = PolicyNet(cfg, 0).forward(obs)
    np.testing.assert_allclose(m[0], GOLDEN_MEAN, rtol=1e-9, atol=1e-15)
    assert np.all(ls == -1.0)
    v, _ = ValueNet(cfg, 1).forward(obs)
    assert v[0] == pytest.approx(GOLDEN_VALUE, rel=1e-9)


def test_default_architecture_shapes():
    net = PolicyNet(NetConfig(), 0)
    p = net.store.params
    assert p["policy.scan.conv0.W"].shape == (8, 1, 5)
    assert p["policy.scan.conv1.W"].shape == (8, 8, 5)
    assert p["policy.scan.latent.W"].shape[1] == 32
    assert [p[f"policy.hist.fc{i}.W"].shape for i in range(3)] == [(3300, 256), (256, 128), (128, 32)]
    assert [p[f"policy.trunk.fc{i}.W"].shape for i in range(3)] == [(136, 256), (256, 128), (128, 18)]
    assert p["policy.log_std"].shape == (18,)


def test_zero_weights_zero_mean():
    net = PolicyNet(TINY, 0)
    for v in net.store.params.values():
        v[...] = 0.0
    m, _, _ = net.forward(np.random.default_rng(0).normal(size=(3, TINY.obs_dim)))
    assert np.all(m == 0.0)


def test_identical_rows_and_determinism():
    net = PolicyNet(TINY, 4)
    row = np.random.default_rng(1).normal(size=(1, TINY.obs_dim))
    m, _, _ = net.forward(np.repeat(row, 5, axis=0))
    assert np.all(m == m[0])
    np.testing.assert_array_equal(net.forward(row)[0], PolicyNet(TINY, 4).forward(row)[0])
    np.testing.assert_array_equal(PolicyNet(TINY, 9).store.flat(), PolicyNet(TINY, 9).store.flat())
    assert not np.array_equal(PolicyNet(TINY, 9).store.flat(), PolicyNet(TINY, 10).store.flat())


def test_non_finite_activation_names_layer():
    net = PolicyNet(TINY, 0)
    net.store.params["policy.trunk.fc1.W"][0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="policy.trunk.fc1"):
        net.forward(np.ones((2, TINY.obs_dim)))


def test_bad_obs_shape():
    with pytest.raises(ValueError):
        PolicyNet(TINY, 0).forward(np.zeros((2, TINY.obs_dim + 1)))


def test_cache_batch_mismatch():
    net = PolicyNet(TINY, 0)
    _, _, c = net.forward(np.zeros((3, TINY.obs_dim)))
    with pytest.raises(ValueError):
        net.backward(c, np.zeros((2, TINY.action_dim)))


def test_zero_upstream_zero_grads():
    net = ValueNet(TINY, 0)
    net.store.zero_grad()
    _, c = net.forward(np.random.default_rng(0).normal(size=(3, TINY.obs_dim)))
    net.backward(c, np.zeros(3))
    assert np.all(net.store.flat_grad() == 0)


def test_logprob_examples():
    d = 18
    logp, ent = gaussian_logprob_entropy(np.zeros((1, d)), np.zeros(d), np.zeros((1, d)))
    assert logp[0] == pytest.approx(-9 * np.log(2 * np.pi), abs=1e-12)
    assert ent[0] == pytest.approx(25.540894, abs=1e-6)
    assert ent[0] == pytest.approx(18 * 0.5 * np.log(2 * np.pi * np.e), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-5, 5))
def test_logprob_translation_invariant_and_grads(seed, shift):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(2, 4))
    ls = rng.uniform(-2, 1, 4)
    a = m + rng.normal(size=(2, 4))
    l1, _ = gaussian_logprob_entropy(m, ls, a)
    l2, _ = gaussian_logprob_entropy(m + shift, ls, a + shift)
    np.testing.assert_allclose(l1, l2, atol=1e-9)
    gm, gs = logprob_grads(m, ls, a)
    ls2 = np.broadcast_to(ls, m.shape).copy()
    f = lambda: float(np.sum(gaussian_logprob_entropy(m, ls2, a)[0]))
    assert rel_err(gm, numeric(f, m)) < 1e-6
    assert rel_err(gs, numeric(f, ls2)) < 1e-6


def test_log_std_clamp_and_sampling():
    net = PolicyNet(TINY, 0)
    net.log_std_param[:] = np.linspace(-10, 10, TINY.action_dim)
    ls = net.log_std()
    assert ls.min() == LOG_STD_MIN and ls.max() == LOG_STD_MAX
    net.store.zero_grad()
    _, _, c = net.forward(np.zeros((1, TINY.obs_dim)))
    net.backward(c, np.zeros((1, TINY.action_dim)), np.ones(TINY.action_dim))
    inside = (net.log_std_param >= LOG_STD_MIN) & (net.log_std_param <= LOG_STD_MAX)
    np.testing.assert_array_equal(net.d_log_std, inside.astype(float))
    rngs = [np.random.default_rng(i) for i in range(2000)]
    acts = sample_actions(np.zeros((2000, TINY.action_dim)), ls, rngs)
    std = acts.std(axis=0)
    assert np.all(std > 0.9 * np.exp(LOG_STD_MIN)) and np.all(std < 1.1 * np.exp(LOG_STD_MAX))


def test_transfer_and_sensitivity():
    src = PolicyNet(TINY, 1, prefix="policy")
    dst = PolicyNet(TINY, 2, prefix="student")
    transfer_params(src, dst)
    obs = np.random.default_rng(3).normal(size=(4, TINY.obs_dim))
    np.testing.assert_array_equal(src.forward(obs)[0], dst.forward(obs)[0])
    dst.store.params["student.trunk.fc0.W"][0, 0] += 0.5
    assert not np.array_equal(src.forward(obs)[0], dst.forward(obs)[0])


def test_transfer_mismatch_lists_names():
    other = NetConfig(**{**TINY.__dict__, "trunk_hidden": (7, 6)})
    with pytest.raises(ConfigError, match="trunk.fc1"):
        transfer_params(PolicyNet(TINY, 0), PolicyNet(other, 0))


def test_checkpoint_round_trip_bytes(tmp_path):
    net = PolicyNet(TINY, 5)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(net.store, a)
    fresh = PolicyNet(TINY, 6)
    load_checkpoint(fresh.store, a)
    checkpoint_io(fresh.store, b, "save")
    assert a.read_bytes() == b.read_bytes()
    np.testing.assert_array_equal(fresh.store.flat(), net.store.flat())


def test_checkpoint_architecture_mismatch(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(PolicyNet(TINY, 0).store, p)
    other = NetConfig(**{**TINY.__dict__, "latent_dim": 5})
    with pytest.raises(CheckpointError, match="policy.scan.latent.W"):
        load_checkpoint(PolicyNet(other, 0).store, p)
    with pytest.raises(CheckpointError, match="value"):
        load_checkpoint(ValueNet(TINY, 0).store, p)


@pytest.mark.parametrize("offset,match", [(0, "magic"), (4, "version")])
def test_checkpoint_header_corruption(tmp_path, offset, match):
    p = tmp_path / "a.ckpt"
    save_checkpoint(PolicyNet(TINY, 0).store, p)
    data = bytearray(p.read_bytes())
    data[offset] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match=match):
        read_checkpoint(p)


def test_checkpoint_truncation_and_payload_corruption(tmp_path):
    p = tmp_path / "a.ckpt"
    save_checkpoint(PolicyNet(TINY, 0).store, p)
    data = p.read_bytes()
    p.write_bytes(data[:-20])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(p)
    bad = bytearray(data)
    bad[len(bad) // 2] ^= 0x01
    p.write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="CRC"):
        read_checkpoint(p)


def test_checkpoint_io_mode():
    with pytest.raises(ValueError):
        checkpoint_io(PolicyNet(TINY, 0).store, "x", "append")
