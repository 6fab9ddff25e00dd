import numpy as np
import pytest

from voxelstruct import nets
from voxelstruct import tensor as T
from voxelstruct.tensor import Tape, Tensor

SMALL = nets.NetConfig(grid_dim=8, latent_dim=3, encoder_channels=(2, 3, 4),
                       detector_channels=(2, 2, 2, 2), detector_kernels=(3, 3, 3, 3),
                       detector_fc=(4,), dropout_rate=0.0)


def _grid(rng, B, D, p=0.3):
    return (rng.random((B, D, D, D)) < p).astype(np.float64)


# ---------------------------------------------------------------- layout

def test_full_scale_layer_sizes():
    sizes = nets.layer_output_sizes(nets.NetConfig.full_scale())
    assert sizes["encoder"] == [64, 128, 256, 512, 400]
    assert sizes["detector_conv"] == [16, 32, 64, 128]
    assert sizes["detector_fc"] == [4096, 1024, 30]


def test_generator_mirrors_encoder():
    for cfg in (nets.NetConfig(), nets.NetConfig.full_scale(), SMALL):
        enc = [co for _, _, co, *_ in nets.encoder_layers(cfg)]
        gen = [co for _, _, co, *_ in nets.generator_layers(cfg)]
        assert gen == enc[:-1][::-1] + [1]


def test_full_scale_collapse_and_split_head():
    cfg = nets.NetConfig.full_scale()
    assert cfg.collapse_kernel == 4
    assert cfg.split_head


def test_parameter_count_matches_shapes():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, gen, det = nets.init_params(cfg, 0)
    total = sum(v.size for g in (enc, gen, det) for v in g.values())
    assert total == nets.parameter_count(cfg)
    assert nets.parameter_count(cfg, "det/") == sum(v.size for v in det.values())


@pytest.mark.parametrize("kw", [
    {"grid_dim": 12}, {"grid_dim": 4}, {"detector_kernels": (5, 3, 3)},
    {"detector_kernels": (4, 3, 3, 3)}, {"n_landmarks": 8}, {"dropout_rate": 1.0},
    {"grid_dim": 8, "encoder_channels": (1, 2, 3, 4, 5)},
])
def test_bad_config_rejected(kw):
    with pytest.raises(ValueError):
        nets.NetConfig(**kw)


# ---------------------------------------------------------------- forward

def test_zero_weights_give_head_bias():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=8)
    enc, _, _ = nets.init_params(cfg, 0)
    rng = np.random.default_rng(3)
    enc = {k: np.zeros_like(v) if k.endswith("/w") else rng.standard_normal(v.shape)
           for k, v in enc.items()}
    mu, logvar = nets.encode(enc, np.zeros((1, 16, 16, 16)), cfg)
    assert np.array_equal(mu.data[0], enc["enc/head/b"][:8])
    assert np.array_equal(logvar.data[0], enc["enc/head/b"][8:])


def test_encode_shapes():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=32)
    enc, _, _ = nets.init_params(cfg, 0)
    mu, logvar = nets.encode(enc, _grid(np.random.default_rng(0), 2, 16), cfg)
    assert mu.shape == (2, 32) and logvar.shape == (2, 32)


def test_generate_range_and_determinism():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    _, gen, _ = nets.init_params(cfg, 0)
    z = np.random.default_rng(0).standard_normal((3, 16))
    a = nets.generate(gen, z, cfg).data
    b = nets.generate(gen, z, cfg).data
    assert a.shape == (3, 16, 16, 16)
    assert np.all((a > 0) & (a < 1))
    assert np.array_equal(a, b)


def test_detect_shape_and_eval_determinism():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    _, _, det = nets.init_params(cfg, 0)
    s = _grid(np.random.default_rng(0), 2, 16)
    a = nets.detect(det, s, cfg).data
    assert a.shape == (2, 30)
    assert np.array_equal(a, nets.detect(det, s, cfg).data)


def test_detect_dropout_needs_rng_and_is_seeded():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    _, _, det = nets.init_params(cfg, 0)
    s = _grid(np.random.default_rng(0), 2, 16)
    with pytest.raises(ValueError):
        nets.detect(det, s, cfg, training=True)
    a = nets.detect(det, s, cfg, training=True, rng=np.random.default_rng(5)).data
    b = nets.detect(det, s, cfg, training=True, rng=np.random.default_rng(5)).data
    c = nets.detect(det, s, cfg).data
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_initial_landmarks_near_center():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    _, _, det = nets.init_params(cfg, 0)
    out = nets.detect(det, _grid(np.random.default_rng(0), 4, 16), cfg).data
    assert abs(out.mean() - 0.5) < 0.15


def test_init_deterministic_per_seed():
    a = nets.init_params(SMALL, 7)
    b = nets.init_params(SMALL, 7)
    c = nets.init_params(SMALL, 8)
    for ga, gb, gc in zip(a, b, c):
        assert ga.keys() == gb.keys()
        assert all(np.array_equal(ga[k], gb[k]) for k in ga)
    assert not np.array_equal(a[0]["enc/conv0/w"], c[0]["enc/conv0/w"])


@pytest.mark.parametrize("cfg", [nets.NetConfig(grid_dim=16, latent_dim=16), nets.NetConfig()],
                         ids=["d16", "d32"])
def test_initial_activation_spread(cfg):
    enc, gen, det = nets.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    s = _grid(rng, 4, cfg.grid_dim, 0.5)
    trace = []
    nets.encode(enc, s, cfg, trace)
    nets.generate(gen, rng.standard_normal((4, cfg.latent_dim)), cfg, trace)
    nets.detect(det, s, cfg, trace=trace)
    assert len(trace) == len(nets.encoder_layers(cfg)) + (not cfg.split_head) \
        + len(nets.generator_layers(cfg)) + len(cfg.detector_channels) + len(cfg.detector_fc) + 1
    for key, act in trace:
        assert 0.1 <= act.std() <= 10, key


def test_dtype_follows_params():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, gen, _ = nets.init_params(cfg, 0, dtype=np.float32)
    out = nets.reconstruct(enc, gen, _grid(np.random.default_rng(0), 1, 16), cfg)
    assert out.dtype == np.float32


def test_dimension_errors():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, gen, det = nets.init_params(cfg, 0)
    with pytest.raises(T.DimensionError, match="16"):
        nets.encode(enc, np.zeros((1, 8, 8, 8)), cfg)
    with pytest.raises(T.DimensionError):
        nets.detect(det, np.zeros((1, 2, 16, 16, 16)), cfg)
    with pytest.raises(T.DimensionError):
        nets.generate(gen, np.zeros((1, 15)), cfg)


def test_unbatched_grid_rejected():
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, _, _ = nets.init_params(cfg, 0)
    with pytest.raises(T.DimensionError):
        nets.encode(enc, np.zeros((16, 16, 16)), cfg)


# ---------------------------------------------------------------- gradients

def _jitter_biases(params, seed=9):
    # zero biases put pre-activations exactly on the ReLU kink where inputs are dead
    rng = np.random.default_rng(seed)
    return {k: v + 0.1 * rng.standard_normal(v.shape) if k.endswith("/b") else v
            for k, v in params.items()}


def _check_param_grads(params, loss_of, n_probe=12, seed=0, eps=1e-6):
    """Compare tape gradients with central differences on sampled entries."""
    params = _jitter_biases(params)
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_of(leaves)
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for key in sorted(params):
        g = leaves[key].grad
        flat = params[key].reshape(-1)
        for i in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            fp = float(loss_of(params).data)
            flat[i] = old - eps
            fm = float(loss_of(params).data)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            worst = max(worst, abs(g.reshape(-1)[i] - num) / max(1.0, abs(num)))
    return worst


def test_encoder_gradients_match_fd():
    enc, _, _ = nets.init_params(SMALL, 1)
    s = _grid(np.random.default_rng(2), 2, 8)
    w = np.random.default_rng(3).standard_normal((2, 3))

    def loss(p):
        mu, lv = nets.encode(p, s, SMALL)
        return (mu * w).sum() + (lv * lv).sum()

    assert _check_param_grads(enc, loss) <= 1e-4


def test_generator_gradients_match_fd():
    _, gen, _ = nets.init_params(SMALL, 1)
    z = np.random.default_rng(2).standard_normal((2, 3))
    target = _grid(np.random.default_rng(4), 2, 8)

    def loss(p):
        out = nets.generate(p, z, SMALL)
        return ((out - target) * (out - target)).sum()

    assert _check_param_grads(gen, loss) <= 1e-4


def test_detector_gradients_match_fd():
    _, _, det = nets.init_params(SMALL, 1)
    s = _grid(np.random.default_rng(2), 2, 8, 0.5)
    w = np.random.default_rng(3).standard_normal((2, 30))

    def loss(p):
        return (nets.detect(p, s, SMALL) * w).sum()

    assert _check_param_grads(det, loss) <= 1e-4


def test_gradient_flows_to_input_grid():
    enc, gen, _ = nets.init_params(SMALL, 1)
    s0 = np.random.default_rng(2).random((1, 8, 8, 8))
    x = Tensor(s0.copy(), requires_grad=True)
    with Tape() as tape:
        mu, _ = nets.encode(enc, x, SMALL)
        loss = mu.sum()
    tape.backward(loss)
    idx = (0, 3, 4, 5)
    f = lambda v: float(nets.encode(enc, v, SMALL)[0].data.sum())
    sp, sm = s0.copy(), s0.copy()
    sp[idx] += 1e-6
    sm[idx] -= 1e-6
    assert abs(x.grad[idx] - (f(sp) - f(sm)) / 2e-6) <= 1e-4


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, gen, det = nets.init_params(cfg, 0)
    path = tmp_path / "m.ckpt"
    nets.save_checkpoint(path, {**enc, **gen, **det})
    back = nets.load_checkpoint(path, cfg)
    e2, g2, d2 = nets.split_groups(back)
    for a, b in ((enc, e2), (gen, g2), (det, d2)):
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k].astype(np.float32), b[k])
    nets.save_checkpoint(tmp_path / "again.ckpt", back)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_group_subset(tmp_path):
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, gen, _ = nets.init_params(cfg, 0)
    nets.save_checkpoint(tmp_path / "vae.ckpt", {**enc, **gen})
    nets.load_checkpoint(tmp_path / "vae.ckpt", cfg, groups=["enc", "gen"])
    with pytest.raises(nets.CheckpointError, match="missing"):
        nets.load_checkpoint(tmp_path / "vae.ckpt", cfg, groups=["det"])


def test_checkpoint_shape_mismatch(tmp_path):
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    other = nets.NetConfig(grid_dim=16, latent_dim=8)
    enc, gen, _ = nets.init_params(other, 0)
    nets.save_checkpoint(tmp_path / "m.ckpt", {**enc, **gen})
    with pytest.raises(nets.CheckpointError, match="shape"):
        nets.load_checkpoint(tmp_path / "m.ckpt", cfg, groups=["enc", "gen"])


def test_checkpoint_key_mismatch(tmp_path):
    cfg = nets.NetConfig(grid_dim=16, latent_dim=16)
    enc, _, _ = nets.init_params(cfg, 0)
    enc["enc/extra/w"] = np.zeros(2)
    nets.save_checkpoint(tmp_path / "m.ckpt", enc)
    with pytest.raises(nets.CheckpointError, match="unexpected"):
        nets.load_checkpoint(tmp_path / "m.ckpt", cfg, groups=["enc"])


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    with pytest.raises(nets.CheckpointError, match="magic"):
        nets.load_checkpoint(tmp_path / "x.ckpt")
