import numpy as np
import pytest

from decalcify.network import (
    DESK_CONFIG, KINDS, PAPER_CONFIG, Model, NetConfig, build_baseline,
    build_dense_unet, build_network, dense_block_out_channels, forward,
    load_model, read_net_config, write_net_config,
)
from decalcify.tensor import mse_loss


def test_desk_forward_same_size():
    spec, params = build_dense_unet(DESK_CONFIG, seed=0)
    x = np.random.default_rng(0).random((1, 1, 16, 16, 16), dtype=np.float32)
    out = forward(spec, params, x)
    assert out.shape == (1, 1, 16, 16, 16)


def test_same_size_all_architectures():
    rng = np.random.default_rng(1)
    for kind in KINDS:
        spec, params = build_network(kind, DESK_CONFIG, seed=0)
        for s in (8, 16):
            x = rng.random((1, 1, s, s, s), dtype=np.float32)
            assert forward(spec, params, x).shape == (1, 1, s, s, s), kind


def test_batch_output_shape():
    spec, params = build_dense_unet(DESK_CONFIG, seed=0)
    x = np.zeros((3, 1, 32, 32, 32), dtype=np.float32)
    assert forward(spec, params, x).shape == (3, 1, 32, 32, 32)


def test_dense_block_channel_law():
    assert dense_block_out_channels(8, 12, 4) == 56
    # the law holds inside a built paper-scale net: encoder block input is
    # stem channels, output stem + 12 * 4
    spec, params = build_dense_unet(PAPER_CONFIG, seed=0)
    last_enc_conv = params.tensors["enc.l11.conv.w"]
    assert last_enc_conv.shape[1] == PAPER_CONFIG.stem + 11 * 4  # layer 11 input
    fuse = params.tensors["td2.conv.w"]
    assert fuse.shape[1] == PAPER_CONFIG.stem + 12 * 4  # block output


def test_dense_connectivity_per_layer():
    spec, params = build_dense_unet(DESK_CONFIG, seed=0)
    for i in range(DESK_CONFIG.block_len):
        w = params.tensors[f"bot.l{i}.conv.w"]
        assert w.shape[1] == DESK_CONFIG.stem + i * DESK_CONFIG.growth
        assert w.shape[0] == DESK_CONFIG.growth


def test_eval_forward_deterministic():
    spec, params = build_dense_unet(DESK_CONFIG, seed=0)
    x = np.random.default_rng(2).random((1, 1, 8, 8, 8), dtype=np.float32)
    a = forward(spec, params, x, mode="eval").data
    b = forward(spec, params, x, mode="eval").data
    assert np.array_equal(a, b)


def test_forward_finite_at_init():
    for kind in KINDS:
        spec, params = build_network(kind, DESK_CONFIG, seed=3)
        out = forward(spec, params, np.zeros((1, 1, 8, 8, 8), np.float32))
        assert np.isfinite(out.data).all(), kind


def test_autoencoder_has_no_skips():
    from decalcify.network import Concat, Save
    spec, _ = build_baseline("autoencoder", DESK_CONFIG)
    assert not any(isinstance(l, (Save, Concat)) for l in spec.layers)
    spec, _ = build_baseline("unet", DESK_CONFIG)
    assert any(isinstance(l, Concat) for l in spec.layers)


def test_parameter_count_ordering():
    for cfg in (DESK_CONFIG, PAPER_CONFIG):
        _, dense = build_dense_unet(cfg, seed=0)
        _, unet = build_baseline("unet", cfg, seed=0)
        assert dense.param_count() < unet.param_count(), cfg


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        build_baseline("resnet", DESK_CONFIG)


def test_indivisible_dims_rejected():
    spec, params = build_dense_unet(DESK_CONFIG)
    with pytest.raises(ValueError):
        forward(spec, params, np.zeros((1, 1, 6, 6, 6), np.float32))


def test_train_mode_updates_running_stats():
    spec, params = build_dense_unet(DESK_CONFIG, seed=0)
    before = params.buffers["td1.bn.running_mean"].copy()
    x = np.random.default_rng(4).random((2, 1, 8, 8, 8), dtype=np.float32)
    forward(spec, params, x, mode="train")
    after = params.buffers["td1.bn.running_mean"]
    assert not np.array_equal(before, after)


def test_end_to_end_gradient_check():
    # ten random parameters of the desk net, 8^3 input, float64; seeds
    # picked so no relu input sits within finite-difference reach of zero
    spec, params = build_dense_unet(DESK_CONFIG, seed=11, dtype=np.float64)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 1, 8, 8, 8))
    target = rng.standard_normal((1, 1, 8, 8, 8))

    def loss_value():
        return mse_loss(forward(spec, params, x, mode="train"), target)

    params.zero_grad()
    loss_value().backward()
    analytic_grads = {k: t.grad.copy() for k, t in params.tensors.items()}
    names = sorted(params.tensors)
    picks = rng.choice(len(names), size=10, replace=False)
    h = 1e-5
    for pi in picks:
        t = params.tensors[names[pi]]
        flat = t.data.ravel()
        i = int(rng.integers(flat.size))
        analytic = analytic_grads[names[pi]].ravel()[i]
        old = flat[i]
        flat[i] = old + h
        fp = loss_value().data
        flat[i] = old - h
        fm = loss_value().data
        flat[i] = old
        fd = (fp - fm) / (2 * h)
        denom = max(abs(analytic), abs(fd), 1e-8)
        assert abs(analytic - fd) / denom < 1e-3, names[pi]


def test_checkpoint_roundtrip_identical_forward(tmp_path):
    spec, params = build_dense_unet(DESK_CONFIG, seed=7)
    model = Model(spec, params)
    x = np.random.default_rng(8).random((1, 1, 16, 16, 16), dtype=np.float32)
    want = model.forward(x).data
    model.save(tmp_path / "m.duw", tmp_path / "m.cfg")
    back = load_model(tmp_path / "m.duw", tmp_path / "m.cfg")
    got = back.forward(x).data
    assert np.array_equal(want, got)


def test_net_config_file_roundtrip(tmp_path):
    cfg = NetConfig(stem=6, growth=2, block_len=3)
    write_net_config("unet", cfg, tmp_path / "a.cfg")
    kind, back = read_net_config(tmp_path / "a.cfg")
    assert kind == "unet" and back == cfg
    (tmp_path / "bad.cfg").write_text("stem = 4\n")
    with pytest.raises(ValueError):
        read_net_config(tmp_path / "bad.cfg")


def test_checkpoint_key_mismatch_rejected(tmp_path):
    spec, params = build_dense_unet(DESK_CONFIG, seed=0)
    Model(spec, params).save(tmp_path / "m.duw", tmp_path / "m.cfg")
    other_spec, other_params = build_baseline("unet", DESK_CONFIG, seed=0)
    from decalcify.tensor import load_checkpoint
    with pytest.raises(ValueError):
        other_params.load_state(load_checkpoint(tmp_path / "m.duw"))
