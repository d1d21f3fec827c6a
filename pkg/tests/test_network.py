import struct

import numpy as np
import pytest

import mpcgnet.tensor as T
from mpcgnet.network import (
    CheckpointError,
    Interaction,
    MPCGNet,
    NetConfig,
    combine_interaction,
    count_flops,
    count_params,
    count_params_walk,
    load_checkpoint,
    read_tensors,
    save_checkpoint,
    write_tensors,
)
from mpcgnet.nn import ISBlock, Pointwise
from mpcgnet.tensor import Tape, Tensor, finite_diff_check, precision

SMALL = dict(widths=(8, 16, 24, 32), decoder_width=8, heads=2, window=2, reduction=4)


def randomize_gates(net, rng):
    for gs in net.gate_sets().values():
        if gs is not None and gs.logits is not None:
            gs.logits.data[:] = rng.choice([-1.0, 1.0], size=gs.logits.shape)


def image(rng, n=1, size=64, dtype=np.float32):
    return Tensor(rng.random((n, 3, size, size)), dtype=dtype)


# ---------------------------------------------------------------- interaction


def test_interaction_zero_projection_is_skip(rng):
    enc = Tensor(rng.standard_normal((2, 4, 4, 4)))
    out = combine_interaction(enc, T.zeros((2, 4, 4, 4)))
    assert np.array_equal(out.data, enc.data)


def test_interaction_ones_projection_doubles(rng):
    enc = Tensor(rng.standard_normal((2, 4, 4, 4)))
    out = combine_interaction(enc, T.ones((2, 4, 4, 4)))
    np.testing.assert_allclose(out.data, 2 * enc.data, rtol=0, atol=0)


def test_interaction_zero_weights_pass_through(rng):
    blk = Interaction(4, 6, rng)
    for p in blk.parameters():
        p.data[:] = 0
    enc = Tensor(rng.standard_normal((1, 6, 4, 4)))
    prev = Tensor(rng.standard_normal((1, 4, 8, 8)))
    assert np.array_equal(blk(enc, prev).data, enc.data)


def test_interaction_resolution_error(rng):
    blk = Interaction(4, 6, rng)
    with pytest.raises(ValueError, match="twice"):
        blk(Tensor(np.zeros((1, 6, 4, 4))), Tensor(np.zeros((1, 4, 4, 4))))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_interaction_gradcheck(seed):
    rng = np.random.default_rng(seed)
    blk = Interaction(4, 6, rng).astype(np.float64)
    with precision(np.float64):
        prev = Tensor(rng.standard_normal((1, 4, 8, 8)))
        enc = Tensor(rng.standard_normal((1, 6, 4, 4)))
        err = finite_diff_check(lambda p: blk(enc, p), prev, params=[enc, *blk.parameters()],
                                max_elems=30, seed=seed)
    assert err < 1e-2


# ---------------------------------------------------------------- forward


def test_forward_shapes_train_and_infer(rng):
    net = MPCGNet()
    x = image(rng)
    outs = net(x, "train")
    assert len(outs) == 4
    assert all(o.shape == (1, 1, 64, 64) for o in outs)
    inf = net(x, "infer")
    assert len(inf) == 1
    assert np.array_equal(inf[0].data, outs[3].data)


def test_infer_matches_top_head_with_open_gates(rng):
    net = MPCGNet(NetConfig(**SMALL))
    randomize_gates(net, rng)
    x = image(rng, n=2)
    assert np.array_equal(net(x, "infer")[0].data, net(x, "train")[3].data)


def test_resolution_ladder_and_dfa_inputs(rng):
    net = MPCGNet(NetConfig(**SMALL))
    f = net.features(image(rng, size=96))
    for s, c in enumerate(f.cgmfe, 1):
        assert c.shape[2:] == (96 // 2 ** (s + 1),) * 2
    assert [len(d.in_channels) for d in net.dfa] == [2, 3, 4]
    assert f.dfa[1].shape[2] == 6 and f.dfa[3].shape[2] == 24


@pytest.mark.parametrize("size", [(48, 64), (64, 40), (30, 30)])
def test_indivisible_input_names_divisor(size):
    net = MPCGNet(NetConfig(**SMALL))
    x = Tensor(np.zeros((1, 3) + size))
    with pytest.raises(ValueError, match="32"):
        net(x)


def test_rejects_wrong_channel_count():
    net = MPCGNet(NetConfig(**SMALL))
    with pytest.raises(ValueError, match="3"):
        net(Tensor(np.zeros((1, 1, 32, 32))))


def test_batch_independence(rng):
    net = MPCGNet(NetConfig(**SMALL))
    randomize_gates(net, rng)
    x = image(rng, n=3, size=32)
    full = net(x, "infer")[0].data
    for i in range(3):
        single = net(Tensor(x.data[i:i + 1]), "infer")[0].data
        np.testing.assert_allclose(single, full[i:i + 1], atol=1e-5)


def test_fresh_model_gates_closed():
    net = MPCGNet()
    mats = net.gate_matrices()
    assert set(mats) == {"cgmfe_s1", "cgmfe_s2", "cgmfe_s3", "cgmfe_s4", "dfa_1", "dfa_2", "dfa_3"}
    assert all(not m.any() for m in mats.values())


@pytest.mark.parametrize("flag", ["use_cgmfe", "use_wcad", "use_dfa", "use_gates"])
def test_ablations_run(rng, flag):
    net = MPCGNet(NetConfig(**SMALL, **{flag: False}))
    outs = net(image(rng, size=32))
    assert len(outs) == 4 and outs[0].shape == (1, 1, 32, 32)
    assert count_params(net) == count_params_walk(net)


def test_no_gates_ablation_opens_everything():
    net = MPCGNet(NetConfig(**SMALL, use_gates=False))
    for m in net.gate_matrices().values():
        assert m.all()
    assert not any("logits" in n for n, _ in net.named_parameters())


def test_no_dfa_ablation_has_fewer_params():
    assert count_params(MPCGNet(NetConfig(use_dfa=False))) < count_params(MPCGNet())


def test_encoder_is_pluggable(rng):
    base = MPCGNet(NetConfig(**SMALL, seed=3))
    net = MPCGNet(NetConfig(**SMALL, seed=4), encoder=base.encoder)
    assert net.encoder is base.encoder
    assert net(image(rng, size=32))[0].shape == (1, 1, 32, 32)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_net_gradcheck(seed):
    rng = np.random.default_rng(seed)
    net = MPCGNet(NetConfig(**SMALL, seed=seed)).astype(np.float64)
    randomize_gates(net, rng)
    params = [p for n, p in net.named_parameters() if "gates" not in n]
    with precision(np.float64):
        x = image(rng, size=32, dtype=np.float64)
        err = finite_diff_check(lambda t: T.concat_channels(net(t, "train")), x,
                                params=params, max_elems=4, seed=seed)
    assert err < 2e-2


def test_full_net_gate_logits_get_gradient(rng):
    net = MPCGNet(NetConfig(**SMALL))
    x = image(rng, n=2, size=32)
    with Tape() as tape:
        loss = T.sum_all(T.concat_channels(net(x)))
    tape.backward(loss)
    for name, gs in net.gate_sets().items():
        assert gs.logits.grad is not None and np.abs(gs.logits.grad).sum() > 0, name


# ---------------------------------------------------------------- counting


def test_pointwise_param_count():
    assert Pointwise(4, 8, np.random.default_rng(0)).param_count() == 40


def test_is_param_count_872():
    assert count_params(ISBlock(8, 8, np.random.default_rng(0))) == 872


def test_param_count_two_paths_agree():
    for cfg in (NetConfig(), NetConfig(**SMALL)):
        net = MPCGNet(cfg)
        assert count_params(net) == count_params_walk(net)


def test_param_count_stable_across_runs():
    assert count_params(MPCGNet(NetConfig(seed=1))) == count_params(MPCGNet(NetConfig(seed=2)))


def test_flops_scale_with_area():
    net = MPCGNet()
    f64_, f128 = count_flops(net, 64, 64), count_flops(net, 128, 128)
    assert f64_ > 0
    # everything except the global-window attention terms is linear in area
    assert 3.5 * f64_ < f128 < 4.5 * f64_
    with pytest.raises(ValueError, match="32"):
        count_flops(net, 60, 64)


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    net = MPCGNet(NetConfig(**SMALL, seed=5))
    randomize_gates(net, rng)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, net)
    back = load_checkpoint(path)
    assert back.cfg == net.cfg
    a, b = net.state_dict(), back.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    x = image(rng, size=32)
    assert np.array_equal(net(x, "infer")[0].data, back(x, "infer")[0].data)


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "t.bin"
    write_tensors(path, {"ab": np.array([[1.0, 2.0, 3.0]], dtype=np.float32)})
    raw = path.read_bytes()
    expect = (b"MPCG" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab"
              + struct.pack("<B", 2) + struct.pack("<II", 1, 3) + struct.pack("<3f", 1, 2, 3))
    assert raw == expect


def test_checkpoint_scalar_and_unicode_names(tmp_path):
    path = tmp_path / "t.bin"
    src = {"scalar": np.float32(2.5) * np.ones(()), "näme": np.arange(6, dtype=np.float32).reshape(1, 2, 3)}
    write_tensors(path, src)
    back = read_tensors(path)
    assert back["scalar"].shape == () and back["scalar"] == 2.5
    assert np.array_equal(back["näme"], src["näme"])


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "t.bin"
    write_tensors(path, {"w": np.ones((2, 2), dtype=np.float32)})
    raw = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_tensors(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        read_tensors(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_tensors(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_tensors(bad)


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, MPCGNet(NetConfig(**SMALL)))
    (tmp_path / "m.ckpt.cfg").write_text("decoder_width = 16\n")
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(path)
