import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from engae import detect as D
from engae import seqnn as nn
from engae.errors import ConfigurationError, FormatError, InputError
from engae.features import SequenceSample
from engae.models import (AE_ARCHS, ARCHS, BC_ARCHS, ModelConfig, build, forward_ae, forward_bc,
                          load_checkpoint, receptive_field, reconstruction_error, save_checkpoint)

from gradcheck import check_layer

SMALL = dict(n=3, T=16, L=2, h=4, k=3, d=4, b=4, p=0.0)


def small(arch, **kw):
    return build(ModelConfig(arch=arch, **{**SMALL, **kw}))


def param_shapes(model):
    return {name: p.shape for name, p, _ in model.named_parameters()}


# -- build ------------------------------------------------------------------------

def test_full_size_tcn_ae_shapes():
    m = build(ModelConfig(arch="tcn_ae", n=11, T=300, L=8, h=24, k=8, p=0.05, d=4))
    shapes = param_shapes(m)
    assert shapes["tcn1.level0.branch.conv1.W"] == (8, 11, 24)
    assert shapes["tcn1.level0.downsample.W"] == (11, 24)
    assert shapes["tcn1.level7.branch.conv2.W"] == (8, 24, 24)
    assert shapes["conv1.W"] == (24, 11) and shapes["conv2.W"] == (24, 11)
    tcn1 = {k[5:]: v for k, v in shapes.items() if k.startswith("tcn1.")}
    tcn2 = {k[5:]: v for k, v in shapes.items() if k.startswith("tcn2.")}
    assert tcn1 == tcn2
    assert not any("level8" in k for k in shapes)


def test_tcn_dilations_double_per_level():
    m = small("tcn_ae", L=3)
    convs = [layer for layer in m.net.layers() if isinstance(layer, nn.CausalConv1d)]
    assert [c.dilation for c in convs[:6]] == [1, 1, 2, 2, 4, 4]


def test_lstm_ae_four_stages():
    m = build(ModelConfig(arch="lstm_ae", n=37, T=20, h=128, b=64))
    lstms = [layer for layer in m.net.layers() if isinstance(layer, nn.LSTM)]
    assert [(l.c_in, l.hidden) for l in lstms] == [(37, 128), (128, 64), (64, 128), (128, 37)]


def test_ff_ae_widths():
    m = build(ModelConfig(arch="ff_ae", n=11, T=300, b=64))
    lins = [layer for layer in m.net.layers() if isinstance(layer, nn.Linear)]
    assert [(l.d_in, l.d_out) for l in lins] == [(3300, 128), (128, 64), (64, 128), (128, 3300)]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(arch="tcn_ae", T=301, d=4)
    ModelConfig(arch="tcn_bc", T=301, d=4)
    for bad in (dict(n=0), dict(T=0), dict(L=0), dict(k=0), dict(d=0), dict(b=0), dict(p=1.0), dict(p=-0.1),
                dict(arch="cnn"), dict(upsample="cubic")):
        with pytest.raises(ConfigurationError):
            ModelConfig(**bad)
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"arch": "tcn_ae", "bogus": 1})


# -- forward ------------------------------------------------------------------------

@pytest.mark.parametrize("arch", AE_ARCHS)
def test_ae_shape_and_determinism(arch):
    m = small(arch, p=0.2)
    x = np.random.default_rng(0).normal(size=(16, 3))
    y = forward_ae(m, x)
    assert y.shape == x.shape
    assert np.array_equal(y, forward_ae(m, x))
    assert forward_ae(m, np.stack([x, x])).shape == (2, 16, 3)
    with pytest.raises(InputError):
        forward_ae(m, np.zeros((15, 3)))
    with pytest.raises(InputError):
        forward_ae(m, np.full((16, 3), np.nan))
    with pytest.raises(ConfigurationError):
        forward_bc(m, x)


@settings(max_examples=15, deadline=None)
@given(arch=st.sampled_from(AE_ARCHS), n=st.integers(1, 4), q=st.integers(1, 4), d=st.integers(1, 3),
       L=st.integers(1, 3), seed=st.integers(0, 1000))
def test_ae_shape_preservation(arch, n, q, d, L, seed):
    T = q * d
    m = build(ModelConfig(arch=arch, n=n, T=T, L=L, h=3, k=2, d=d, b=2, init_seed=seed))
    x = np.random.default_rng(seed).normal(size=(T, n))
    assert forward_ae(m, x).shape == (T, n)


def _zero_params(model):
    for _, p, _ in model.named_parameters():
        p[...] = 0.0


@pytest.mark.parametrize("arch", AE_ARCHS)
def test_zero_weights_constant_output(arch):
    m = small(arch)
    _zero_params(m)
    rng = np.random.default_rng(1)
    a, b = forward_ae(m, rng.normal(size=(16, 3))), forward_ae(m, rng.normal(size=(16, 3)))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("arch", BC_ARCHS)
def test_classifier_outputs(arch):
    m = small(arch)
    rng = np.random.default_rng(2)
    p = forward_bc(m, rng.normal(size=(32, 16, 3)) * 3)
    assert p.shape == (32,) and np.all((p > 0) & (p < 1))
    assert isinstance(float(forward_bc(m, rng.normal(size=(16, 3)))), float)
    _zero_params(m)
    assert forward_bc(m, rng.normal(size=(16, 3))) == 0.5
    with pytest.raises(ConfigurationError):
        forward_ae(m, np.zeros((16, 3)))


def test_reconstruction_error():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    assert reconstruction_error(x, x) == 0
    assert reconstruction_error(x, y) == reconstruction_error(y, x) == nn.mse_loss(x, y)[0]
    with pytest.raises(InputError):
        reconstruction_error(x, y[:5])


# -- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("arch", ARCHS)
def test_whole_model_gradient(arch):
    rng = np.random.default_rng(4)
    m = small(arch)
    assert check_layer(m.net, rng.uniform(-1, 1, (2, 16, 3)), rng) < 1e-3


def test_tcn1_tcn2_independent():
    m = small("tcn_ae")
    p = {name: arr for name, arr, _ in m.named_parameters()}
    for name in p:
        if name.startswith("tcn1."):
            assert not np.shares_memory(p[name], p["tcn2." + name[5:]])
    before1, before2 = p["tcn1.level0.branch.conv1.W"].copy(), p["tcn2.level0.branch.conv1.W"].copy()
    x = np.random.default_rng(5).normal(size=(16, 3))
    D.train_ae(m, [SequenceSample("a", x, "engaged")], D.TrainConfig(epochs=1, lr=1e-2))
    d1 = p["tcn1.level0.branch.conv1.W"] - before1
    d2 = p["tcn2.level0.branch.conv1.W"] - before2
    assert np.abs(d1).max() > 0 and np.abs(d2).max() > 0
    assert not np.allclose(d1, d2)


# -- receptive field ------------------------------------------------------------------

def test_receptive_field_values():
    assert receptive_field(ModelConfig(L=1, k=2)) == 3
    assert receptive_field(ModelConfig(L=8, k=8)) == 3571 > 300
    assert receptive_field(ModelConfig(L=4, k=3)) == 61


@pytest.mark.parametrize("L,k", [(1, 2), (2, 3), (3, 2), (4, 3)])
def test_receptive_field_matches_impulse_response(L, k):
    # empirical oracle: perturb one input frame and see how far ahead the output moves
    rng = np.random.default_rng(6)
    rf = receptive_field(ModelConfig(L=L, k=k))
    T = rf + 20
    net = nn.temporal_conv_net(2, 3, L, k, 0.0, rng)
    for _, p, _ in net.named_parameters():
        p[...] = np.abs(p) + 0.1          # positive weights keep ReLUs open
    x = np.abs(rng.normal(size=(1, T, 2)))
    base = net.forward(x)
    x[0, 5] += 1.0
    changed = np.flatnonzero(np.any(net.forward(x)[0] != base[0], axis=1))
    assert changed.min() == 5
    assert changed.max() - 5 + 1 == rf


# -- training behaviour -------------------------------------------------------------------

def test_ae_learns_constant_sequences():
    rng = np.random.default_rng(7)
    train = [SequenceSample(f"c{i}", np.full((16, 3), v), "engaged") for i, v in enumerate(rng.uniform(-1, 1, 20))]
    m = build(ModelConfig(arch="tcn_ae", n=3, T=16, L=2, h=8, k=3, d=4, p=0.0))
    D.train_ae(m, train, D.TrainConfig(epochs=200, batch_size=20, lr=1e-2, seed=0))
    const = np.full((16, 3), 0.3)
    noisy = rng.normal(size=(16, 3)) * 2
    assert reconstruction_error(const, forward_ae(m, const)) < reconstruction_error(noisy, forward_ae(m, noisy))


def test_classifier_separable_training_accuracy():
    rng = np.random.default_rng(8)
    samples = []
    for i in range(40):
        label = "disengaged" if i % 2 else "engaged"
        x = rng.normal(size=(16, 3)) * 0.3 + (1.0 if i % 2 else -1.0)
        samples.append(SequenceSample(f"s{i}", x, label))
    m = small("tcn_bc")
    D.train_bc(m, samples, D.TrainConfig(epochs=30, batch_size=8, lr=1e-2, loss="bce"))
    p = forward_bc(m, np.stack([s.x for s in samples]))
    acc = np.mean((p > 0.5) == np.array([s.is_anomaly for s in samples]))
    assert acc > 0.9


# -- checkpoints ----------------------------------------------------------------------------

@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_round_trip(arch):
    m = small(arch, init_seed=9)
    blob = save_checkpoint(m)
    m2 = load_checkpoint(blob)
    assert m2.config == m.config
    for (n1, p1, _), (n2, p2, _) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and np.array_equal(p1, p2)
    x = np.random.default_rng(9).normal(size=(16, 3))
    assert np.array_equal(m.forward(x), m2.forward(x))
    assert save_checkpoint(m2) == blob


def test_full_size_checkpoint_scores_identically():
    m = build(ModelConfig(arch="tcn_ae", n=11, T=300, L=8, h=24, k=8, d=4, p=0.05, init_seed=3))
    x = np.random.default_rng(10).normal(size=(300, 11))
    assert np.array_equal(load_checkpoint(save_checkpoint(m)).forward(x), m.forward(x))


def test_checkpoint_corruption():
    blob = save_checkpoint(small("tcn_bc"))
    with pytest.raises(FormatError):
        load_checkpoint(b"XNGAE" + blob[5:])
    with pytest.raises(FormatError):
        load_checkpoint(blob[:5] + b"\x09\x00" + blob[7:])
    with pytest.raises(FormatError):
        load_checkpoint(blob[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(blob + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(b"")
    # swap the arch tag to another one of equal length
    with pytest.raises(FormatError):
        load_checkpoint(blob.replace(b"tcn_bc", b"tcn_ae", 1))
