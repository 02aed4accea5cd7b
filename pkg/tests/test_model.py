import math

import numpy as np
import pytest

from oracles import numeric_grad, rel_err
from volconv import model as Mdl
from volconv.errors import FormatError, ShapeError
from volconv.layers import mse
from volconv.model import ArchitectureSpec, build, count_params


def baseline():
    return ArchitectureSpec.named("baseline")


def proposed():
    return ArchitectureSpec.named("proposed")


def tiny(k=1, filters=(2,), hidden=3, shape=(6, 6, 6)):
    return ArchitectureSpec(block_filters=filters, k=k, hidden_units=hidden, input_shape=shape)


def test_param_counts():
    b, p = count_params(baseline()), count_params(proposed())
    assert (b.conv_weights, b.fc_weights) == (219_672, 590_080)
    assert (p.conv_weights, p.fc_weights) == (233_280, 16_640)


def test_param_counts_by_formula():
    # sum of C*27*M over both convs of each block
    conv = 0
    c = 1
    for f in (8, 16, 32, 64):
        conv += c * 27 * f + f * 27 * f
        c = f
    assert conv == 219_672
    assert count_params(tiny(filters=(8,))).conv_weights == 1 * 27 * 8 + 8 * 27 * 8


def test_count_is_pure_function_of_spec():
    s = tiny(filters=(3, 4), shape=(8, 8, 8))
    net_a, net_b = build(s, seed=1), build(s, seed=2)
    assert count_params(net_a) == count_params(net_b) == count_params(s)
    c = count_params(net_a)
    weights = sum(a.size for name, a in net_a.parameters() if name.endswith(".weight"))
    assert c.conv_weights + c.fc_weights == weights
    assert c.total == sum(a.size for _, a in net_a.parameters())


def test_flatten_and_chains():
    assert baseline().flatten_size == 2304
    assert proposed().flatten_size == 64
    assert baseline().spatial_chain() == [(41, 49, 41), (21, 25, 21), (11, 13, 11), (6, 7, 6), (3, 4, 3)]
    assert proposed().spatial_chain() == [(23, 27, 23), (12, 14, 12), (6, 7, 6), (3, 4, 3), (2, 2, 2)]
    assert proposed().in_channels == 8


def test_layer_shapes_chain_through_network():
    net = build(ArchitectureSpec.named("proposed", input_shape=(12, 12, 12)))
    h = np.zeros((2, *net.input_shape), np.float32)
    shapes = []
    for layer in net.layers:
        h = layer.forward(h, False)
        shapes.append(h.shape)
    # region 9^3 pools 9 -> 5 -> 3 -> 2 -> 1, leaving 8 filters to flatten
    assert shapes[-1] == (2, 1)
    assert (2, 8) in shapes


def test_spec_validation():
    with pytest.raises(ValueError):
        ArchitectureSpec(block_filters=(8, 0))
    with pytest.raises(ValueError):
        ArchitectureSpec(k=0)
    with pytest.raises(ValueError):
        ArchitectureSpec.named("wide")
    with pytest.raises(ValueError):
        ArchitectureSpec(kernel_side=2)


def test_xavier_bounds_and_seed_dependence():
    s = tiny(filters=(4, 6), shape=(8, 8, 8))
    net = build(s, seed=3)
    for layer in net.layers:
        if isinstance(layer, Mdl.Conv):
            C, l, _, _, M = layer.filter.weights.shape
            bound = math.sqrt(6 / (C * 27 + M * 27))
            assert np.abs(layer.filter.weights).max() <= bound
            assert np.abs(layer.filter.weights).max() > 0.8 * bound
            assert not layer.filter.bias.any()
    w3 = [a.copy() for _, a in net.parameters()]
    w3b = [a for _, a in build(s, seed=3).parameters()]
    w4 = [a for _, a in build(s, seed=4).parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(w3, w3b))
    assert not np.array_equal(w3[0], w4[0])


def test_zero_batch_forward_is_finite():
    for name in ("baseline", "proposed"):
        spec = ArchitectureSpec.named(name, input_shape=(10, 12, 10))
        net = build(spec)
        y = Mdl.forward(net, np.zeros((4, *net.input_shape), np.float32), "eval")
        assert y.shape == (4, 1) and np.all(np.isfinite(y))


def test_forward_eval_deterministic_and_shape_error():
    net = build(tiny(filters=(2, 3), shape=(8, 8, 8)))
    x = np.random.default_rng(0).standard_normal((3, *net.input_shape)).astype(np.float32)
    np.testing.assert_array_equal(Mdl.forward(net, x), Mdl.forward(net, x))
    with pytest.raises(ShapeError):
        Mdl.forward(net, x[..., :1, :])
    with pytest.raises(ValueError):
        Mdl.forward(net, x, "predict")


def test_last_layer_linearity():
    net = build(tiny(filters=(2,), shape=(8, 8, 8)), dtype=np.float64)
    out = net.layers[-1].layer
    out.bias[:] = 0.7
    x = np.random.default_rng(1).standard_normal((3, *net.input_shape))
    before = Mdl.forward(net, x) - 0.7
    out.weights *= 2
    np.testing.assert_allclose(Mdl.forward(net, x) - 0.7, 2 * before, rtol=1e-12)


def test_backward_zero_residual():
    net = build(tiny(), dtype=np.float64)
    x = np.random.default_rng(2).standard_normal((3, *net.input_shape))
    targets = net.forward(x, train=True).copy()
    loss, grads = Mdl.backward(net, x, targets)
    assert loss == 0.0
    assert max(np.abs(g).max() for g in grads) < 1e-10


def test_zero_output_layer_blocks_hidden_gradients():
    net = build(tiny(filters=(2, 2), shape=(8, 8, 8)), dtype=np.float64)
    net.layers[-1].layer.weights[:] = 0
    x = np.random.default_rng(3).standard_normal((2, *net.input_shape))
    Mdl.backward(net, x, np.ones((2, 1)))
    for (name, _), g in zip(net.parameters(), net.gradients()):
        if not name.startswith("output"):
            assert not g.any(), name


def network_grad_errors(spec, seed):
    net = build(spec, seed=seed, dtype=np.float64)
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, *net.input_shape))
    t = r.standard_normal((3, 1))
    Mdl.backward(net, x, t)
    analytic = [g.copy() for g in net.gradients()]

    def loss():
        return mse(net.forward(x, train=True), t)

    errs = {}
    for (name, p), g in zip(net.parameters(), analytic):
        errs[name] = rel_err(g, numeric_grad(loss, p))
    return errs


@pytest.mark.parametrize("seed", range(3))
def test_tiny_network_finite_differences(seed):
    errs = network_grad_errors(tiny(), seed)
    assert max(errs.values()) < 1e-4, errs


def test_tiny_segmented_network_finite_differences():
    errs = network_grad_errors(tiny(k=2), 7)
    assert max(errs.values()) < 1e-4, errs


# --- weight files -------------------------------------------------------------------

def test_weights_roundtrip(tmp_path):
    spec = tiny(filters=(3, 2), shape=(8, 8, 8))
    net = build(spec, seed=5)
    x = np.random.default_rng(4).standard_normal((2, *net.input_shape)).astype(np.float32)
    net.forward(x, train=True)  # move running statistics off their defaults
    path = tmp_path / "w.rcnw"
    Mdl.save_weights(net, path)
    loaded = Mdl.load_weights(path, spec)
    np.testing.assert_array_equal(Mdl.forward(loaded, x), Mdl.forward(net, x))
    Mdl.save_weights(loaded, tmp_path / "w2.rcnw")
    assert path.read_bytes() == (tmp_path / "w2.rcnw").read_bytes()


def test_weights_file_size(tmp_path):
    spec = proposed()
    net = build(spec)
    path = tmp_path / "p.rcnw"
    Mdl.save_weights(net, path)
    entries = net.state_entries()
    header = 4 + 2 + 2 + sum(2 + len(n.encode()) + 2 + 4 * a.ndim for n, a in entries)
    running = sum(a.size for _, a in net.buffers())
    assert path.stat().st_size == header + 4 * (count_params(spec).total + running)


def test_weights_wrong_spec_names_layer(tmp_path):
    path = tmp_path / "w.rcnw"
    Mdl.save_weights(build(tiny(filters=(3, 2), shape=(8, 8, 8))), path)
    with pytest.raises(FormatError, match="block2.conv1.weight"):
        Mdl.load_weights(path, tiny(filters=(3, 4), shape=(8, 8, 8)))
    with pytest.raises(FormatError, match="hidden.weight"):
        Mdl.load_weights(path, tiny(filters=(3,), shape=(8, 8, 8)))


def test_weights_corrupt_files(tmp_path):
    path = tmp_path / "w.rcnw"
    Mdl.save_weights(build(tiny()), path)
    blob = path.read_bytes()
    (tmp_path / "bad.rcnw").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        Mdl.read_weight_entries(tmp_path / "bad.rcnw")
    (tmp_path / "short.rcnw").write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="truncated"):
        Mdl.read_weight_entries(tmp_path / "short.rcnw")
    with pytest.raises(FormatError):
        Mdl.read_weight_entries(tmp_path / "missing.rcnw")
