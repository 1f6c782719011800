import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_inr.siren import (
    DEFAULT_OMEGA0,
    CheckpointError,
    ConfigError,
    NeuronRef,
    SirenNet,
    append_input_neurons,
    column_l1,
    expected_param_count,
    forward,
    forward_trace,
    forward_with_tape,
    inf_norm,
    init_siren,
    load_checkpoint,
    neuron_output,
    remove_pruned,
    save_checkpoint,
)
from adaptive_inr.tensor import ShapeError, mse, mse_grad, reduction_order

DATA = Path(__file__).parent / "data"


def test_init_matches_golden_snapshot():
    snap = json.loads((DATA / "golden_init_2_4_4.json").read_text())
    net = init_siren(snap["widths"], snap["out_dim"], seed=snap["seed"])
    for name, arr in net.parameters().items():
        np.testing.assert_array_equal(arr, np.array(snap["params"][name]))


def test_init_defaults_and_ranges():
    net = init_siren([2, 16, 16, 8], seed=0)
    assert net.omega0 == DEFAULT_OMEGA0 == 30.0
    assert np.all(np.abs(net.weights[0]) <= 30.0 / 2)
    assert np.all(np.abs(net.weights[1]) <= math.sqrt(6 / 16) / 30)
    assert np.all(np.abs(net.final_weight) <= math.sqrt(6 / 8) / 30)
    assert all(not b.any() for b in net.biases) and not net.final_bias.any()
    assert all(m.all() for m in net.masks)
    assert net.widths == [2, 16, 16, 8] and net.depth == 2


@pytest.mark.parametrize("widths,omega0", [([2, 0, 4], 30.0), ([2], 30.0), ([2, 4], 0.0)])
def test_init_rejects_bad_config(widths, omega0):
    with pytest.raises(ConfigError):
        init_siren(widths, omega0=omega0)


def test_zero_net_outputs_zero():
    net = init_siren([2, 3, 3], seed=0)
    for p in net.parameters().values():
        p[...] = 0.0
    assert not forward(net, np.random.default_rng(0).uniform(-1, 1, (5, 2))).any()


def test_single_unit_net_matches_formula():
    net = SirenNet([np.array([[2.5]])], [np.array([0.0])], np.array([[1.0]]), np.array([0.0]))
    x = np.linspace(-1, 1, 11)[:, None]
    assert np.abs(forward(net, x)[:, 0] - np.sin(2.5 * x[:, 0])).max() <= 1e-12


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(init_siren([2, 4], seed=0), np.zeros((3, 3)))


def test_masking_zero_column_is_noop():
    net = init_siren([2, 5, 4], seed=2)
    net.weights[1][:, 3] = 0.0
    X = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    before = forward(net, X)
    net.set_mask(0, 3)
    np.testing.assert_array_equal(forward(net, X), before)


def test_neuron_output_first_layer_and_consistency():
    net = init_siren([2, 6, 5], seed=3)
    net.biases[0][:] = np.linspace(-1, 1, 6)
    X = np.random.default_rng(2).uniform(-1, 1, (20, 2))
    h = neuron_output(net, NeuronRef(0, 4), X)
    np.testing.assert_allclose(h, np.sin(X @ net.weights[0][4] + net.biases[0][4]), atol=1e-15)
    _, _, post = forward_trace(net, X)
    np.testing.assert_array_equal(neuron_output(net, NeuronRef(1, 2), X), post[1][:, 2])


def test_neuron_output_matches_standalone_evaluator():
    rng = np.random.default_rng(4)
    net = init_siren([3, 7, 6, 5], seed=4)
    for b in net.biases:
        b[:] = rng.normal(size=b.shape)
    x = rng.uniform(-1, 1, 3)
    # scalar recomputation of neuron (2, 1)
    h = [math.sin(sum(net.weights[0][j, l] * x[l] for l in range(3)) + net.biases[0][j]) for j in range(7)]
    h = [math.sin(sum(net.weights[1][j, l] * h[l] for l in range(7)) + net.biases[1][j]) for j in range(6)]
    ref = math.sin(sum(net.weights[2][1, l] * h[l] for l in range(6)) + net.biases[2][1])
    assert abs(neuron_output(net, NeuronRef(2, 1), x[None])[0] - ref) <= 1e-12


def test_neuron_output_invalid_ref():
    net = init_siren([2, 4, 4], seed=0)
    with pytest.raises(IndexError):
        neuron_output(net, NeuronRef(2, 0), np.zeros((1, 2)))
    with pytest.raises(IndexError):
        neuron_output(net, NeuronRef(0, 4), np.zeros((1, 2)))
    net.set_mask(0, 1)
    with pytest.raises(IndexError):
        neuron_output(net, NeuronRef(0, 1), np.zeros((1, 2)))


def test_column_l1_examples():
    net = init_siren([1, 3, 3], seed=0)
    net.weights[1][:, 0] = [1.0, -2.0, 3.0]
    net.weights[1][:, 1] = 0.0
    scores = column_l1(net, 0)
    assert scores[0] == 6.0 and scores[1] == 0.0
    net = init_siren([2, 9, 7, 4], seed=5)
    W = net.weights[2]
    for j in range(7):
        assert abs(column_l1(net, 1)[j] - sum(abs(W[r, j]) for r in range(4))) <= 1e-12
    L = net.final_weight
    assert abs(column_l1(net, 2)[3] - sum(abs(L[r, 3]) for r in range(L.shape[0]))) <= 1e-12


def test_column_l1_ignores_masked_rows():
    net = init_siren([2, 4, 4], seed=0)
    net.set_mask(1, 2)
    expected = np.abs(np.delete(net.weights[1], 2, axis=0)).sum(axis=0)
    np.testing.assert_array_equal(column_l1(net, 0), expected)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1))
def test_column_l1_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    net = init_siren([2, 6, 5], seed=seed)
    perm = rng.permutation(6)
    permuted = net.copy()
    permuted.weights[0] = net.weights[0][perm]
    permuted.biases[0] = net.biases[0][perm]
    permuted.weights[1] = net.weights[1][:, perm]
    np.testing.assert_array_equal(column_l1(permuted, 0), column_l1(net, 0)[perm])


def test_append_zero_rows_is_noop():
    net = init_siren([2, 4, 4], seed=0)
    out = append_input_neurons(net, np.zeros((0, 2)))
    for a, b in zip(out.parameters().values(), net.parameters().values()):
        np.testing.assert_array_equal(a, b)
    assert out is not net


def test_append_extends_widths_and_initialises_columns():
    net = init_siren([2, 8, 5], seed=0)
    rows = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.5]])
    out = append_input_neurons(net, rows, seed=7)
    assert out.widths == [2, 11, 5]
    np.testing.assert_array_equal(out.weights[0][8:], rows)
    np.testing.assert_array_equal(out.biases[0][8:], 0.0)
    new_cols = out.weights[1][:, 8:]
    assert np.all(np.abs(new_cols) <= 1e-4) and np.any(new_cols != 0)
    np.testing.assert_array_equal(out.weights[1][:, :8], net.weights[1])


def test_append_with_zero_columns_is_bit_identical():
    net = init_siren([2, 6, 5], seed=1)
    X = np.random.default_rng(0).uniform(-1, 1, (100, 2))
    with reduction_order("sequential"):
        before = forward(net, X)
        out = append_input_neurons(net, np.ones((3, 2)), init_scale=0.0)
        np.testing.assert_array_equal(forward(out, X), before)


def test_append_depth_zero_widens_head():
    net = init_siren([1, 2], seed=0)
    out = append_input_neurons(net, [[10.0]])
    assert out.final_weight.shape == (1, 3)


def test_append_shape_errors():
    net = init_siren([2, 4], seed=0)
    with pytest.raises(ShapeError):
        append_input_neurons(net, np.ones((1, 3)))
    with pytest.raises(ShapeError):
        append_input_neurons(net, np.ones((2, 2)), new_phases=np.zeros(3))


def test_remove_pruned_no_masks_is_identical():
    net = init_siren([2, 5, 5], seed=0)
    out, keep = remove_pruned(net)
    for a, b in zip(out.parameters().values(), net.parameters().values()):
        np.testing.assert_array_equal(a, b)
    assert [len(k) for k in keep] == [5, 5]


def test_remove_pruned_down_to_one_neuron():
    net = init_siren([2, 6, 6], seed=3)
    for j in range(1, 6):
        net.set_mask(1, j)
    X = np.random.default_rng(0).uniform(-1, 1, (200, 2))
    compact, keep = remove_pruned(net)
    assert compact.widths == [2, 6, 1]
    np.testing.assert_array_equal(keep[1], [0])
    np.testing.assert_array_equal(forward(compact, X), forward(net, X))


def test_param_count_after_compacting_matches_hand_count():
    net = init_siren([2, 256, 256, 256], out_dim=3, seed=0)
    for layer in (0, 1):
        for j in range(64, 256):
            net.set_mask(layer, j)
    compact, _ = remove_pruned(net)
    assert compact.widths == [2, 64, 64, 256]
    hand = (64 * 2 + 64) + (64 * 64 + 64) + (256 * 64 + 256) + (3 * 256 + 3)
    assert compact.param_count() == net.param_count() == expected_param_count([2, 64, 64, 256], 3) == hand


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_soundness_property(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 4))] + [int(w) for w in rng.integers(2, 10, size=depth + 1)]
    net = init_siren(widths, out_dim=2, seed=seed)
    for layer in range(depth + 1):
        for j in rng.choice(widths[layer + 1], size=int(rng.integers(0, widths[layer + 1])), replace=False):
            net.set_mask(layer, int(j))
    X = rng.uniform(-1, 1, (64, widths[0]))
    compact, _ = remove_pruned(net)
    np.testing.assert_array_equal(forward(net, X), forward(compact, X))


def test_masked_gradients_are_zero_and_match_compacted():
    net = init_siren([2, 6, 5], seed=0)
    net.set_mask(0, 1)
    net.set_mask(1, 3)
    X = np.random.default_rng(0).uniform(-1, 1, (30, 2))
    Y = np.random.default_rng(1).normal(size=(30, 1))
    out, back = forward_with_tape(net, X)
    grads = back(mse_grad(out, Y))
    assert not grads["W0"][1].any() and grads["b0"][1] == 0.0
    assert not grads["W1"][:, 1].any() and not grads["W1"][3].any()
    assert not grads["L"][:, 3].any()
    compact, keep = remove_pruned(net)
    cout, cback = forward_with_tape(compact, X)
    cgrads = cback(mse_grad(cout, Y))
    np.testing.assert_array_equal(grads["W1"][np.ix_(keep[1], keep[0])], cgrads["W1"])


def test_net_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    net = init_siren([2, 5, 4, 3], out_dim=2, omega0=3.0, seed=7)
    for b in net.biases:
        b[:] = rng.normal(size=b.shape)
    X, Y = rng.uniform(-1, 1, (10, 2)), rng.normal(size=(10, 2))
    out, back = forward_with_tape(net, X)
    grads = back(mse_grad(out, Y))
    for name, p in net.parameters().items():
        for _ in range(3):
            idx = tuple(rng.integers(s) for s in p.shape)
            old = p[idx]
            p[idx] = old + 1e-5
            up = mse(forward(net, X), Y)
            p[idx] = old - 1e-5
            down = mse(forward(net, X), Y)
            p[idx] = old
            fd = (up - down) / 2e-5
            assert abs(fd - grads[name][idx]) <= 1e-5 * max(1.0, abs(fd))


def test_inf_norm():
    assert inf_norm(np.array([[1.0, -2.0], [0.5, 0.5]])) == 3.0
    assert inf_norm(np.array([1.0, -4.0])) == 4.0
    assert inf_norm(np.zeros((0, 3))) == 0.0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = init_siren([3, 7, 5], out_dim=2, omega0=12.5, seed=9)
    net.set_mask(0, 2)
    path = tmp_path / "net.npz"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.omega0 == 12.5 and back.widths == net.widths
    for a, b in zip(back.parameters().values(), net.parameters().values()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(back.masks, net.masks):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_version_and_corruption(tmp_path):
    net = init_siren([2, 3], seed=0)
    path = tmp_path / "net.npz"
    save_checkpoint(net, path, {"format_version": 99})
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
