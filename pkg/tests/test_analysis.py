import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcnnsim import analysis as an
from pcnnsim import network as nw
from pcnnsim.ocu import OcuConfig

SPEC = nw.default_spec()


def brute_force_ops(spec):
    ops = 0
    for layer, m in zip(spec.layers, spec.input_sizes()):
        k = m - layer.size + 1
        for _ in range(layer.kernels):
            for _ in range(layer.in_channels):
                for _ in range(k * k):
                    for _ in range(layer.size**2):
                        ops += 2
    return ops


# -- error statistics ------------------------------------------------------------

def test_extract_error():
    p, r, w = np.arange(36.0), np.arange(36.0) * 0.5, np.arange(36.0) * 0.5
    assert not an.extract_error(p, r, w).any()
    with pytest.raises(ValueError):
        an.extract_error(np.zeros(36), np.zeros(35), np.zeros(36))


def test_gaussian_fit():
    assert an.gaussian_fit([3.0, 3.0, 3.0]) == (3.0, 0.0)
    mean, std = an.gaussian_fit([-1.0, 1.0])
    assert mean == 0.0 and std == pytest.approx(math.sqrt(2))
    draws = np.random.default_rng(0).normal(0.3, 0.05, 100_000)
    mean, std = an.gaussian_fit(draws)
    assert mean == pytest.approx(0.3, rel=0.01) and std == pytest.approx(0.05, rel=0.01)
    with pytest.raises(ValueError):
        an.gaussian_fit([1.0])


def test_inject_errors(trained_bundle, heldout):
    x, y, _ = heldout
    base = nw.forward_reference_batch(x, trained_bundle)
    ref = np.mean(trained_bundle.classify(base).argmax(axis=1) == y)
    accs = an.inject_errors(base, y, trained_bundle, (0.0, 0.0), trials=3, seed=1)
    assert np.all(accs == ref)
    noisy = an.inject_errors(base, y, trained_bundle, (0.0, 100 * np.abs(base).max()), trials=20, seed=1)
    assert abs(noisy.mean() - 0.1) < 0.05
    again = an.inject_errors(base, y, trained_bundle, (0.1, 0.5), trials=10, seed=4)
    assert again.shape == (10,)
    assert np.array_equal(again, an.inject_errors(base, y, trained_bundle, (0.1, 0.5), trials=10, seed=4))
    with pytest.raises(ValueError):
        an.inject_errors(base, y, trained_bundle, (0, 1), trials=0)


def test_injected_accuracy_falls_with_noise(trained_bundle, heldout):
    x, y, _ = heldout
    base = nw.forward_reference_batch(x, trained_bundle)
    scale = np.abs(base).max()
    means = [an.inject_errors(base, y, trained_bundle, (0.0, s * scale), 20, 3).mean()
             for s in (0.0, 0.05, 0.2, 1.0)]
    assert all(b <= a + 0.02 for a, b in zip(means, means[1:]))


# -- timing ------------------------------------------------------------------------

def test_conv_time():
    assert an.conv_time(28, 10e9) == pytest.approx(84.2e-9)
    assert 2 * an.conv_time(28, 10e9) == pytest.approx(170e-9, rel=0.01)
    assert an.conv_time(13, 10e9) == pytest.approx(19.7e-9)
    assert an.conv_time(13, 20e9) == pytest.approx(an.conv_time(13, 10e9) / 2)
    assert an.conv_time(5, 10e9, 1e-10) == pytest.approx(an.conv_time(5, 10e9) + 1e-10)
    with pytest.raises(ValueError):
        an.conv_time(5, 0.0)


def test_op_count():
    assert an.op_count(SPEC) == 44352 == brute_force_ops(SPEC)
    one = nw.NetworkSpec((nw.ConvLayerSpec(1, 1, 1, False),), input_size=9)
    assert an.op_count(one) == 2 * 81


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 3), st.booleans()), min_size=1, max_size=3),
       st.integers(12, 30))
def test_op_count_matches_enumeration(layers, size):
    specs, c = [], 1
    for k, n, pool in layers:
        specs.append(nw.ConvLayerSpec(k, n, c, pool))
        c = k
    spec = nw.NetworkSpec(tuple(specs), input_size=size)
    if any(m < l.size for l, m in zip(spec.layers, spec.input_sizes())):
        return
    assert an.op_count(spec) == brute_force_ops(spec)


def test_table_one_row():
    row = an.throughput_table(SPEC, [10e9])[0]
    ref = an.REFERENCE_SERIAL[10e9]
    assert row.periods == [2, 8, 16]
    assert row.total_time == pytest.approx(sum(row.layer_times))
    assert row.speed == pytest.approx(row.ops / row.total_time)
    assert row.total_time == pytest.approx(ref["total"], rel=0.05)
    assert row.speed == pytest.approx(ref["speed_average"], rel=0.05)


def test_table_two_row():
    row = an.throughput_table(SPEC, [10e9], nw.MeshSpec(4, 4))[0]
    ref = an.REFERENCE_MESH[10e9]
    assert row.total_time == pytest.approx(ref["total"], rel=0.05)
    assert row.speed == pytest.approx(ref["speed_utilized"], rel=0.05)
    assert row.utilization == pytest.approx(26 / 48)


def test_doubling_periods_doubles_time():
    # twice the kernels per layer means twice the serial periods
    doubled = nw.NetworkSpec(tuple(nw.ConvLayerSpec(l.kernels * 2, l.size, l.in_channels, l.pool)
                                   for l in SPEC.layers[:1]))
    single = nw.NetworkSpec(SPEC.layers[:1])
    a = an.throughput_table(single, [10e9])[0]
    b = an.throughput_table(doubled, [10e9])[0]
    assert b.total_time == pytest.approx(2 * a.total_time, rel=1e-15)


def test_memory_model():
    assert an.memory_model(3, 2)["tma_electronic"] == 8
    assert an.memory_model(3, 2)["tma_photonic"] == 2
    assert an.memory_model(28, 3)["tma_electronic"] == 1352
    assert {an.memory_model(m, 3)["tma_photonic"] for m in range(5, 101)} == {2}
    r = an.memory_model(4000, 3)["tma_electronic"] / an.memory_model(2000, 3)["tma_electronic"]
    assert r == pytest.approx(4, rel=0.01)
    for m in range(5, 101):
        mm = an.memory_model(m, 3)
        assert mm["buffer_photonic"] < mm["buffer_electronic"]
    with pytest.raises(ValueError):
        an.memory_model(3, 3)


# -- sweeps --------------------------------------------------------------------

def test_precision_sweep_grid(trained_bundle, heldout):
    x, y, _ = heldout
    rows = an.precision_sweep([100, 250], [4, 6, 10, 16], "full-range", x[:100], y[:100], trained_bundle)
    assert len(rows) == 8
    cell = {(r["finesse"], r["bits"]): r for r in rows}
    for f in (100.0, 250.0):
        assert cell[f, 16]["accuracy"] == cell[f, 16]["reference_accuracy"]
        assert cell[f, 4]["mean_abs_residual"] > cell[f, 10]["mean_abs_residual"]
        assert cell[f, 10]["mean_precision_qlr_bits"] > cell[f, 6]["mean_precision_qlr_bits"]
    assert cell[100.0, 10]["mean_precision_qlr_bits"] > cell[250.0, 10]["mean_precision_qlr_bits"]
    q = an.precision_sweep([100], [8], "quasi-linear", x[:20], y[:20], trained_bundle)
    assert len(q) == 1 and q[0]["mode"] == "quasi-linear"
    with pytest.raises(ValueError):
        an.precision_sweep([], [8], "full-range", x, y, trained_bundle)


def test_baud_sweep_ideal_errors_are_quantisation_sized(trained_bundle, heldout):
    x, y, _ = heldout
    stats = an.baud_sweep([10e9], x[:2], trained_bundle, OcuConfig.ideal(adc_bits=10, dac_bits=10))
    s = stats[0]
    assert s.samples.size == 72 and np.isnan(s.accuracy_mean)
    assert s.std <= 0.05 * np.abs(nw.forward_reference_batch(x[:2], trained_bundle)).max()


def test_baud_sweep_counts_and_seeds(trained_bundle, heldout):
    x, y, _ = heldout
    kw = dict(eval_images=x[:50], eval_labels=y[:50], trials=4, seed=2)
    a = an.baud_sweep([15e9], x[100:110], trained_bundle, OcuConfig(), **kw)
    b = an.baud_sweep([15e9], x[100:110], trained_bundle, OcuConfig(), **kw)
    assert a[0].samples.size == 360
    assert a[0].accuracies.size == 4
    assert np.array_equal(a[0].accuracies, b[0].accuracies)
    with pytest.raises(ValueError):
        an.baud_sweep([], x[:1], trained_bundle, OcuConfig())


def test_emitters():
    rows = [{"a": 1, "b": 2.5}, {"a": 3, "b": -1.0}]
    text = an.rows_to_csv(rows)
    assert text.endswith("\n") and "\r" not in text
    assert list(csv.DictReader(io.StringIO(text)))[1] == {"a": "3", "b": "-1.0"}
    assert json.loads(an.rows_to_json(rows)) == rows
    assert an.rows_to_csv([]) == ""
    s = an.ErrorStats(5e9, np.zeros(36), 0.0, 0.0, np.array([0.5, 0.7]))
    (row,) = an.error_stats_rows([s])
    assert row["n_samples"] == 36 and row["accuracy_mean"] == pytest.approx(0.6)
