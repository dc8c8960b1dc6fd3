import numpy as np
import pytest

from pcnnsim import network as nw
from pcnnsim.devices import weighting_error
from pcnnsim.ocu import OcuConfig, conv2d_reference

IDEAL = OcuConfig.ideal()


def test_default_shapes():
    spec = nw.default_spec()
    assert spec.input_sizes() == [28, 13, 5]
    assert spec.output_shapes() == [(2, 13, 13), (4, 5, 5), (4, 3, 3)]
    assert spec.flatten_length == 36


def test_zero_image_gives_zero_ffv(trained_bundle):
    b = trained_bundle
    zero_bias = nw.WeightsBundle(b.spec, b.conv_weights, [np.zeros_like(x) for x in b.conv_biases],
                                 b.fc_weight, b.fc_bias)
    out = nw.forward_reference(np.zeros((28, 28)), zero_bias)
    assert not out["ffv"].any()
    assert out["scores"].sum() == pytest.approx(1.0)


def test_trained_kernels_nonnegative(trained_bundle):
    assert all((w >= 0).all() for w in trained_bundle.conv_weights)
    meta = trained_bundle.metadata
    assert meta["seed"] == 7 and meta["epochs"] == 10 and meta["final_train_accuracy"] >= 0.8


def test_forward_layer_one_matches_ocu_oracle(trained_bundle, mnist_test):
    img = mnist_test[0][0]
    b = trained_bundle
    out = nw.forward_reference(img, b)
    for k in range(2):
        z = conv2d_reference(img, b.conv_weights[0][k, 0]) + b.conv_biases[0][k]
        r = np.maximum(z, 0)[:26, :26].reshape(13, 2, 13, 2).max(axis=(1, 3))
        assert np.allclose(out["feature_maps"][0][k], r)


def test_batch_and_single_forward_agree(trained_bundle, mnist_test):
    imgs = mnist_test[0][:5]
    batch = nw.forward_reference_batch(imgs, trained_bundle)
    for img, f in zip(imgs, batch):
        assert np.allclose(nw.forward_reference(img, trained_bundle)["ffv"], f, atol=1e-12)


def test_ideal_photonic_ffv_equals_reference_plus_weighting_error(trained_bundle, mnist_test):
    img = mnist_test[0][3]
    b = trained_bundle
    maps = nw.map_bundle(b, IDEAL)
    phot = nw.forward_photonic(img, b, IDEAL, mappings=maps)
    realized = nw.forward_reference(img, nw.realized_bundle(b, maps))["ffv"]
    tol = 8 * phot["diagnostics"]["max_adc_half_step"] * 9 * 4
    assert np.abs(phot["ffv"] - realized).max() <= tol
    assert np.abs(phot["ffv"] - realized).max() < 1e-3 * np.abs(realized).max()


def test_realized_bundle_layer_one_is_weighting_error(trained_bundle, mnist_test):
    img = mnist_test[0][1]
    b = trained_bundle
    m = nw.map_bundle(b, OcuConfig())[0][0][0]
    delta = conv2d_reference(img, m.realized_kernel()) - conv2d_reference(img, b.conv_weights[0][0, 0])
    assert np.allclose(delta.ravel(), weighting_error(m, img), atol=1e-12)


def test_mesh_changes_time_not_values(trained_bundle, mnist_test):
    img = mnist_test[0][2]
    cfg = OcuConfig()
    a = nw.forward_photonic(img, trained_bundle, cfg)
    b = nw.forward_photonic(img, trained_bundle, cfg, nw.MeshSpec(4, 4))
    assert np.array_equal(a["ffv"], b["ffv"])
    assert a["diagnostics"]["periods"] == [2, 8, 16]
    assert b["diagnostics"]["periods"] == [1, 1, 1]


def test_mesh_schedule():
    spec = nw.default_spec()
    s = nw.mesh_schedule(spec, nw.MeshSpec(4, 4))
    assert s["utilization"] == [2 / 16, 8 / 16, 16 / 16]
    assert round(100 * s["average_utilization"]) == 54
    one = nw.mesh_schedule(spec, nw.MeshSpec(1, 1))
    assert one["periods"] == [2, 8, 16] and one["utilization"] == [1.0, 1.0, 1.0]
    big = nw.mesh_schedule(spec, nw.MeshSpec(8, 8))
    assert big["periods"] == [1, 1, 1]
    assert nw.MeshSpec.parse("2x3") == nw.MeshSpec(2, 3)
    with pytest.raises(ValueError):
        nw.MeshSpec(0, 4)


def test_training_is_deterministic(mnist_train):
    x, y = mnist_train[0][:300], mnist_train[1][:300]
    a = nw.train_reference(x, y, epochs=1, seed=3, min_accuracy=0.0)
    b = nw.train_reference(x, y, epochs=1, seed=3, min_accuracy=0.0)
    assert nw.bundle_bytes(a) == nw.bundle_bytes(b)


def test_single_class_dataset(mnist_train):
    x, y = mnist_train
    sel = y == 4
    b = nw.train_reference(x[sel][:200], y[sel][:200], epochs=1, seed=0)
    assert b.metadata["final_train_accuracy"] >= 0.99


def test_training_failure_is_reported(mnist_train):
    x, y = mnist_train[0][:64], mnist_train[1][:64]
    with pytest.raises(nw.TrainingFailedError):
        nw.train_reference(x, y, epochs=1, seed=0, lr=1e-9, min_accuracy=0.99)
    with pytest.raises(ValueError):
        nw.train_reference(x * 2, y, epochs=1)


def test_confusion_and_evaluate(trained_bundle, heldout):
    x, y, _ = heldout
    assert np.array_equal(nw.confusion_matrix(y, y), np.diag(np.bincount(y, minlength=10)))
    r = nw.evaluate(x, y, trained_bundle)
    assert r["confusion"].sum() == len(y)
    assert np.trace(r["confusion"]) / len(y) == pytest.approx(r["accuracy"])


def test_photonic_evaluation_is_reproducible_and_parallel_safe(trained_bundle, heldout):
    x, y, _ = heldout
    cfg = OcuConfig(noise_std=0.01)
    a = nw.photonic_ffvs(x[:4], trained_bundle, cfg, seed=5)
    b = nw.photonic_ffvs(x[:4], trained_bundle, cfg, seed=5, jobs=2)
    assert np.array_equal(a, b)


def test_calibrate_sigma(trained_bundle, mnist_test):
    img = mnist_test[0][0]
    assert nw.calibrate_sigma(img, trained_bundle, IDEAL, [0.3, 0.5, 0.7]) == 0.5
    assert nw.calibrate_sigma(img, trained_bundle, OcuConfig(), [0.2]) == 0.2
    with pytest.raises(ValueError):
        nw.calibrate_sigma(img, trained_bundle, IDEAL, [])


def test_bundle_round_trip(trained_bundle, tmp_path):
    nw.save_bundle(trained_bundle, tmp_path / "w.bin")
    back = nw.load_bundle(tmp_path / "w.bin")
    assert nw.bundle_bytes(back) == nw.bundle_bytes(trained_bundle)
    assert back.spec == trained_bundle.spec
    assert back.metadata == trained_bundle.metadata
    raw = (tmp_path / "w.bin").read_bytes()
    assert len(raw) == 8 * (18 + 2 + 72 + 4 + 144 + 4 + 360 + 10)
    first = np.frombuffer(raw[:8], "<f8")[0]
    assert first == trained_bundle.conv_weights[0][0, 0, 0, 0]
    (tmp_path / "w.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        nw.load_bundle(tmp_path / "w.bin")
