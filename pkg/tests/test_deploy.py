import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spongelab import data, deploy, models, training
from spongelab.deploy import QTensor

from test_models import tiny_m1, tiny_m2


@pytest.fixture(scope="module", params=["m1", "m2"])
def model(request):
    spec = tiny_m1() if request.param == "m1" else tiny_m2()
    params = models.init_params(spec, 3)
    rng = np.random.default_rng(0)
    for k in params:
        if ".b" in k:
            params[k] = rng.normal(0, 0.05, size=params[k].shape).astype(np.float32)
    calib = rng.uniform(0, 1, size=(16, *spec.input_shape)).astype(np.float32)
    return spec, params, calib


# -- quantization -----------------------------------------------------------------

def test_zero_tensor_quantizes_to_zero_point():
    qt = deploy.quantize_tensor(np.zeros((3, 4), np.float32))
    assert (qt.scale, qt.zero_point) == (1.0, 0)
    assert (qt.q == qt.zero_point).all()
    assert not qt.dequantize().any()


def test_symmetric_unit_range():
    x = np.array([-1.0, 0.0, 1.0], np.float32)
    qt = deploy.quantize_tensor(x)
    assert qt.scale == pytest.approx(2 / 255)
    assert qt.zero_point == 128 and qt.q[1] == 128
    assert abs(qt.dequantize()[1]) <= qt.scale / 2


def test_degenerate_tensor():
    qt = deploy.quantize_tensor(np.full(5, 0.7, np.float32))
    assert qt.scale > 0
    assert np.all(np.abs(qt.dequantize() - 0.7) <= qt.scale / 2 + 1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-5, 5))
def test_quantization_error_bound(seed, spread, shift):
    x = (np.random.default_rng(seed).normal(size=50) * spread + shift).astype(np.float32)
    qt = deploy.quantize_tensor(x)
    assert 0 <= qt.zero_point <= 255
    assert np.all(np.abs(qt.dequantize() - x) <= qt.scale / 2 + 1e-6 * max(1.0, np.abs(x).max()))


def test_zero_is_exact_after_dequantize():
    x = np.random.default_rng(1).normal(size=100).astype(np.float32)
    qt = deploy.quantize_tensor(x)
    zero_code = qt.zero_point
    assert QTensor(np.array([zero_code], np.uint8), qt.scale, qt.zero_point).dequantize()[0] == 0.0


def test_quantize_requires_calibration(model):
    spec, params, _ = model
    with pytest.raises(ValueError):
        deploy.quantize_post_training(spec, params, np.zeros((0, *spec.input_shape), np.float32))


def test_quantized_zero_model_gives_zero_logits(model):
    spec, params, calib = model
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    q = deploy.quantize_post_training(spec, zero, calib)
    logits, _ = deploy.quantized_forward(q, calib)
    assert not logits.any()


def test_quantized_model_tracks_float(quick, synth_task):
    spec = quick.build_model("m1")
    params, _ = training.train(spec, synth_task, quick.train)
    test = data.synth_dataset(42, 500, quick.data.classes, quick.data.shape, quick.data.noise,
                              "test", means_seed=0)
    q = deploy.quantize_post_training(spec, params, synth_task[1].images[:64])
    f_logits, f_trace = models.forward(spec, params, test.images, record_trace=True)
    q_logits, q_trace = deploy.quantized_forward(q, test.images, record_trace=True)
    assert (f_logits.argmax(1) == q_logits.argmax(1)).mean() >= 0.95
    assert abs(f_trace.density() - q_trace.density()) <= 0.05


# -- .smod format -----------------------------------------------------------------------

def _expected_size(spec, tensors, ranges):
    desc = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    size = 4 + 2 + 1 + 2 + len(spec.name.encode()) + 4 + len(desc) + 4
    for name, (arr, itemsize) in tensors.items():
        size += 2 + len(name) + 1 + 1 + 4 * arr.ndim + 4 + 1 + 4 + arr.size * itemsize
    size += 4 + sum(2 + len(n) + 8 for n in ranges)
    return size


def test_float_round_trip_and_size(model):
    spec, params, _ = model
    blob = deploy.export(spec, params)
    spec2, params2 = deploy.import_model(blob)
    assert spec2 == spec
    assert all(np.array_equal(params[k], params2[k]) for k in params)
    assert deploy.export(spec2, params2) == blob
    assert len(blob) == _expected_size(spec, {k: (v, 4) for k, v in params.items()}, {})


def test_quantized_round_trip_and_size(model):
    spec, params, calib = model
    q = deploy.quantize_post_training(spec, params, calib)
    blob = deploy.export(spec, q)
    spec2, q2 = deploy.import_model(blob)
    assert isinstance(q2, deploy.QuantizedModel)
    assert deploy.export(spec2, q2) == blob
    for k, qt in q.weights.items():
        assert np.array_equal(qt.q, q2.weights[k].q)
        assert (qt.scale, qt.zero_point) == (np.float32(q2.weights[k].scale), q2.weights[k].zero_point)
    tensors = {k: (qt.q, 1) for k, qt in q.weights.items()}
    tensors.update({k: (b, 4) for k, b in q.biases.items()})
    assert len(blob) == _expected_size(spec, tensors, q.act_ranges)
    np.testing.assert_array_equal(deploy.quantized_forward(q, calib)[0], deploy.quantized_forward(q2, calib)[0])


def test_save_load(tmp_path, model):
    spec, params, _ = model
    deploy.save(tmp_path / "m.smod", spec, params)
    spec2, params2 = deploy.load(tmp_path / "m.smod")
    assert spec2 == spec and all(np.array_equal(params[k], params2[k]) for k in params)


def test_bad_magic(model):
    blob = bytearray(deploy.export(*model[:2]))
    blob[0:4] = b"XMOD"
    with pytest.raises(deploy.BadMagic):
        deploy.import_model(bytes(blob))


def test_bad_version(model):
    blob = bytearray(deploy.export(*model[:2]))
    blob[4:6] = struct.pack("<H", 99)
    with pytest.raises(deploy.UnsupportedVersion):
        deploy.import_model(bytes(blob))


def test_truncation_everywhere(model):
    spec, params, calib = model
    blob = deploy.export(spec, deploy.quantize_post_training(spec, params, calib))
    for cut in range(0, len(blob), max(1, len(blob) // 300)):
        with pytest.raises(deploy.TruncatedModel):
            deploy.import_model(blob[:cut])


def test_trailing_bytes_rejected(model):
    with pytest.raises(deploy.SmodError):
        deploy.import_model(deploy.export(*model[:2]) + b"\x00")


def test_invalid_scale(model):
    spec, params, calib = model
    q = deploy.quantize_post_training(spec, params, calib)
    name = next(iter(q.weights))
    q.weights[name] = QTensor(q.weights[name].q, 0.0, q.weights[name].zero_point)
    with pytest.raises(deploy.InvalidScale):
        deploy.import_model(deploy.export(spec, q))


def test_error_classes_are_distinct():
    classes = {deploy.BadMagic, deploy.UnsupportedVersion, deploy.TruncatedModel, deploy.InvalidScale}
    assert len(classes) == 4 and all(issubclass(c, deploy.SmodError) for c in classes)
