"""Model construction, forward taps, input gradients, checkpoints."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import assert_grad_close, finite_difference_grad, rand_batch
from satlab.data import ImageBatch
from satlab.errors import ConfigurationError, FormatError, NumericError, ShapeError
from satlab.models import (
    CHECKPOINT_MAGIC,
    build_model,
    forward,
    grad_input,
    load_checkpoint,
    predict_classes,
    save_checkpoint,
)


def np_conv3x3(x, weight, bias):
    """Straight-line 3x3 same-padding convolution (oracle, no vectorizing)."""
    cin, h, w = x.shape
    cout = weight.shape[0]
    pad = np.zeros((cin, h + 2, w + 2), dtype=np.float64)
    pad[:, 1:-1, 1:-1] = x
    out = np.zeros((cout, h, w), dtype=np.float64)
    for co in range(cout):
        for i in range(h):
            for j in range(w):
                acc = bias[co]
                for ci in range(cin):
                    for di in range(3):
                        for dj in range(3):
                            acc += weight[co, ci, di, dj] * pad[ci, i + di, j + dj]
                out[co, i, j] = acc
    return out


def np_maxpool2(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=np.float64)
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ch, i, j] = x[ch, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return out


def test_linear_model_tap_is_the_flattened_input():
    model = build_model("linear", in_shape=(3, 4, 4), num_classes=2, seed=0)
    batch = rand_batch(0, b=3, shape=(3, 4, 4))
    taps = forward(model, batch)
    expect = batch.pixels.reshape(3, -1, 1, 1)
    assert torch.equal(taps.taps["flat"], expect)
    assert torch.equal(taps.penultimate(), expect)


def test_zeroed_linear_model_outputs_zero_logits():
    model = build_model("linear", in_shape=(3, 4, 4), num_classes=5, seed=0)
    with torch.no_grad():
        model.fc.weight.zero_()
        model.fc.bias.zero_()
    taps = forward(model, rand_batch(1, b=2, shape=(3, 4, 4), classes=5))
    assert torch.equal(taps.logits, torch.zeros(2, 5))


def test_tiny_cnn_matches_layer_by_layer_recomputation():
    model = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=3, seed=4,
                        width=2, hidden=5)
    batch = rand_batch(4, b=2, shape=(3, 8, 8), classes=3)
    taps = forward(model, batch)

    state = {k: v.detach().numpy().astype(np.float64)
             for k, v in model.state_dict().items()}
    for s in range(len(batch)):
        x = batch.pixels[s].numpy().astype(np.float64)
        for stage in range(3):
            w = state[f"convs.{stage}.weight"]
            b = state[f"convs.{stage}.bias"]
            x = np.maximum(np_conv3x3(x, w, b), 0.0)
            x = np_maxpool2(x)
        flat = x.reshape(-1)
        penult = np.maximum(state["hidden.weight"] @ flat + state["hidden.bias"], 0.0)
        logits = state["fc.weight"] @ penult + state["fc.bias"]
        np.testing.assert_allclose(taps.logits[s].detach().numpy(), logits,
                                   atol=1e-5)
        np.testing.assert_allclose(
            taps.taps["penult"][s].detach().flatten().numpy(), penult, atol=1e-5)


def test_tiny_cnn_tap_shapes_halve_per_stage():
    model = build_model("tiny-cnn", in_shape=(3, 32, 32), num_classes=10, seed=0,
                        width=4, hidden=8)
    taps = forward(model, rand_batch(2, b=1, shape=(3, 32, 32), classes=10))
    assert taps.taps["stage1"].shape == (1, 4, 16, 16)
    assert taps.taps["stage2"].shape == (1, 8, 8, 8)
    assert taps.taps["stage3"].shape == (1, 16, 4, 4)
    assert taps.taps["penult"].shape == (1, 8, 1, 1)


def test_small_resnet_taps_and_logits_shape():
    model = build_model("small-resnet", in_shape=(3, 16, 16), num_classes=4, seed=2,
                        width=4)
    taps = forward(model, rand_batch(3, b=2, shape=(3, 16, 16), classes=4))
    assert tuple(taps.taps) == ("block1", "block2", "block3", "penult")
    assert taps.taps["block1"].shape == (2, 4, 16, 16)
    assert taps.taps["block2"].shape == (2, 8, 8, 8)
    assert taps.taps["block3"].shape == (2, 16, 4, 4)
    assert taps.logits.shape == (2, 4)


def test_build_model_seed_determinism():
    a = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=2, seed=9, width=2)
    b = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=2, seed=9, width=2)
    c = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=2, seed=10, width=2)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert any(not torch.equal(va, vc)
               for va, vc in zip(a.state_dict().values(), c.state_dict().values()))


def test_build_model_unknown_architecture():
    with pytest.raises(ConfigurationError):
        build_model("mlp-mixer")


def test_forward_rejects_shape_mismatch():
    model = build_model("linear", in_shape=(3, 8, 8), num_classes=2, seed=0)
    with pytest.raises(ShapeError):
        forward(model, rand_batch(0, b=2, shape=(3, 4, 4)))


def test_grad_input_zero_for_constant_loss():
    model = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=2, seed=0, width=2)
    batch = rand_batch(5, b=2)
    grad = grad_input(model, lambda taps: torch.tensor(3.5), batch)
    assert torch.equal(grad, torch.zeros_like(batch.pixels))


def test_grad_input_scales_linearly_with_loss():
    model = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=3, seed=1, width=2)
    batch = rand_batch(6, b=2, classes=3)
    loss = lambda taps: F.cross_entropy(taps.logits, batch.labels)
    g1 = grad_input(model, loss, batch)
    g2 = grad_input(model, lambda taps: 2.0 * loss(taps), batch)
    assert torch.equal(g2, 2.0 * g1)


def test_grad_input_matches_finite_differences():
    model = build_model("tiny-cnn", in_shape=(3, 4, 4), num_classes=3, seed=2,
                        width=2, hidden=4, dtype=torch.float64)
    batch = rand_batch(7, b=2, shape=(3, 4, 4), classes=3, dtype=torch.float64)
    loss = lambda taps: F.cross_entropy(taps.logits, batch.labels)
    analytic = grad_input(model, loss, batch)
    numeric = finite_difference_grad(
        lambda x: F.cross_entropy(model(x).logits, batch.labels), batch.pixels)
    assert_grad_close(analytic, numeric)


def test_grad_input_flags_non_finite_loss():
    model = build_model("linear", in_shape=(3, 4, 4), num_classes=2, seed=0)
    pixels = torch.zeros(3, 3, 4, 4)
    pixels[1] = float("inf")
    batch = ImageBatch(pixels, torch.tensor([0, 1, 0]))
    with pytest.raises(NumericError, match=r"\[1\]"):
        grad_input(model, lambda taps: taps.logits.sum(), batch)


def test_predict_classes_breaks_ties_low():
    logits = torch.tensor([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0], [3.0, 1.0, 3.0]])
    assert predict_classes(logits).tolist() == [0, 1, 0]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = build_model("tiny-cnn", in_shape=(3, 8, 8), num_classes=3, seed=5, width=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extra={"note": "round-trip"})
    clone, header = load_checkpoint(path)
    assert header["extra"]["note"] == "round-trip"
    assert clone.arch_spec == model.arch_spec
    for (ka, va), (kb, vb) in zip(model.state_dict().items(),
                                  clone.state_dict().items()):
        assert ka == kb
        assert va.numpy().tobytes() == vb.numpy().tobytes()
    batch = rand_batch(8, b=2, classes=3)
    assert torch.equal(forward(model, batch).logits, forward(clone, batch).logits)


def test_checkpoint_preserves_double_precision(tmp_path):
    model = build_model("linear", in_shape=(3, 4, 4), num_classes=2, seed=0,
                        dtype=torch.float64)
    path = tmp_path / "d.ckpt"
    save_checkpoint(model, path)
    clone, _ = load_checkpoint(path)
    assert clone.fc.weight.dtype == torch.float64
    assert torch.equal(clone.fc.weight, model.fc.weight)


def test_checkpoint_rejects_foreign_bytes(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"PNGXXXXX" + bytes(64))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    model = build_model("linear", in_shape=(3, 4, 4), num_classes=2, seed=0)
    good = tmp_path / "good.ckpt"
    save_checkpoint(model, good)
    blob = bytearray(good.read_bytes())
    blob[: len(CHECKPOINT_MAGIC)] = b"SATCKPT9"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(bad)
