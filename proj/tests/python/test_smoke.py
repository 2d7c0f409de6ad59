"""Smoke tests for the python bindings: numpy interop, a few op values,
autodiff, the gradient-check battery, and a dataset round trip."""

import hashlib
import math
import pathlib
import tempfile

import numpy as np
import pytest

import protodet as pd


def test_tensor_numpy_round_trip():
    a = np.arange(12, dtype=np.float64).reshape(3, 4)
    t = pd.Tensor(a)
    assert t.shape == [3, 4]
    np.testing.assert_array_equal(t.numpy(), a)


def test_matmul_matches_numpy():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 3))
    b = rng.normal(size=(3, 4))
    out = pd.matmul(pd.Tensor(a), pd.Tensor(b)).numpy()
    np.testing.assert_allclose(out, a @ b, atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = pd.Tensor(np.random.default_rng(3).normal(size=(4, 6)))
    s = pd.softmax(x, 1).numpy()
    np.testing.assert_allclose(s.sum(axis=1), np.ones(4), atol=1e-12)
    assert (s > 0).all() and (s < 1).all()


def test_conv2d_identity_kernel():
    x = np.random.default_rng(5).normal(size=(2, 4, 4))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0, 0, 0] = 1.0
    w[1, 1, 0, 0] = 1.0
    out = pd.conv2d(pd.Tensor(x), pd.Tensor(w), pd.Tensor(np.zeros(2))).numpy()
    np.testing.assert_array_equal(out, x)


def test_backward_product_rule():
    x = pd.Tensor(np.array([5.0]), requires_grad=True)
    y = pd.hadamard(x, x)
    y.backward()
    assert x.grad()[0] == pytest.approx(10.0)


def test_cross_entropy_uniform():
    logits = pd.Tensor(np.zeros((1, 4)))
    assert pd.cross_entropy(logits, [2]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cosine_map_range():
    v = pd.Tensor(np.random.default_rng(9).normal(size=4))
    x = pd.Tensor(np.random.default_rng(10).normal(size=(4, 3, 3)))
    cm = pd.cosine_map(v, x).numpy()
    assert (np.abs(cm) <= 1 + 1e-9).all()


def test_coupling_attention_rows():
    rng = np.random.default_rng(11)
    x_q = pd.Tensor(rng.uniform(0.1, 1.0, size=(3, 2, 2)))
    x_s = pd.Tensor(rng.uniform(0.1, 1.0, size=(3, 2, 2)))
    feature, condition, attention = pd.coupling_forward(x_q, x_s, embed_dim=2, seed=3)
    att = attention.numpy()
    np.testing.assert_allclose(att.sum(axis=1), np.ones(4), atol=1e-9)
    cond = condition.numpy()
    assert (cond >= 0).all() and (cond <= 1).all()
    assert feature.shape == [3, 2, 2]


def test_intra_inter_dam():
    feat = pd.Tensor(np.full((1, 1, 2), [2.0, 4.0]))
    v, weights = pd.intra_dam(feat, alpha=1.0)
    assert v.item() == pytest.approx(6.0)
    protos = [pd.Tensor(np.array([2.0])), pd.Tensor(np.array([4.0]))]
    fused, contributions = pd.inter_dam(protos, seed=1)
    assert len(contributions) == 2
    assert all(0 < c < 1 for c in contributions)


def test_voc_ap_hand_trace():
    gts = {0: [[0, 0, 10, 10], [30, 30, 40, 40]]}
    dets = [
        (0.9, 0, [0, 0, 10, 10]),
        (0.8, 0, [15, 15, 25, 25]),
        (0.7, 0, [30, 30, 40, 40]),
    ]
    assert pd.voc_ap(dets, gts) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert pd.iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7, abs=1e-12)


def test_grad_check_ops_scope():
    ok, summary, max_err = pd.run_grad_check("ops")
    assert ok, summary
    assert max_err <= 1e-4


def test_gen_data_deterministic(tmp_path):
    def digest(out_dir):
        h = hashlib.sha256()
        for p in sorted(pathlib.Path(out_dir).rglob("*")):
            if p.is_file():
                h.update(p.relative_to(out_dir).as_posix().encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    opts = {
        "dataset.train_images": "6",
        "dataset.eval_images": "2",
        "dataset.supports_per_class": "1",
        "run.seed": "77",
    }
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert pd.run("gen-data", {**opts, "run.out": str(a)})
    assert pd.run("gen-data", {**opts, "run.out": str(b)})
    manifest = (a / "dataset" / "manifest.txt").read_text()
    assert manifest.startswith("# protodet-dataset v1")
    assert digest(a / "dataset") == digest(b / "dataset")


def test_run_rejects_unknown_options(tmp_path):
    with pytest.raises(ValueError):
        pd.run("gen-data", {"dataset.bogus": "1", "run.out": str(tmp_path)})
    with pytest.raises(ValueError):
        pd.run("explode", {})
