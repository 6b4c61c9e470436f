import copy
import json

import numpy as np
import pytest

from src.slimdet.errors import ArchiveError, ManifestError, ShapeMismatchError
from src.slimdet.metrics.accounting import count_flops, count_params
from src.slimdet.nets.data import load_dataset, make_classification, make_detection, save_dataset
from src.slimdet.nets.layers import Parameter
from src.slimdet.nets.losses import softmax_cross_entropy, yolo_loss
from src.slimdet.nets.manifest import LayerManifest, LayerSpec, load_manifest, manifest_from_json
from src.slimdet.nets.models import GraphNet, backward, forward, tiny_classifier, tiny_detector
from src.slimdet.nets.optim import SGD
from src.slimdet.sparsity import SparsityMode, constraint_from_ratios, project
from src.slimdet.tensor_core import to_gemm


def _conv(name=None, **kw) -> dict:
    return {"name": name, "kind": "conv", "KH": 3, "KW": 3, "stride": 1, "prunable": True, **kw}


def _fd_check(net: GraphNet, x: np.ndarray, seed: int, per_param: int = 3, eps: float = 1e-6) -> None:
    """Compare backward() against central differences of L = sum(out * r)."""
    rng = np.random.default_rng(seed)
    out = net.forward(x)
    r = rng.normal(size=out.shape)
    grads = backward(net, r)

    def loss() -> float:
        return float(np.sum(net.forward(x) * r))

    for name, p in net.named_parameters().items():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            assert grads[name].reshape(-1)[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name


# ---------- Forward / backward ----------

def test_detector_head_shape_for_320_input():
    net = tiny_detector(seed=0, image_size=320)
    out = forward(net, np.zeros((2, 1, 320, 320), dtype=np.float32))
    assert out.shape == (2, 10, 10, 18)


def test_zero_network_gives_zero_logits():
    net = tiny_classifier(seed=0)
    for p in net.named_parameters().values():
        p.data[...] = 0
    out = net.forward(np.zeros((3, 1, 16, 16), dtype=np.float32))
    assert out.shape == (3, 4, 1, 1)
    assert not out.any()


def test_zero_output_gradient_gives_zero_gradients():
    net = tiny_classifier(seed=1)
    out = net.forward(np.random.default_rng(0).normal(size=(2, 1, 16, 16)))
    grads = backward(net, np.zeros_like(out))
    assert all(not g.any() for g in grads.values())


def test_single_1x1_conv_matches_hand_gradient():
    spec = LayerSpec(kind="conv", F=1, C=1, H_out=1, W_out=1, activation="linear")
    net = GraphNet(LayerManifest(layers=[spec]), seed=0).to(np.float64)
    conv = net.conv_layers()[0]
    conv.weight.data[...] = 1.5
    x, y = 2.0, 1.0
    out = net.forward(np.full((1, 1, 1, 1), x))
    grads = backward(net, 2.0 * (out - y))
    assert grads["conv0.weight"].item() == pytest.approx(2 * (1.5 * x - y) * x)
    assert grads["conv0.bias"].item() == pytest.approx(2 * (1.5 * x - y))


@pytest.mark.parametrize("seed", range(20))
def test_classifier_gradients_match_finite_differences(seed):
    net = tiny_classifier(seed=seed).to(np.float64)
    x = np.random.default_rng(100 + seed).normal(size=(2, 1, 16, 16))
    _fd_check(net, x, seed)


@pytest.mark.parametrize("seed", range(3))
def test_detector_gradients_match_finite_differences(seed):
    net = tiny_detector(seed=seed, image_size=64).to(np.float64)
    x = np.random.default_rng(200 + seed).normal(size=(2, 1, 64, 64))
    _fd_check(net, x, seed, per_param=2)


def test_upsample_and_route_gradients():
    layers = [
        _conv(F=4, C=1, H_out=8, W_out=8, prunable=False),
        {"kind": "upsample", "F": 4, "C": 4, "H_out": 16, "W_out": 16},
        _conv(F=4, C=4, stride=2, H_out=8, W_out=8),
        {"kind": "route", "F": 8, "C": 8, "H_out": 8, "W_out": 8, "inputs": [2, 0]},
        _conv(F=2, C=8, KH=1, KW=1, H_out=8, W_out=8, activation="linear"),
    ]
    net = GraphNet(manifest_from_json(json.dumps(layers)), seed=0).to(np.float64)
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    _fd_check(net, x, seed=0, per_param=4)


def test_input_gradient_matches_finite_differences():
    net = tiny_classifier(seed=4).to(np.float64)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 16, 16))
    r = rng.normal(size=net.forward(x).shape)
    net.zero_grad()
    dx = net.backward(r)
    eps = 1e-6
    for idx in [(0, 0, 3, 4), (0, 0, 10, 12), (0, 0, 15, 0)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        numeric = (np.sum(net.forward(xp) * r) - np.sum(net.forward(xm) * r)) / (2 * eps)
        assert dx[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_forward_rejects_wrong_input_shape():
    with pytest.raises(ShapeMismatchError):
        tiny_classifier().forward(np.zeros((1, 1, 8, 8)))


# ---------- Compaction ----------

@pytest.mark.parametrize("mode", [SparsityMode.filter, SparsityMode.column, SparsityMode.combined])
def test_compacted_forward_matches_masked_dense(mode):
    net = tiny_classifier(seed=2)
    masks = {}
    for layer in net.prunable_layers():
        rows, cols = layer.spec.gemm_shape
        c = constraint_from_ratios(rows, cols, mode, filter_ratio=2, column_ratio=2)
        masks[layer.name] = project(to_gemm(layer.weight.data), c)[1]

    dense = copy.deepcopy(net)
    for name, mask in masks.items():
        w = dense.layer(name).weight
        w.data = np.where(mask.reshape(w.data.shape), w.data, 0).astype(w.data.dtype)
    compacted = net.compacted(masks)

    x = np.random.default_rng(9).normal(size=(100, 1, 16, 16)).astype(np.float32)
    a, b = dense.forward(x), compacted.forward(x)
    assert np.max(np.abs(a - b)) <= 1e-4 * max(1.0, float(np.max(np.abs(a))))
    for name in masks:
        c = compacted.layer(name).compacted
        assert c.dense.size == int(masks[name].sum())


# ---------- Parameters and optimizer ----------

def test_state_dict_round_trip():
    a, b = tiny_classifier(seed=0), tiny_classifier(seed=1)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(0).normal(size=(2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(a.forward(x), b.forward(x))
    with pytest.raises(ShapeMismatchError):
        b.load_state_dict({"conv0.weight": np.zeros(1)})


def test_sgd_keeps_masked_weights_at_zero():
    p = Parameter(np.array([[1.0, 0.0], [0.0, 2.0]]))
    mask = p.data != 0
    opt = SGD({"w.weight": p}, momentum=0.9, weight_decay=1e-3)
    for _ in range(5):
        p.grad[...] = 1.0
        opt.step(0.1, {"w.weight": mask})
    assert np.array_equal(p.data != 0, mask)


def test_seeded_init_is_deterministic():
    a, b = tiny_detector(seed=5), tiny_detector(seed=5)
    assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())


# ---------- Losses ----------

def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 4))
    targets = np.eye(4)[[0, 2, 3]] * 0.7 + np.eye(4)[[1, 1, 0]] * 0.3
    _, grad = softmax_cross_entropy(logits, targets)
    eps = 1e-6
    for idx in [(0, 0), (1, 2), (2, 3)]:
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += eps
        lm[idx] -= eps
        numeric = (softmax_cross_entropy(lp, targets)[0] - softmax_cross_entropy(lm, targets)[0]) / (2 * eps)
        assert grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-8)


def test_yolo_loss_gradient():
    rng = np.random.default_rng(1)
    pred = rng.normal(size=(2, 3, 3, 18))
    boxes = [np.array([[10.0, 12.0, 40.0, 50.0]]), np.array([[60.0, 5.0, 90.0, 30.0], [0.0, 0.0, 20.0, 20.0]])]
    weights = [np.ones(1), np.array([0.6, 0.4])]
    anchors = np.array([[16.0, 16.0], [32.0, 32.0], [48.0, 24.0]])
    _, grad = yolo_loss(pred, boxes, weights, anchors, stride=32)
    eps = 1e-6
    for idx in [(0, 0, 0, 4), (0, 0, 1, 0), (0, 1, 0, 2), (1, 1, 1, 4), (1, 0, 2, 5), (1, 0, 0, 9)]:
        pp, pm = pred.copy(), pred.copy()
        pp[idx] += eps
        pm[idx] -= eps
        numeric = (yolo_loss(pp, boxes, weights, anchors, 32)[0] - yolo_loss(pm, boxes, weights, anchors, 32)[0]) / (2 * eps)
        assert grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


# ---------- Manifests ----------

def test_one_layer_manifest_is_valid():
    m = manifest_from_json(json.dumps([_conv(F=4, C=3, H_out=8, W_out=8)]))
    assert m.layers[0].name == "conv0"
    assert m.input_shape == (3, 8, 8)
    assert [l.name for l in m.prunable_layers()] == ["conv0"]


def test_channel_mismatch_names_the_layer():
    layers = [_conv(F=4, C=3, H_out=8, W_out=8), _conv(F=8, C=5, H_out=8, W_out=8)]
    with pytest.raises(ManifestError) as e:
        manifest_from_json(json.dumps(layers))
    assert e.value.layer == 1


@pytest.mark.parametrize("layers", [
    [_conv(F=4, C=3, H_out=8, W_out=8), _conv(F=4, C=4, stride=2, H_out=8, W_out=8)],
    [_conv("a", F=4, C=3, H_out=8, W_out=8), _conv("a", F=4, C=4, H_out=8, W_out=8)],
    [_conv(F=4, C=3, H_out=8, W_out=8), {"kind": "detect", "F": 4, "C": 4, "H_out": 8, "W_out": 8}],
    [_conv(F=4, C=3, H_out=8, W_out=8), {"kind": "upsample", "F": 4, "C": 4, "H_out": 8, "W_out": 8}],
    [_conv(F=4, C=3, H_out=8, W_out=8), {"kind": "shortcut", "F": 4, "C": 4, "H_out": 8, "W_out": 8}],
    [_conv(F=4, C=3, H_out=8, W_out=8), {"kind": "avgpool", "F": 4, "C": 4, "H_out": 1, "W_out": 1, "prunable": True}],
])
def test_inconsistent_manifests_are_rejected(layers):
    with pytest.raises(ManifestError):
        manifest_from_json(json.dumps(layers))


def test_malformed_manifest_json():
    with pytest.raises(ManifestError):
        manifest_from_json("{not json")
    with pytest.raises(ManifestError):
        manifest_from_json(json.dumps({"layers": []}))


def test_bundled_yolov3_fixture():
    m = load_manifest("yolov3_320")
    assert m.input_shape == (3, 320, 320)
    assert len(m.conv_layers()) == 75
    assert count_params(m) == 61_471_072
    assert count_flops(m) == 38_633_062_400
    heads = [l for l in m.layers if l.kind == "detect"]
    assert [(l.H_out, l.C) for l in heads] == [(10, 18), (20, 18), (40, 18)]
    # within 0.1 % of the published 61.5 M and 38.63 Bn
    assert abs(count_params(m) - 61.5e6) / 61.5e6 < 1e-3
    assert abs(count_flops(m) - 38.63e9) / 38.63e9 < 1e-3


def test_manifest_json_round_trip():
    m = tiny_detector().manifest
    again = manifest_from_json(m.to_json())
    assert again.to_json() == m.to_json()


# ---------- Datasets ----------

def test_dataset_round_trip(tmp_path):
    ds = make_detection(5, image_size=32, seed=0)
    save_dataset(ds, tmp_path / "det")
    back = load_dataset(tmp_path / "det")
    assert np.array_equal(back.images, ds.images)
    assert all(np.array_equal(a, b) for a, b in zip(back.boxes, ds.boxes))

    cls = make_classification(6, image_size=16, seed=1)
    save_dataset(cls, tmp_path / "cls")
    assert np.array_equal(load_dataset(tmp_path / "cls").labels, cls.labels)


def test_truncated_dataset_blob(tmp_path):
    save_dataset(make_classification(4, seed=0), tmp_path)
    raw = (tmp_path / "images.bin").read_bytes()
    (tmp_path / "images.bin").write_bytes(raw[:-4])
    with pytest.raises(ArchiveError):
        load_dataset(tmp_path)


def test_datasets_are_seeded():
    a, b = make_classification(8, seed=3), make_classification(8, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, make_classification(8, seed=4).images)
