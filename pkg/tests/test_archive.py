import numpy as np
import pytest

from src.slimdet.archive import FORMAT_VERSION, ModelArchive, load_archive, save_archive
from src.slimdet.errors import ArchiveError
from src.slimdet.nets.models import tiny_classifier
from src.slimdet.sparsity import SparsityMode, constraint_from_ratios, project


def _masks(net, mode=SparsityMode.combined):
    rng = np.random.default_rng(1)
    out = {}
    for layer in net.prunable_layers():
        rows, cols = layer.spec.gemm_shape
        c = constraint_from_ratios(rows, cols, mode, filter_ratio=2, column_ratio=2, weight_ratio=4)
        out[layer.name] = project(rng.normal(size=(rows, cols)), c)[1]
    return out


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_round_trip_is_bit_exact(tmp_path):
    net = tiny_classifier(seed=4)
    masks = _masks(net)
    archive = ModelArchive.from_net(net, masks, seed=4, kind="classify", metric={"accuracy": 0.5})
    path = save_archive(archive, tmp_path / "a")

    back = load_archive(path)
    assert back.manifest == archive.manifest
    assert back.meta == {"seed": 4, "kind": "classify", "metric": {"accuracy": 0.5}}
    for name, w in archive.weights.items():
        assert back.weights[name].tobytes() == w.tobytes()
        assert back.biases[name].tobytes() == archive.biases[name].tobytes()
    assert set(back.masks) == set(masks)
    for name, m in masks.items():
        assert np.array_equal(back.masks[name], m)

    # saving what was loaded reproduces the same bytes
    save_archive(back, tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_weights_blob_is_dense_float32(tmp_path):
    net = tiny_classifier()
    path = save_archive(ModelArchive.from_net(net), tmp_path / "a")
    expected = 4 * sum(int(np.prod(l.weight.data.shape)) for l in net.conv_layers())
    assert (path / "weights.bin").stat().st_size == expected
    assert not (path / "masks.bin").exists()
    assert load_archive(path).masks is None


def test_truncated_weights_are_reported_with_sizes(tmp_path):
    path = save_archive(ModelArchive.from_net(tiny_classifier()), tmp_path / "a")
    raw = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(raw[:-8])
    with pytest.raises(ArchiveError) as e:
        load_archive(path)
    assert str(len(raw)) in str(e.value) and str(len(raw) - 8) in str(e.value)


def test_version_mismatch_and_missing_members(tmp_path):
    path = save_archive(ModelArchive.from_net(tiny_classifier()), tmp_path / "a")
    meta = (path / "meta.json").read_text()
    (path / "meta.json").write_text(meta.replace(f'"version": {FORMAT_VERSION}', '"version": 99'))
    with pytest.raises(ArchiveError, match="version"):
        load_archive(path)

    (path / "meta.json").write_text(meta)
    (path / "biases.bin").unlink()
    with pytest.raises(ArchiveError, match="biases.bin"):
        load_archive(path)

    with pytest.raises(ArchiveError):
        load_archive(tmp_path / "nowhere")


def test_corrupt_meta_is_an_archive_error(tmp_path):
    path = save_archive(ModelArchive.from_net(tiny_classifier()), tmp_path / "a")
    (path / "meta.json").write_text("{not json")
    with pytest.raises(ArchiveError):
        load_archive(path)


@pytest.mark.parametrize("mode, eligible", [
    (SparsityMode.filter, True),
    (SparsityMode.column, True),
    (SparsityMode.combined, True),
    (SparsityMode.irregular, False),
])
def test_compaction_flag_follows_mask_structure(tmp_path, mode, eligible):
    net = tiny_classifier()
    archive = ModelArchive.from_net(net, _masks(net, mode))
    assert archive.compaction_eligible is eligible
    path = save_archive(archive, tmp_path / "a")
    assert f'"compaction_eligible": {str(eligible).lower()}' in (path / "meta.json").read_text()


def test_restored_network_computes_the_same_outputs(tmp_path):
    net = tiny_classifier(seed=9)
    x = np.random.default_rng(0).normal(size=(3, 1, 16, 16)).astype(np.float32)
    expected = net.forward(x)
    restored = load_archive(save_archive(ModelArchive.from_net(net, seed=9), tmp_path / "a")).to_net()
    assert np.array_equal(restored.forward(x), expected)
