import struct

import numpy as np
import pytest

from aecfe import featio, forest, network
from aecfe.datamodel import UNLABELED, Dataset
from aecfe.errors import IncompatibleCheckpoint, IntegrityError, UnsupportedFeatureFile
from aecfe.training import AdamState

from conftest import small_model_config


def test_feature_file_round_trip(tmp_path):
    m = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    path = tmp_path / "f.aecf"
    featio.write_features(path, m)
    assert path.stat().st_size == 20 + 7 * 5 * 4
    assert featio.read_feature_header(path) == {"format": "feature-matrix", "version": 1, "count": 7, "dim": 5}
    out = featio.read_features(path)
    assert out.dtype == np.float32 and out.tobytes() == m.tobytes()


def test_feature_file_bad_magic_and_version(tmp_path):
    path = tmp_path / "f.aecf"
    featio.write_features(path, np.zeros((2, 2), np.float32))
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(UnsupportedFeatureFile, match="unsupported feature file"):
        featio.read_features(path)
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedFeatureFile, match="unsupported feature file"):
        featio.read_features(path)


def test_feature_file_truncated(tmp_path):
    path = tmp_path / "f.aecf"
    featio.write_features(path, np.ones((4, 3), np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(IntegrityError):
        featio.read_features(path)


def test_empty_feature_file(tmp_path):
    path = tmp_path / "f.aecf"
    featio.write_features(path, np.zeros((0, 6), np.float32))
    assert featio.read_features(path).shape == (0, 6)


def test_dataset_round_trip(tmp_path, small_dataset):
    featio.write_dataset(small_dataset, tmp_path / "ds")
    back = featio.read_dataset(tmp_path / "ds")
    assert back.equals(small_dataset)
    assert back.features.tobytes() == small_dataset.features.tobytes()
    assert np.array_equal(back.images, small_dataset.images)
    assert back.meta == small_dataset.meta


def test_dataset_round_trip_keeps_unlabeled_and_ids(tmp_path, small_dataset):
    sub = small_dataset.subset([5, 2, 9])
    labels = sub.labels.copy()
    labels[1] = UNLABELED
    ds = Dataset(sub.features, sub.images, sub.domains, labels, sub.record_ids, sub.meta)
    featio.write_dataset(ds, tmp_path / "ds")
    back = featio.read_dataset(tmp_path / "ds")
    assert back.equals(ds)
    assert back.labels[1] == UNLABELED


def test_empty_dataset_accepted(tmp_path, small_dataset):
    empty = small_dataset.subset([])
    featio.write_dataset(empty, tmp_path / "ds")
    assert len(featio.read_dataset(tmp_path / "ds")) == 0


def test_dataset_missing_image(tmp_path, small_dataset):
    out = featio.write_dataset(small_dataset, tmp_path / "ds")
    next((out / "images").iterdir()).unlink()
    with pytest.raises(IntegrityError, match="manifest integrity"):
        featio.read_dataset(out)


def test_dataset_truncated_features(tmp_path, small_dataset):
    out = featio.write_dataset(small_dataset, tmp_path / "ds")
    feat = out / featio.FEATURE_FILE_NAME
    feat.write_bytes(feat.read_bytes()[:-10])
    with pytest.raises(IntegrityError):
        featio.read_dataset(out)


def test_dataset_corrupt_magic(tmp_path, small_dataset):
    out = featio.write_dataset(small_dataset, tmp_path / "ds")
    feat = out / featio.FEATURE_FILE_NAME
    feat.write_bytes(b"JUNK" + feat.read_bytes()[4:])
    with pytest.raises(UnsupportedFeatureFile):
        featio.read_dataset(out)


def test_missing_manifest(tmp_path):
    with pytest.raises(IntegrityError, match="manifest integrity"):
        featio.read_dataset(tmp_path)


def _checkpoint_parts(seed=0):
    cfg = small_model_config()
    params = network.init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    state = AdamState({k: rng.normal(size=v.shape).astype(np.float32) for k, v in params.items()},
                      {k: rng.uniform(size=v.shape).astype(np.float32) for k, v in params.items()}, 17)
    return cfg, params, state


def test_checkpoint_round_trip(tmp_path):
    cfg, params, state = _checkpoint_parts()
    path = tmp_path / "m.aeck"
    featio.save_checkpoint(path, params, state, 5, cfg)
    ck = featio.load_checkpoint(path, cfg)
    assert ck.epoch == 5 and ck.opt_state.t == 17 and ck.config == cfg
    for k in params:
        assert ck.params[k].tobytes() == params[k].tobytes()
        assert ck.opt_state.m[k].tobytes() == state.m[k].tobytes()
        assert ck.opt_state.v[k].tobytes() == state.v[k].tobytes()
    header = featio.read_checkpoint_header(path)
    assert header["epoch"] == 5


def test_checkpoint_wrong_digest(tmp_path):
    cfg, params, state = _checkpoint_parts()
    path = tmp_path / "m.aeck"
    featio.save_checkpoint(path, params, state, 1, cfg)
    with pytest.raises(IncompatibleCheckpoint, match="incompatible checkpoint"):
        featio.load_checkpoint(path, network.ModelConfig())


def test_checkpoint_truncated(tmp_path):
    cfg, params, state = _checkpoint_parts()
    path = tmp_path / "m.aeck"
    featio.save_checkpoint(path, params, state, 1, cfg)
    raw = path.read_bytes()
    for cut in (10, 60, len(raw) // 2, len(raw) - 4):
        path.write_bytes(raw[:cut])
        with pytest.raises(IntegrityError):
            featio.load_checkpoint(path)


def test_checkpoint_trailing_garbage(tmp_path):
    cfg, params, state = _checkpoint_parts()
    path = tmp_path / "m.aeck"
    featio.save_checkpoint(path, params, state, 1, cfg)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(IntegrityError, match="trailing"):
        featio.load_checkpoint(path)


def test_checkpoint_refuses_non_finite(tmp_path):
    cfg, params, state = _checkpoint_parts()
    params["enc0.b"] = params["enc0.b"].copy()
    params["enc0.b"][0] = np.nan
    with pytest.raises(ValueError):
        featio.save_checkpoint(tmp_path / "m.aeck", params, state, 1, cfg)
    assert not (tmp_path / "m.aeck").exists()


def test_forest_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0)
    model = forest.fit(X, y, forest.ForestConfig(n_trees=5))
    path = tmp_path / "f.aerf"
    featio.save_forest(path, model)
    back = featio.load_forest(path)
    assert back.n_classes == model.n_classes and len(back.trees) == 5
    assert np.array_equal(forest.predict_proba(back, X), forest.predict_proba(model, X))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(IntegrityError):
        featio.load_forest(path)


def test_inspect_identifies_artifacts(tmp_path, small_dataset):
    cfg, params, state = _checkpoint_parts()
    featio.save_checkpoint(tmp_path / "m.aeck", params, state, 3, cfg)
    featio.write_features(tmp_path / "f.aecf", np.zeros((2, 3), np.float32))
    info = featio.inspect(tmp_path / "m.aeck")
    assert info["format"] == "checkpoint" and info["epoch"] == 3
    assert featio.inspect(tmp_path / "f.aecf")["format"] == "feature-matrix"
    featio.write_dataset(small_dataset, tmp_path / "ds")
    assert featio.inspect(tmp_path / "ds")["records"] == len(small_dataset)
    (tmp_path / "junk").write_bytes(b"nothing here")
    with pytest.raises(IntegrityError):
        featio.inspect(tmp_path / "junk")
