"""Checkpoint round-trips."""

import numpy as np
import pytest

from ssmprobe.checkpoint import load_params, save_params


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "W": rng.normal(size=(5, 3)),
        "b": rng.normal(size=5),
        "s4.D": np.asarray(rng.normal()),  # 0-d scalars survive
    }
    extra = {"head_spec": {"kind": "gap"}, "d": 3}
    save_params(tmp_path / "ck", params, extra)
    back, extra_back = load_params(tmp_path / "ck")
    assert extra_back == extra
    assert set(back) == set(params)
    for key in params:
        np.testing.assert_array_equal(back[key], params[key])
        assert back[key].shape == params[key].shape


def test_size_mismatch_detected(tmp_path):
    save_params(tmp_path / "ck", {"a": np.zeros(4)})
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="size mismatch"):
        load_params(tmp_path / "ck")


def test_version_check(tmp_path):
    save_params(tmp_path / "ck", {"a": np.zeros(2)})
    manifest = (tmp_path / "ck.json").read_text().replace('"version": 1', '"version": 9')
    (tmp_path / "ck.json").write_text(manifest)
    with pytest.raises(ValueError, match="version"):
        load_params(tmp_path / "ck")
