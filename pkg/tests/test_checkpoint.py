import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fsrlab import checkpoint
from fsrlab.checkpoint import CheckpointError

arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4),
                    elements=st.floats(allow_nan=False, width=64))
names = st.text(min_size=0, max_size=20)


@given(st.dictionaries(names, arrays, max_size=5))
def test_roundtrip(entries):
    back = checkpoint.loads(checkpoint.dumps(entries))
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].shape == entries[k].shape
        assert np.array_equal(back[k], entries[k])


def test_byte_layout_by_hand():
    blob = checkpoint.dumps({"ab": np.array([[1.0, 2.0, 3.0]])})
    expected = (b"FSRCKPT" + struct.pack("<II", 1, 1) + struct.pack("<I", 2) + b"ab"
                + struct.pack("<I", 2) + struct.pack("<QQ", 1, 3) + struct.pack("<3d", 1.0, 2.0, 3.0))
    assert blob == expected


def test_scalar_entry():
    back = checkpoint.loads(checkpoint.dumps({"s": np.float64(2.5)}))
    assert back["s"].shape == () and back["s"] == 2.5


def test_rejects_corruption():
    blob = checkpoint.dumps({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOTCKPT" + blob[7:])
    for cut in (3, 12, 20, len(blob) - 1):
        with pytest.raises(CheckpointError):
            checkpoint.loads(blob[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(blob + b"\0")
    bad_version = blob[:7] + struct.pack("<I", 9) + blob[11:]
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(bad_version)


def test_file_roundtrip(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, {"a": np.ones(3)})
    assert np.array_equal(checkpoint.load(path)["a"], np.ones(3))
    assert not (tmp_path / "m.ckpt.tmp").exists()
