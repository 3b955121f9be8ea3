import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from actprompt.errors import (
    BadMagic,
    ChecksumMismatch,
    DimMismatch,
    EmptyMatrix,
    FormatError,
    ManifestError,
    NonFiniteValue,
    NotNormalized,
    ShapeMismatch,
    TruncatedFile,
    ZeroNormRow,
)
from actprompt.store import (
    HEADER,
    EmbeddingManifest,
    EmbeddingMatrix,
    VideoRecord,
    ingest_matrix,
    l2_normalize,
    load_matrix,
    load_video,
    save_matrix,
    write_raw,
)


def test_normalize_pythagorean():
    m = l2_normalize(EmbeddingMatrix([[3.0, 4.0], [1.0, 0.0]]))
    np.testing.assert_allclose(m.data, [[0.6, 0.8], [1.0, 0.0]], atol=1e-7)
    assert m.normalized


def test_normalize_zero_row():
    with pytest.raises(ZeroNormRow) as ei:
        l2_normalize(EmbeddingMatrix([[0.0, 0.0], [1.0, 1.0]]))
    assert ei.value.index == 0


def test_matrix_invariants():
    with pytest.raises(NonFiniteValue):
        EmbeddingMatrix([[1.0, np.nan]])
    with pytest.raises(EmptyMatrix):
        EmbeddingMatrix(np.zeros((0, 3)))
    with pytest.raises(NotNormalized):
        EmbeddingMatrix([[1.0, 1.0]], normalized=True)
    m = EmbeddingMatrix([[1.0, 0.0]])
    with pytest.raises(ValueError):
        m.data[0, 0] = 2.0


finite32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=9), elements=finite32))
def test_normalize_idempotent(arr):
    norms = np.sqrt((arr.astype(np.float64) ** 2).sum(axis=1))
    if not np.all(norms > 1e-3):
        return
    once = l2_normalize(EmbeddingMatrix(arr))
    twice = l2_normalize(once)
    np.testing.assert_allclose(twice.data, once.data, rtol=0, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=finite32),
    st.booleans(),
)
def test_roundtrip_bit_exact(tmp_path_factory, arr, normalize):
    m = EmbeddingMatrix(arr)
    if normalize:
        if not np.all(np.abs(arr).sum(axis=1) > 1e-3):
            return
        m = l2_normalize(m)
    path = tmp_path_factory.mktemp("rt") / "m.apeb"
    save_matrix(m, path)
    assert load_matrix(path) == m


def test_checksum_determinism_and_sensitivity(tmp_path):
    m = EmbeddingMatrix([[1.0, -2.0, 3.0], [0.5, 0.25, 0.0]])
    a = save_matrix(m, tmp_path / "a.apeb")
    b = save_matrix(m, tmp_path / "b.apeb")
    assert a == b and len(a) == 16
    flipped = m.data.copy()
    flipped[1, 0] = -flipped[1, 0]
    assert save_matrix(EmbeddingMatrix(flipped), tmp_path / "c.apeb") != a


def test_header_layout(tmp_path):
    p = tmp_path / "m.apeb"
    save_matrix(EmbeddingMatrix([[1.0, 2.0, 3.0]]), p)
    blob = p.read_bytes()
    assert blob[:4] == b"APEB"
    assert struct.unpack_from("<IBBHQQ", blob, 4) == (1, 1, 0, 0, 1, 3)
    assert len(blob) == HEADER.size + 12 == 40


def test_truncated(tmp_path):
    p = tmp_path / "t.apeb"
    head = HEADER.pack(b"APEB", 1, 1, 0, 0, 2, 3)
    p.write_bytes(head + np.arange(5, dtype="<f4").tobytes())
    with pytest.raises(TruncatedFile):
        load_matrix(p)


def test_trailing_bytes_shape_mismatch(tmp_path):
    p = tmp_path / "t.apeb"
    head = HEADER.pack(b"APEB", 1, 1, 0, 0, 1, 2)
    p.write_bytes(head + np.arange(3, dtype="<f4").tobytes())
    with pytest.raises(ShapeMismatch):
        load_matrix(p)


def test_nan_rejected(tmp_path):
    p = tmp_path / "n.apeb"
    head = HEADER.pack(b"APEB", 1, 1, 0, 0, 1, 2)
    p.write_bytes(head + np.array([1.0, np.nan], dtype="<f4").tobytes())
    with pytest.raises(NonFiniteValue):
        load_matrix(p)


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "x.apeb"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(BadMagic):
        load_matrix(p)
    p.write_bytes(HEADER.pack(b"APEB", 2, 1, 0, 0, 1, 1) + bytes(4))
    with pytest.raises(FormatError):
        load_matrix(p)


def test_adapter_flag_not_an_embedding(tmp_path):
    p = tmp_path / "a.apeb"
    write_raw(p, np.eye(2, dtype=np.float32), flags=1)
    with pytest.raises(FormatError):
        load_matrix(p)


def test_ingest_normalizes_unflagged(tmp_path):
    p = tmp_path / "u.apeb"
    save_matrix(EmbeddingMatrix([[3.0, 4.0]]), p)
    assert not load_matrix(p).normalized
    m = ingest_matrix(p)
    assert m.normalized
    np.testing.assert_allclose(m.data, [[0.6, 0.8]], atol=1e-7)


def test_manifest_roundtrip_and_validation(tmp_path):
    man = EmbeddingManifest(kind="video_frames", root=tmp_path)
    man.add("v1", l2_normalize(EmbeddingMatrix([[1.0, 2.0], [3.0, 1.0]])))
    man.add("v2#0", l2_normalize(EmbeddingMatrix([[1.0, 0.0]])))
    man.add("v2#1", l2_normalize(EmbeddingMatrix([[0.0, 1.0], [1.0, 1.0]])))
    man.save(tmp_path / "manifest.json")
    raw = json.loads((tmp_path / "manifest.json").read_text())
    assert set(raw) == {"kind", "entries"}
    assert set(raw["entries"][0]) == {"id", "path", "rows", "dim", "checksum"}

    back = EmbeddingManifest.read(tmp_path / "manifest.json")
    assert back.ids == ["v1", "v2#0", "v2#1"]
    rec = load_video(back, "v2")
    assert len(rec.views) == 2 and rec.n_frames == 3
    assert len(load_video(back, "v1").views) == 1


def test_manifest_rejects_header_disagreement(tmp_path):
    man = EmbeddingManifest(kind="prompt_texts", root=tmp_path)
    man.add("a", l2_normalize(EmbeddingMatrix([[1.0, 2.0]])))
    man.entries[0].rows = 5
    with pytest.raises(ShapeMismatch):
        man.validate()


def test_manifest_checksum_and_missing(tmp_path):
    man = EmbeddingManifest(kind="prompt_texts", root=tmp_path)
    man.add("a", EmbeddingMatrix([[1.0, 2.0]]))
    save_matrix(EmbeddingMatrix([[1.0, 2.5]]), tmp_path / "a.apeb")
    with pytest.raises(ChecksumMismatch):
        man.validate()
    (tmp_path / "a.apeb").unlink()
    with pytest.raises(ManifestError):
        man.validate()


def test_manifest_duplicate_ids(tmp_path):
    man = EmbeddingManifest(kind="prompt_texts", root=tmp_path)
    man.add("a", EmbeddingMatrix([[1.0]]))
    with pytest.raises(ManifestError):
        man.add("a", EmbeddingMatrix([[1.0]]))
    with pytest.raises(ManifestError):
        EmbeddingManifest.from_dict({"kind": "nope", "entries": []})


def test_video_record_dims():
    with pytest.raises(DimMismatch):
        VideoRecord("v", (EmbeddingMatrix([[1.0, 0.0]]), EmbeddingMatrix([[1.0, 0.0, 0.0]])))
    with pytest.raises(EmptyMatrix):
        VideoRecord("v", ())
