from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from styleloop.datasets import (
    DatasetManifest,
    ManifestError,
    PseudoPair,
    batch_at,
    epoch_batches,
    iterate_batches,
    load_image,
    read_manifest,
    save_image,
    write_manifest,
)


def _write_png(path, arr_uint8):
    Image.fromarray(arr_uint8, mode="RGB").save(path)


def test_load_resizes_and_normalizes(tmp_path, rng):
    big = rng.integers(0, 256, size=(512, 512, 3), dtype=np.uint8)
    p = tmp_path / "big.png"
    _write_png(p, big)
    img = load_image(p, 256)
    assert img.shape == (3, 256, 256)
    assert img.min() >= -1.0 and img.max() <= 1.0


def test_all_black_maps_to_minus_one(tmp_path):
    p = tmp_path / "black.png"
    _write_png(p, np.zeros((16, 16, 3), dtype=np.uint8))
    img = load_image(p, 16)
    assert np.all(img == -1.0)


def test_known_4x4_pixels_match_linear_map(tmp_path):
    # hand-computed oracle: v/255*2 - 1 per pixel
    vals = np.arange(48, dtype=np.uint8).reshape(4, 4, 3) * 5
    p = tmp_path / "four.png"
    _write_png(p, vals)
    img = load_image(p, 4)
    expected = vals.astype(np.float64).transpose(2, 0, 1) / 255.0 * 2.0 - 1.0
    np.testing.assert_allclose(img, expected, atol=1e-7)


def test_8bit_round_trip_is_identity(tmp_path, rng):
    arr = rng.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
    src = tmp_path / "src.png"
    _write_png(src, arr)
    img = load_image(src, 24)
    out = tmp_path / "out.png"
    save_image(img, out)
    roundtrip = load_image(out, 24)
    np.testing.assert_array_equal(img, roundtrip)


def test_every_8bit_value_survives_the_round_trip(tmp_path):
    # the full lattice: all 256 values in one 16x16 plane, same per channel
    lattice = np.arange(256, dtype=np.uint8).reshape(16, 16)
    arr = np.stack([lattice] * 3, axis=2)
    src = tmp_path / "lattice.png"
    _write_png(src, arr)
    img = load_image(src, 16)
    save_image(img, tmp_path / "back.png")
    stored = np.asarray(Image.open(tmp_path / "back.png"))
    np.testing.assert_array_equal(stored, arr)


def test_save_clamps_endpoints(tmp_path):
    img = np.full((3, 12, 12), 1.5, dtype=np.float32)
    img[0, 0, 0] = -1.0
    p = tmp_path / "clamped.png"
    save_image(img, p)
    stored = np.asarray(Image.open(p))
    assert stored[0, 0, 0] == 0  # -1.0 -> 0
    assert stored[1, 1, 1] == 255  # 1.5 clamped -> 255


def test_save_rejects_non_finite(tmp_path):
    img = np.zeros((3, 8, 8))
    img[1, 2, 3] = np.nan
    with pytest.raises(ValueError, match="finite"):
        save_image(img, tmp_path / "bad.png")


def test_unreadable_image_errors(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"this is not a png")
    with pytest.raises(OSError):
        load_image(p, 16)


# -- manifests ---------------------------------------------------------------


def _touch_pair(tmp_path, i):
    s = tmp_path / f"s{i}.png"
    q = tmp_path / f"p{i}.png"
    _write_png(s, np.zeros((4, 4, 3), dtype=np.uint8))
    _write_png(q, np.zeros((4, 4, 3), dtype=np.uint8))
    return PseudoPair(str(s), str(q), "src prompt", "tgt prompt", "stub", i)


def test_manifest_round_trip(tmp_path):
    pairs = [_touch_pair(tmp_path, i) for i in range(3)]
    manifest = DatasetManifest(pairs=pairs, domain_tag="paired", created_seed=42)
    path = tmp_path / "m.jsonl"
    write_manifest(manifest, path)
    loaded = read_manifest(path)
    assert loaded.domain_tag == "paired" and loaded.created_seed == 42
    assert loaded.pairs == pairs


def test_empty_paired_manifest_rejected(tmp_path):
    with pytest.raises(ManifestError, match="at least one"):
        write_manifest(DatasetManifest(pairs=[], domain_tag="paired"), tmp_path / "m.jsonl")


def test_duplicate_source_rejected_by_name(tmp_path):
    p = _touch_pair(tmp_path, 0)
    with pytest.raises(ManifestError, match="s0.png"):
        write_manifest(DatasetManifest(pairs=[p, p]), tmp_path / "m.jsonl")


def test_write_requires_existing_files(tmp_path):
    pair = PseudoPair(str(tmp_path / "ghost.png"), str(tmp_path / "ghost2.png"), "a", "b")
    with pytest.raises(ManifestError, match="does not exist"):
        write_manifest(DatasetManifest(pairs=[pair]), tmp_path / "m.jsonl")


def test_malformed_record_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"domain_tag": "paired", "created_seed": 1}\n{"source_path": "x"}\n')
    with pytest.raises(ManifestError):
        read_manifest(path)


# -- batching ----------------------------------------------------------------


def _manifest_of(n, tmp_path):
    return DatasetManifest(pairs=[_touch_pair(tmp_path, i) for i in range(n)])


def test_batch_sizes_include_final_short_batch(tmp_path):
    m = _manifest_of(5, tmp_path)
    sizes = [len(b) for b in epoch_batches(m, 2, shuffle_seed=0)]
    assert sizes == [2, 2, 1]


def test_same_seed_same_order(tmp_path):
    m = _manifest_of(7, tmp_path)
    a = [p.source_path for b in epoch_batches(m, 3, 9) for p in b]
    b = [p.source_path for b in epoch_batches(m, 3, 9) for p in b]
    assert a == b


def test_different_seeds_differ(tmp_path):
    m = _manifest_of(100, tmp_path)
    a = [p.source_path for b in epoch_batches(m, 10, 1) for p in b]
    b = [p.source_path for b in epoch_batches(m, 10, 2) for p in b]
    assert a != b


def test_epoch_covers_every_pair_exactly_once(tmp_path):
    m = _manifest_of(11, tmp_path)
    emitted = [p.source_path for b in epoch_batches(m, 4, 3) for p in b]
    assert sorted(emitted) == sorted(p.source_path for p in m.pairs)


def test_iterate_batches_spans_epochs(tmp_path):
    m = _manifest_of(4, tmp_path)
    batches = list(iterate_batches(m, 2, shuffle_seed=5, epochs=3))
    assert len(batches) == 6
    emitted = [p.source_path for b in batches for p in b]
    assert sorted(emitted) == sorted([p.source_path for p in m.pairs] * 3)


def test_batch_at_matches_streaming_order(tmp_path):
    m = _manifest_of(5, tmp_path)
    stream = list(iterate_batches(m, 2, shuffle_seed=7, epochs=2))
    for idx, batch in enumerate(stream):
        assert batch_at(m, 2, 7, idx) == batch


def test_batch_size_must_be_positive(tmp_path):
    m = _manifest_of(2, tmp_path)
    with pytest.raises(ValueError):
        epoch_batches(m, 0, 0)
