import json

import numpy as np
import pytest
from PIL import Image

from attnseg.tensor_store import (
    BundleError,
    LabelMask,
    TokenManifest,
    TokenSpan,
    read_bundle,
    read_mask,
    write_bundle,
    write_mask,
)

from conftest import tiny_bundle


def test_write_creates_manifest_and_raw_files(tmp_path):
    # cross 2x2 grid x 3 tokens = 48 bytes, self 4x4 = 64 bytes
    bundle = tiny_bundle()
    write_bundle(bundle, tmp_path)
    assert (tmp_path / "manifest.json").is_file()
    assert (tmp_path / "cross_4.f32").stat().st_size == 2 * 2 * 3 * 4
    assert (tmp_path / "self.f32").stat().st_size == 4 * 4 * 4


def test_round_trip_bitwise(tmp_path):
    bundle = tiny_bundle(np.random.default_rng(5), grid=3, tokens=4)
    write_bundle(bundle, tmp_path)
    back = read_bundle(tmp_path)
    assert back.image_id == bundle.image_id
    assert back.timestep == bundle.timestep
    assert back.sample_index == bundle.sample_index
    assert back.self_map.tobytes() == bundle.self_map.tobytes()
    assert back.cross_layers[0].data.tobytes() == bundle.cross_layers[0].data.tobytes()
    assert back.token_manifest == bundle.token_manifest


def test_second_write_read_identical_bytes(tmp_path):
    bundle = tiny_bundle()
    write_bundle(bundle, tmp_path / "a")
    write_bundle(read_bundle(tmp_path / "a"), tmp_path / "b")
    for name in ("manifest.json", "cross_4.f32", "self.f32"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_row_sum_rejected_before_writing(tmp_path):
    bundle = tiny_bundle()
    bundle.self_map = (bundle.self_map * 0.9).astype(np.float32)
    with pytest.raises(BundleError, match="sums to"):
        write_bundle(bundle, tmp_path / "out")
    assert not (tmp_path / "out" / "manifest.json").exists()


def test_truncated_raw_file_rejected(tmp_path):
    write_bundle(tiny_bundle(), tmp_path)
    raw = (tmp_path / "self.f32").read_bytes()
    (tmp_path / "self.f32").write_bytes(raw[:-4])
    with pytest.raises(BundleError, match="bytes on disk"):
        read_bundle(tmp_path)


def test_inverted_span_rejected(tmp_path):
    write_bundle(tiny_bundle(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["token_manifest"]["entries"][1]["token_span"] = [5, 4]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(BundleError, match="empty token span"):
        read_bundle(tmp_path)


def test_unsupported_version_rejected(tmp_path):
    write_bundle(tiny_bundle(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(BundleError, match="format_version"):
        read_bundle(tmp_path)


def test_nan_in_tensor_rejected(tmp_path):
    write_bundle(tiny_bundle(), tmp_path)
    arr = np.frombuffer((tmp_path / "self.f32").read_bytes(), dtype="<f4").copy()
    arr[3] = np.nan
    (tmp_path / "self.f32").write_bytes(arr.tobytes())
    with pytest.raises(BundleError, match="NaN"):
        read_bundle(tmp_path)


def test_missing_file_rejected(tmp_path):
    write_bundle(tiny_bundle(), tmp_path)
    (tmp_path / "cross_4.f32").unlink()
    with pytest.raises(BundleError, match="missing tensor file"):
        read_bundle(tmp_path)


def test_fuzzed_corruptions_always_rejected(tmp_path):
    """Random byte-level corruption of tensor payloads never passes validation
    silently: either the value leaves [0,1], a row sum drifts, or NaN appears."""
    rng = np.random.default_rng(123)
    for trial in range(20):
        d = tmp_path / f"t{trial}"
        write_bundle(tiny_bundle(np.random.default_rng(trial)), d)
        target = d / ("self.f32" if trial % 2 else "cross_4.f32")
        raw = bytearray(target.read_bytes())
        # Corrupt the exponent byte of one float so the change is drastic.
        idx = int(rng.integers(len(raw) // 4)) * 4 + 3
        raw[idx] ^= 0x7F
        target.write_bytes(bytes(raw))
        with pytest.raises(BundleError):
            read_bundle(d)


def test_token_count_disagreement_rejected():
    bundle = tiny_bundle()
    extra = tiny_bundle(grid=2, tokens=5).cross_layers[0]
    extra.layer_index = 5
    bundle.cross_layers.append(extra)
    with pytest.raises(BundleError, match="token count"):
        bundle.validate()


def test_overlapping_category_spans_rejected():
    manifest = TokenManifest(
        prompt_text="x",
        entries=[
            TokenSpan("cat", "category", 0, 1),
            TokenSpan("dog", "category", 1, 2),
        ],
    )
    with pytest.raises(BundleError, match="overlap"):
        manifest.validate(4)


# --- masks ------------------------------------------------------------------


def test_mask_round_trip(tmp_path):
    mask = LabelMask(
        labels=np.array([[0, 1], [1, 0]], dtype=np.uint8),
        uncertain=np.array([[True, False], [False, True]]),
    )
    write_mask(mask, tmp_path / "m.png")
    back = read_mask(tmp_path / "m.png")
    assert np.array_equal(back.labels, mask.labels)
    assert np.array_equal(back.uncertain, mask.uncertain)


def test_mask_ignore_value_preserved(tmp_path):
    labels = np.full((3, 3), 255, dtype=np.uint8)
    write_mask(LabelMask(labels=labels, uncertain=np.zeros((3, 3), bool)), tmp_path / "m.png")
    assert np.array_equal(read_mask(tmp_path / "m.png").labels, labels)


def test_16bit_png_rejected(tmp_path):
    Image.fromarray(np.zeros((2, 2), dtype=np.uint16)).save(tmp_path / "bad.png")
    with pytest.raises(BundleError, match="8-bit"):
        read_mask(tmp_path / "bad.png")


def test_palette_png_reads_class_indices(tmp_path):
    # VOC-style ground truth: palettized PNG, pixel value = class id.
    im = Image.fromarray(np.array([[0, 1], [2, 255]], dtype=np.uint8), mode="P")
    im.putpalette([0, 0, 0, 128, 0, 0, 0, 128, 0] + [0] * 759)
    im.save(tmp_path / "gt.png")
    mask = read_mask(tmp_path / "gt.png")
    assert np.array_equal(mask.labels, [[0, 1], [2, 255]])
    assert not mask.uncertain.any()


def test_out_of_range_ids_rejected_on_write(tmp_path):
    mask = LabelMask(labels=np.array([[300]]), uncertain=np.zeros((1, 1), bool))
    with pytest.raises(BundleError, match="uint8"):
        write_mask(mask, tmp_path / "m.png")
