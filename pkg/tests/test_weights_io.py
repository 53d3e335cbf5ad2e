"""Archive format: exact byte layouts, round trips, and corruption handling."""

import numpy as np
import pytest

from rsp import weights_io as W
from rsp import toys


class TestByteLayout:
    def test_empty_archive_is_twelve_bytes(self):
        blob = W.write_archive({})
        assert blob == b"RSPW" + (1).to_bytes(4, "little") + (0).to_bytes(4, "little")
        assert len(blob) == 12

    def test_single_scalar_layout(self):
        blob = W.write_archive({"b": np.array([1.0], dtype=np.float32)})
        assert len(blob) == 12 + (4 + 1 + 1 + 4 + 4)
        assert blob[12:16] == (1).to_bytes(4, "little")   # name length
        assert blob[16:17] == b"b"
        assert blob[17] == 1                               # rank
        assert blob[18:22] == (1).to_bytes(4, "little")    # dim
        assert blob[22:26] == bytes.fromhex("0000803f")    # 1.0f little-endian

    def test_utf8_names(self):
        archive = {"weights/é": np.ones(2, dtype=np.float32)}
        assert W.read_archive(W.write_archive(archive)).keys() == archive.keys()


class TestRoundTrip:
    def test_random_archive_bitwise(self, rng):
        archive = {
            f"t{i}": rng.standard_normal(tuple(rng.integers(1, 5, size=rng.integers(1, 5)))).astype(np.float32)
            for i in range(8)
        }
        back = W.read_archive(W.write_archive(archive))
        assert list(back) == list(archive)  # order preserved
        for k in archive:
            assert np.array_equal(back[k], archive[k])
            assert back[k].dtype == np.float32

    def test_write_of_read_is_identity(self, rng):
        archive = {"a": rng.standard_normal((3, 2)).astype(np.float32),
                   "b": rng.standard_normal(4).astype(np.float32)}
        blob = W.write_archive(archive)
        assert W.write_archive(W.read_archive(blob)) == blob

    def test_file_round_trip(self, tmp_path, rng):
        archive = {"x": rng.standard_normal((2, 2)).astype(np.float32)}
        path = tmp_path / "w.rspw"
        W.write_archive_file(archive, path)
        back = W.read_archive_file(path)
        assert np.array_equal(back["x"], archive["x"])


class TestErrors:
    def test_bad_magic_with_offset(self):
        with pytest.raises(W.ArchiveError, match="offset 0"):
            W.read_archive(b"JUNK" + b"\x00" * 8)

    def test_truncated_payload_reports_offset(self):
        blob = W.write_archive({"b": np.array([1.0, 2.0], dtype=np.float32)})
        with pytest.raises(W.ArchiveError, match="byte offset"):
            W.read_archive(blob[:-3])

    def test_duplicate_name_rejected(self):
        one = W.write_archive({"b": np.array([1.0], dtype=np.float32)})
        entry = one[12:]
        doubled = b"RSPW" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + entry + entry
        with pytest.raises(W.ArchiveError, match="duplicate entry name 'b'"):
            W.read_archive(doubled)

    def test_trailing_bytes_rejected(self):
        blob = W.write_archive({"b": np.array([1.0], dtype=np.float32)})
        with pytest.raises(W.ArchiveError, match="trailing"):
            W.read_archive(blob + b"\x00")

    def test_wrong_dtype_refused_on_write(self):
        with pytest.raises(W.ArchiveError, match="float32"):
            W.write_archive({"b": np.array([1.0], dtype=np.float64)})


class TestValidation:
    def test_matching_pair_is_clean(self):
        model, weights = toys.two_quadrant_model()
        report = W.validate_against_descriptor(weights, model)
        assert report.ok() and not report.lines()

    def test_missing_weight_named(self):
        model, weights = toys.two_quadrant_model()
        broken = {k: v for k, v in weights.items() if k != "fc.weight"}
        report = W.validate_against_descriptor(broken, model)
        assert not report.ok()
        assert any("fc.weight" in line for line in report.lines())

    def test_transposed_linear_weight_reports_both_shapes(self):
        model, weights = toys.two_quadrant_model()
        bad = dict(weights)
        bad["fc.weight"] = np.zeros((2, 3), dtype=np.float32)
        report = W.validate_against_descriptor(bad, model)
        assert any("(2, 3)" in m and "(2, 2)" in m for m in report.shape_mismatches)

    def test_unused_entry_reported(self):
        model, weights = toys.two_quadrant_model()
        extra = dict(weights)
        extra["orphan"] = np.zeros(1, dtype=np.float32)
        report = W.validate_against_descriptor(extra, model)
        assert report.unused == ["orphan"]
