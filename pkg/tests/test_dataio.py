import logging
import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aae.autodiff import Tensor
from aae.dataio import (CheckpointError, PNMError, decode_checkpoint, encode_checkpoint, generate_synthetic,
                        load_checkpoint, load_pgm, load_pnm, save_checkpoint, save_pgm, save_ppm, scan_dataset,
                        synth_sample)

# mean mask foreground over samples 0..199 of seed 0 at 64x64, measured from this generator
PINNED_FOREGROUND = 0.1180


def write(path, data):
    path.write_bytes(data)
    return path


class TestPGM:
    def test_p5_example(self, tmp_path):
        p = write(tmp_path / "a.pgm", b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255]))
        assert load_pgm(p).tolist() == [[0, 1], [0, 1]]

    def test_p2_matches_p5(self, tmp_path):
        rng = np.random.default_rng(0)
        vals = rng.integers(0, 256, (5, 7))
        p5 = write(tmp_path / "b.pgm", b"P5\n7 5\n255\n" + vals.astype(np.uint8).tobytes())
        body = "\n".join(" ".join(str(v) for v in row) for row in vals)
        p2 = write(tmp_path / "a.pgm", f"P2\n# ascii\n7 5\n255\n{body}\n".encode())
        assert load_pgm(p2).tobytes() == load_pgm(p5).tobytes()

    def test_header_comments_and_small_maxval(self, tmp_path):
        p = write(tmp_path / "c.pgm", b"P5 # c1\n# c2\n3 1 # c3\n4\n" + bytes([0, 2, 4]))
        assert load_pgm(p).tolist() == [[0, 0.5, 1]]

    def test_binarize_at_half(self, tmp_path):
        p = write(tmp_path / "m.pgm", b"P5\n3 1\n255\n" + bytes([127, 128, 255]))
        assert load_pgm(p, binarize=True).tolist() == [[0, 1, 1]]

    def test_save_examples(self, tmp_path):
        save_pgm(np.zeros((2, 3)), tmp_path / "z.pgm")
        raw = (tmp_path / "z.pgm").read_bytes()
        assert raw == b"P5\n3 2\n255\n" + bytes(6)
        save_pgm(np.array([[1.0, 0.5]]), tmp_path / "h.pgm")
        assert (tmp_path / "h.pgm").read_bytes()[-2:] == bytes([255, 128])

    def test_rounding_rule(self, tmp_path):
        vals = np.array([[k / 510 for k in range(0, 511)]])
        save_pgm(vals, tmp_path / "r.pgm")
        got = list((tmp_path / "r.pgm").read_bytes()[-511:])
        # k/510 * 255 = k/2: even k exact, odd k a half that rounds up
        assert got == [(k + 1) // 2 for k in range(511)]

    @given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, tmp_path_factory, raw):
        path = tmp_path_factory.mktemp("rt") / "x.pgm"
        grid = raw / 255.0
        save_pgm(grid, path)
        assert np.array_equal(load_pgm(path), grid)
        assert np.array_equal(np.frombuffer(path.read_bytes()[-raw.size:], np.uint8).reshape(raw.shape), raw)

    def test_ppm_round_trip(self, tmp_path):
        raw = np.random.default_rng(1).integers(0, 256, (3, 4, 5)).astype(np.uint8)
        save_ppm(raw / 255.0, tmp_path / "c.ppm")
        assert np.array_equal(load_pnm(tmp_path / "c.ppm"), raw / 255.0)
        with pytest.raises(PNMError, match="color"):
            load_pgm(tmp_path / "c.ppm")

    @pytest.mark.parametrize("data,match", [
        (b"P4\n1 1\n1\n\x00", "bad magic"),
        (b"P5\n2 2\n255\n\x00\x00\x00", "truncated payload"),
        (b"P5\n2 2\n300\n" + bytes(8), "maxval 300"),
        (b"P5\n2", "header"),
        (b"P2\n2 1\n255\n3", "truncated payload"),
        (b"P2\n1 1\n9\n10", "exceeds maxval"),
    ])
    def test_parse_errors(self, tmp_path, data, match):
        with pytest.raises(PNMError, match=match):
            load_pgm(write(tmp_path / "bad.pgm", data))

    def test_save_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            save_pgm(np.array([[1.2]]), tmp_path / "x.pgm")

    def test_write_error_names_path(self, tmp_path):
        target = tmp_path / "missing" / "x.pgm"
        with pytest.raises(OSError, match="missing"):
            save_pgm(np.zeros((1, 1)), target)


def make_dataset(root, ids, images_only=(), masks_only=()):
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    for i in ids + list(images_only):
        save_pgm(np.full((4, 4), 0.5), root / "images" / f"{i}.pgm")
    for i in ids + list(masks_only):
        save_pgm(np.eye(4), root / "masks" / f"{i}.pgm")


class TestScan:
    def test_default_split(self, tmp_path):
        make_dataset(tmp_path, [f"id{k}" for k in range(10)])
        m = scan_dataset(tmp_path)
        assert m.ids("train") == [f"id{k}" for k in range(8)]
        assert m.ids("val") == ["id8"] and m.ids("test") == ["id9"]
        assert m.image_size == (4, 4)

    def test_missing_counterparts_warn(self, tmp_path, caplog):
        make_dataset(tmp_path, ["a", "b"], images_only=["lonely"], masks_only=["orphan"])
        with caplog.at_level(logging.WARNING):
            m = scan_dataset(tmp_path)
        assert m.all_ids() == ["a", "b"]
        assert "lonely" in caplog.text and "orphan" in caplog.text

    def test_split_file_verbatim(self, tmp_path):
        ids = [f"id{k}" for k in range(10)]
        make_dataset(tmp_path, ids)
        (tmp_path / "splits.txt").write_text("".join(f"{i} test\n" for i in ids))
        m = scan_dataset(tmp_path)
        assert m.ids("test") == ids and m.ids("train") == [] and m.ids("val") == []

    def test_bad_split_line(self, tmp_path):
        make_dataset(tmp_path, ["a"])
        (tmp_path / "splits.txt").write_text("a holdout\n")
        with pytest.raises(ValueError, match="splits.txt:1"):
            scan_dataset(tmp_path)

    def test_empty_intersection(self, tmp_path):
        make_dataset(tmp_path, [], images_only=["x"], masks_only=["y"])
        with pytest.raises(ValueError, match="no matched"):
            scan_dataset(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_dataset(tmp_path)

    @pytest.mark.parametrize("n", [1, 3, 7, 10, 23])
    def test_split_disjoint_and_covering(self, tmp_path, n):
        ids = [f"i{k:02d}" for k in range(n)]
        make_dataset(tmp_path, ids)
        m = scan_dataset(tmp_path)
        parts = [set(m.ids(s)) for s in ("train", "val", "test")]
        assert sum(len(p) for p in parts) == n and set().union(*parts) == set(ids)

    def test_load_sample(self, tmp_path):
        make_dataset(tmp_path, ["a"])
        s = scan_dataset(tmp_path).load("a")
        assert s.image.shape == (1, 4, 4) and np.array_equal(s.mask, np.eye(4))


class TestSynthetic:
    def test_byte_identical(self, tmp_path):
        generate_synthetic(3, 6, 32, tmp_path / "a")
        generate_synthetic(3, 6, 32, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 13
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_layout_and_split(self, tmp_path):
        m = generate_synthetic(0, 10, 16, tmp_path)
        assert (len(m.ids("train")), len(m.ids("val")), len(m.ids("test"))) == (8, 1, 1)
        s = m.load(m.ids("test")[0])
        assert s.image.shape == (1, 16, 16) and s.mask.shape == (16, 16)

    def test_masks_binary_and_bounded(self):
        for i in range(100):
            image, mask = synth_sample(11, i, 32)
            assert set(np.unique(mask)) <= {0.0, 1.0}
            assert 0.01 <= mask.mean() <= 0.60
            assert image.shape == mask.shape and image.min() >= 0 and image.max() <= 1

    def test_foreground_contrasts_background(self):
        gaps = []
        for i in range(50):
            image, mask = synth_sample(0, i, 64)
            gaps.append(abs(image[mask == 1].mean() - image[mask == 0].mean()))
        assert min(gaps) > 0.05

    def test_mask_survives_file_round_trip(self, tmp_path):
        m = generate_synthetic(1, 4, 32, tmp_path)
        for k, sid in enumerate(m.all_ids()):
            assert np.array_equal(m.load(sid).mask, synth_sample(1, k, 32)[1])

    def test_pinned_mean_foreground(self):
        fractions = [synth_sample(0, i, 64)[1].mean() for i in range(200)]
        assert abs(np.mean(fractions) - PINNED_FOREGROUND) <= 0.02

    def test_invalid_arguments(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic(0, 0, 64, tmp_path)


class TestCheckpoint:
    def test_empty_store(self, tmp_path):
        save_checkpoint(OrderedDict(), tmp_path / "e.ckpt")
        assert (tmp_path / "e.ckpt").read_bytes() == b"AAE1"
        assert load_checkpoint(tmp_path / "e.ckpt") == OrderedDict()

    def test_hand_serialized_bytes(self):
        store = OrderedDict(w=Tensor(np.array([[1.0, -2.0]])))
        expected = (b"AAE1"
                    + b"\x01\x00\x00\x00" + b"w"
                    + b"\x02\x00\x00\x00" + b"\x01\x00\x00\x00" + b"\x02\x00\x00\x00"
                    + b"\x00\x00\x00\x00\x00\x00\xf0\x3f"
                    + b"\x00\x00\x00\x00\x00\x00\x00\xc0")
        assert encode_checkpoint(store) == expected

    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(0)
        for trial in range(20):
            store = OrderedDict()
            for k in range(rng.integers(1, 6)):
                shape = tuple(int(x) for x in rng.integers(1, 4, rng.integers(1, 5)))
                store[f"layer_{k}.p{trial}"] = Tensor(rng.normal(size=shape) * 10.0 ** rng.integers(-300, 300))
            path = tmp_path / f"{trial}.ckpt"
            save_checkpoint(store, path)
            back = load_checkpoint(path)
            assert list(back) == list(store)
            for n in store:
                assert back[n].shape == store[n].shape
                assert back[n].data.tobytes() == store[n].data.tobytes()

    def test_special_values_bit_exact(self):
        values = np.array([0.0, -0.0, np.inf, -np.inf, 5e-324, np.nan])
        back = decode_checkpoint(encode_checkpoint({"v": Tensor(values)}))
        assert back["v"].data.tobytes() == values.tobytes()

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="byte 0"):
            decode_checkpoint(b"AAE2")

    def test_truncation_reports_offset(self):
        buf = encode_checkpoint(OrderedDict(w=Tensor(np.array([[1.0, -2.0]]))))
        with pytest.raises(CheckpointError, match="byte 21"):
            decode_checkpoint(buf[:-3])
        with pytest.raises(CheckpointError, match="byte 9: need 4 bytes for rank"):
            decode_checkpoint(buf[:9])

    def test_load_error_names_path(self, tmp_path):
        p = write(tmp_path / "x.ckpt", b"NOPE")
        with pytest.raises(CheckpointError, match="x.ckpt"):
            load_checkpoint(p)

    def test_header_layout_by_struct(self):
        buf = encode_checkpoint(OrderedDict(ab=Tensor(np.zeros((3,)))))
        assert struct.unpack_from("<I", buf, 4) == (2,)
        assert buf[8:10] == b"ab"
        assert struct.unpack_from("<II", buf, 10) == (1, 3)
        assert len(buf) == 18 + 24
