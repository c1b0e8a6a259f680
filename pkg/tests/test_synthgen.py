"""Dot-matrix rendering, corruption pipeline, dataset generation, formats."""

import hashlib

import numpy as np
import pytest

from billetdec.core import Alphabet
from billetdec.rules import DIGIT, LETTER, EncodingRules, FieldSpec, literal
from billetdec.synthgen import (
    CELL,
    CLEAN_SPEC,
    DOT_PITCH,
    DOT_SIZE,
    FONT_5X7,
    GLYPH_H,
    GLYPH_W,
    GLYPH_X0,
    GLYPH_Y0,
    SOURCE_SPEC,
    TARGET_SHIFTED_SPEC,
    CorruptionSpec,
    char_centers,
    frame_windows,
    gen_dataset,
    random_label,
    read_frames,
    read_manifest,
    read_pgm,
    render_char,
    render_strip,
    write_frames,
    write_manifest,
    write_pgm,
)

RULES = EncodingRules(
    (
        FieldSpec("company", LETTER, 1),
        FieldSpec("date", DIGIT, 6),
        FieldSpec("furnace", LETTER, 2),
        FieldSpec("sequence", DIGIT, 2),
    )
)

FULL_BAND = CorruptionSpec(occlusion_bands=(1, 1), band_width=(CELL, CELL))


class TestRenderChar:
    def test_deterministic(self):
        a, _ = render_char("7", SOURCE_SPEC, seed=42)
        b, _ = render_char("7", SOURCE_SPEC, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_corrupted_output(self):
        a, _ = render_char("7", TARGET_SHIFTED_SPEC, seed=1)
        b, _ = render_char("7", TARGET_SHIFTED_SPEC, seed=2)
        assert not np.array_equal(a, b)

    def test_clean_glyph_geometry(self):
        img, coverage = render_char("A", CLEAN_SPEC)
        assert img.shape == (CELL, CELL)
        assert coverage == 0.0
        assert set(np.unique(img)) <= {0.0, 1.0}
        ys, xs = np.nonzero(img)
        assert ys.min() >= GLYPH_Y0 and ys.max() < GLYPH_Y0 + GLYPH_H
        assert xs.min() >= GLYPH_X0 and xs.max() < GLYPH_X0 + GLYPH_W

    def test_dots_match_font_bitmap(self):
        img, _ = render_char("L", CLEAN_SPEC)
        for r, row in enumerate(FONT_5X7["L"]):
            for c, bit in enumerate(row):
                y = GLYPH_Y0 + r * DOT_PITCH
                x = GLYPH_X0 + c * DOT_PITCH
                block = img[y : y + DOT_SIZE, x : x + DOT_SIZE]
                assert np.all(block == (1.0 if bit == "1" else 0.0))

    def test_all_glyphs_distinct_when_clean(self):
        seen = {}
        for sym in Alphabet.default().symbols:
            img, _ = render_char(sym, CLEAN_SPEC)
            key = hashlib.sha256(img.tobytes()).hexdigest()
            assert key not in seen, f"{sym} renders like {seen.get(key)}"
            seen[key] = sym

    def test_unknown_symbol_raises(self):
        with pytest.raises(ValueError):
            render_char("?", CLEAN_SPEC)

    def test_output_is_quantized_to_8bit_levels(self):
        img, _ = render_char("5", TARGET_SHIFTED_SPEC, seed=3)
        np.testing.assert_array_equal(img, np.round(img * 255.0) / 255.0)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_full_band_gives_full_coverage(self):
        _, coverage = render_char("8", FULL_BAND, seed=0)
        assert coverage == 1.0

    def test_occlusion_prob_zero_never_occludes(self):
        spec = CorruptionSpec(occlusion_prob=0.0, occlusion_bands=(1, 2))
        for seed in range(10):
            img, coverage = render_char("8", spec, seed=seed)
            assert coverage == 0.0
        clean, _ = render_char("8", CLEAN_SPEC)
        np.testing.assert_array_equal(img, clean)

    def test_dropout_only_removes_dots(self):
        heavy = CorruptionSpec(dot_dropout=0.5)
        clean, _ = render_char("8", CLEAN_SPEC)
        img, _ = render_char("8", heavy, seed=9)
        assert np.all(img <= clean)
        assert img.sum() < clean.sum()

    def test_brightness_and_contrast_applied(self):
        spec = CorruptionSpec(contrast_scale=0.5, brightness_shift=0.1)
        img, _ = render_char("8", spec)
        levels = set(np.unique(np.round(img * 255).astype(int)))
        # background 0.1, strokes 0.5 * 1 + 0.1 = 0.6
        assert levels == {round(0.1 * 255), round(0.6 * 255)}

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CorruptionSpec(dot_dropout=1.5)
        with pytest.raises(ValueError):
            CorruptionSpec(occlusion_prob=-0.1)
        with pytest.raises(ValueError):
            CorruptionSpec(occlusion_bands=(2, 1))
        with pytest.raises(ValueError):
            CorruptionSpec(band_width=(0, 3))
        with pytest.raises(ValueError):
            CorruptionSpec(noise_sigma=-1.0)
        with pytest.raises(ValueError):
            CorruptionSpec(jitter_px=-1)


class TestRenderStrip:
    def test_width_formula(self):
        strip, flags = render_strip("B636021BB06", RULES, CLEAN_SPEC)
        n = 11
        assert strip.shape == (1, CELL, n * CELL + (n - 1) * 8 + 2 * 16)
        assert strip.shape == (1, 32, 464)
        assert len(flags) == n

    def test_margins_and_gaps_stay_background(self):
        spec = CorruptionSpec(brightness_shift=0.4, noise_sigma=0.05)
        strip, _ = render_strip("AA", None, spec, seed=5)
        s = strip[0]
        assert np.all(s[:, :16] == 0.0)  # left margin
        assert np.all(s[:, 16 + 32 : 16 + 32 + 8] == 0.0)  # gap
        assert np.all(s[:, -16:] == 0.0)  # right margin

    def test_deterministic(self):
        a, fa = render_strip("B636021BB06", RULES, TARGET_SHIFTED_SPEC, seed=7)
        b, fb = render_strip("B636021BB06", RULES, TARGET_SHIFTED_SPEC, seed=7)
        np.testing.assert_array_equal(a, b)
        assert fa == fb

    def test_damage_flags(self):
        _, clean_flags = render_strip("B636021BB06", RULES, CLEAN_SPEC)
        assert clean_flags == [False] * 11
        _, band_flags = render_strip("B636021BB06", RULES, FULL_BAND, seed=1)
        assert band_flags == [True] * 11

    def test_schema_violation_rejected(self):
        with pytest.raises(ValueError):
            render_strip("12345678901", RULES, CLEAN_SPEC)

    def test_empty_label_rejected(self):
        with pytest.raises(ValueError):
            render_strip("", None, CLEAN_SPEC)

    def test_characters_land_at_centers(self):
        strip, _ = render_strip("AB", None, CLEAN_SPEC)
        cell_a, _ = render_char("A", CLEAN_SPEC)
        cell_b, _ = render_char("B", CLEAN_SPEC)
        xs = char_centers(2)
        np.testing.assert_array_equal(strip[0][:, xs[0] : xs[0] + 32], cell_a)
        np.testing.assert_array_equal(strip[0][:, xs[1] : xs[1] + 32], cell_b)


class TestFrameWindows:
    def test_window_count_and_shape(self):
        label = "B636021BB06"
        strip, _ = render_strip(label, RULES, CLEAN_SPEC)
        frames, labels = frame_windows(strip, label, Alphabet.default())
        assert frames.shape == (55, 32, 32)
        assert labels.shape == (55,)

    def test_labels_follow_window_geometry(self):
        label = "B636021BB06"
        a = Alphabet.default()
        strip, _ = render_strip(label, RULES, CLEAN_SPEC)
        _, labels = frame_windows(strip, label, a)
        centers = [x + 16 for x in char_centers(len(label))]
        for t, x in enumerate(range(0, 464 - 32 + 1, 8)):
            mid = x + 16
            dist = min(abs(c - mid) for c in centers)
            nearest = min(range(len(centers)), key=lambda i: abs(centers[i] - mid))
            want = a.index_of(label[nearest]) if dist <= 8 else a.blank_index
            assert labels[t] == want

    def test_three_char_frames_per_character(self):
        label = "B636021BB06"
        a = Alphabet.default()
        strip, _ = render_strip(label, RULES, CLEAN_SPEC)
        _, labels = frame_windows(strip, label, a)
        assert int((labels != a.blank_index).sum()) == 3 * len(label)

    def test_center_window_is_exact_cell(self):
        label = "XY"
        a = Alphabet.default()
        strip, _ = render_strip(label, None, CLEAN_SPEC)
        frames, labels = frame_windows(strip, label, a)
        cell_x, _ = render_char("X", CLEAN_SPEC)
        hits = [
            t for t, lab in enumerate(labels) if lab == a.index_of("X")
        ]
        # middle of the three X-labeled windows sits exactly on the cell
        np.testing.assert_array_equal(frames[hits[1]], cell_x)


class TestRandomLabel:
    def test_conforms_to_schema(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            lab = random_label(RULES, Alphabet.default(), rng)
            assert RULES.validate(lab) == []

    def test_deterministic_for_seeded_rng(self):
        a = [random_label(RULES, Alphabet.default(), np.random.default_rng(3)) for _ in range(3)]
        b = [random_label(RULES, Alphabet.default(), np.random.default_rng(3)) for _ in range(3)]
        assert a == b

    def test_literal_must_be_in_alphabet(self):
        rules = EncodingRules((FieldSpec("s", literal("-"), 1),))
        with pytest.raises(ValueError):
            random_label(rules, Alphabet.default(), np.random.default_rng(0))


class TestPgm:
    def test_round_trip_exact_for_quantized(self, tmp_path):
        img, _ = render_char("Q", TARGET_SHIFTED_SPEC, seed=11)
        p = tmp_path / "q.pgm"
        write_pgm(img, p)
        np.testing.assert_array_equal(read_pgm(p), img)

    def test_header_comments_skipped(self, tmp_path):
        p = tmp_path / "c.pgm"
        payload = bytes(range(6))
        p.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
        img = read_pgm(p)
        assert img.shape == (2, 3)
        np.testing.assert_allclose(img * 255.0, np.arange(6).reshape(2, 3))

    def test_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError):
            read_pgm(p)

    def test_rejects_16bit(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ValueError):
            read_pgm(p)

    def test_rejects_short_payload(self, tmp_path):
        p = tmp_path / "x.pgm"
        p.write_bytes(b"P5\n4 4\n255\n\x00")
        with pytest.raises(ValueError):
            read_pgm(p)


class TestManifest:
    def entries(self):
        from billetdec.synthgen import ManifestEntry

        return [
            ManifestEntry("strips/00000.pgm", "B636021BB06", "source", "0" * 11, 101),
            ManifestEntry("strips/00001.pgm", "C111111AA22", "target", "01001000000", 102),
        ]

    def test_round_trip(self, tmp_path):
        p = tmp_path / "manifest.csv"
        write_manifest(self.entries(), p)
        assert read_manifest(p) == self.entries()

    def test_missing_column_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,label\na,b\n")
        with pytest.raises(ValueError):
            read_manifest(p)

    def test_empty_manifest_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,label,domain,damage_flags,seed\n")
        with pytest.raises(ValueError):
            read_manifest(p)


class TestFramesArchive:
    def test_round_trip(self, tmp_path):
        label = "B636021BB06"
        a = Alphabet.default()
        strip, _ = render_strip(label, RULES, SOURCE_SPEC, seed=13)
        frames, labels = frame_windows(strip, label, a)
        p = tmp_path / "frames.bin"
        write_frames(frames, labels, a, p)
        back_f, back_l, back_a = read_frames(p)
        np.testing.assert_array_equal(back_f, frames)  # images are quantized
        np.testing.assert_array_equal(back_l, labels)
        assert back_a == a

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "f.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError):
            read_frames(p)

    def test_truncation_rejected(self, tmp_path):
        a = Alphabet("AB")
        frames = np.zeros((2, 4, 4))
        labels = np.array([0, 1])
        p = tmp_path / "f.bin"
        write_frames(frames, labels, a, p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(ValueError):
            read_frames(p)

    def test_label_count_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_frames(np.zeros((2, 4, 4)), np.array([0]), Alphabet("AB"), tmp_path / "f")


class TestGenDataset:
    def test_layout_and_determinism(self, tmp_path):
        out1 = tmp_path / "d1"
        out2 = tmp_path / "d2"
        e1 = gen_dataset(RULES, 3, out1, domain="source", seed=5)
        e2 = gen_dataset(RULES, 3, out2, domain="source", seed=5)
        assert [e.label for e in e1] == [e.label for e in e2]
        for rel in ["manifest.csv", "frames.bin"] + [e.path for e in e1]:
            b1 = (out1 / rel).read_bytes()
            b2 = (out2 / rel).read_bytes()
            assert b1 == b2, f"{rel} differs between identical runs"

    def test_different_seed_different_data(self, tmp_path):
        e1 = gen_dataset(RULES, 2, tmp_path / "a", domain="source", seed=1)
        e2 = gen_dataset(RULES, 2, tmp_path / "b", domain="source", seed=2)
        assert [e.label for e in e1] != [e.label for e in e2]

    def test_manifest_matches_rendered_strips(self, tmp_path):
        out = tmp_path / "d"
        entries = gen_dataset(RULES, 2, out, domain="target", seed=9)
        for e in read_manifest(out / "manifest.csv"):
            assert e.domain == "target"
            assert RULES.validate(e.label) == []
            img = read_pgm(out / e.path)
            assert img.shape == (32, 464)
            assert len(e.damage_flags) == 11

    def test_frames_archive_consistent(self, tmp_path):
        out = tmp_path / "d"
        gen_dataset(RULES, 2, out, domain="source", seed=4)
        frames, labels, alphabet = read_frames(out / "frames.bin")
        assert frames.shape == (2 * 55, 32, 32)
        assert labels.shape == (110,)
        assert alphabet == Alphabet.default()

    def test_unknown_domain_without_spec_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            gen_dataset(RULES, 1, tmp_path / "d", domain="weird")

    def test_explicit_spec_overrides(self, tmp_path):
        entries = gen_dataset(
            RULES, 1, tmp_path / "d", domain="weird", spec=CLEAN_SPEC, seed=0
        )
        assert entries[0].damage_flags == "0" * 11

    def test_count_validation(self, tmp_path):
        with pytest.raises(ValueError):
            gen_dataset(RULES, 0, tmp_path / "d")


class TestPresets:
    def test_source_is_mild(self):
        assert SOURCE_SPEC.occlusion_bands == (0, 0)
        assert SOURCE_SPEC.contrast_scale == 1.0
        assert SOURCE_SPEC.brightness_shift == 0.0
        assert SOURCE_SPEC.noise_sigma < TARGET_SHIFTED_SPEC.noise_sigma
        assert SOURCE_SPEC.jitter_px == 0

    def test_target_pins_photometric_shift(self):
        assert TARGET_SHIFTED_SPEC.brightness_shift == -0.3
        assert TARGET_SHIFTED_SPEC.contrast_scale == 0.7
        assert TARGET_SHIFTED_SPEC.noise_sigma == 0.1
        assert TARGET_SHIFTED_SPEC.occlusion_bands == (1, 2)
