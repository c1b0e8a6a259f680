"""Synthetic billet-number imagery.

Characters come from a 5x7 dot-matrix font stamped into 32x32 cells; a
number strip is the concatenation of its character cells with fixed gaps
and margins.  A corruption pipeline emulates mill conditions: missing dots,
horizontal paint-peel occlusion bands, contrast and brightness drift, and
sensor noise, applied in that order and clamped to [0, 1].  Rendering is
fully deterministic given a seed, and every image is quantized to 8-bit
levels so the PGM files on disk reproduce the arrays exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Alphabet
from .rules import EncodingRules

CELL = 32
GAP_PX = 8
MARGIN_PX = 16
FRAMES_MAGIC = b"FRAM"

# 5x7 dot-matrix glyphs, one row string per dot row, '1' = lit dot.
FONT_5X7: dict[str, tuple[str, ...]] = {
    "0": ("01110", "10001", "10001", "10101", "10001", "10001", "01110"),
    "1": ("01110", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("01110", "10001", "10001", "11110", "10001", "10001", "01110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "D": ("11100", "10010", "10001", "10001", "10001", "10010", "11100"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "F": ("11111", "10000", "10000", "11110", "10000", "10000", "10000"),
    "G": ("01110", "10001", "10000", "10111", "10001", "10001", "01111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "J": ("00111", "00010", "00010", "00010", "00010", "10010", "01100"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "L": ("10000", "10000", "10000", "10000", "10000", "10000", "11111"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "N": ("10001", "10001", "11001", "10101", "10011", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "Q": ("01110", "10001", "10001", "10001", "10101", "10010", "01101"),
    "R": ("11110", "10001", "10001", "11110", "10100", "10010", "10001"),
    "S": ("01111", "10000", "10000", "01110", "00001", "00001", "11110"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "U": ("10001", "10001", "10001", "10001", "10001", "10001", "01110"),
    "V": ("10001", "10001", "10001", "10001", "10001", "01010", "00100"),
    "W": ("10001", "10001", "10001", "10101", "10101", "10101", "01010"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "10001", "01010", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
}

# dot pitch 4px with 3px dots leaves a 19x27 glyph box centered in the cell
DOT_PITCH = 4
DOT_SIZE = 3
GLYPH_W = 5 * DOT_PITCH - 1
GLYPH_H = 7 * DOT_PITCH - 1
GLYPH_X0 = (CELL - GLYPH_W) // 2
GLYPH_Y0 = (CELL - GLYPH_H) // 2


@dataclass(frozen=True)
class CorruptionSpec:
    """Degradations applied per character cell.

    Occlusion bands are horizontal strips of ``band_fill`` painted across
    the cell; ``occlusion_bands`` and ``band_width`` give inclusive ranges
    sampled per character, and ``occlusion_prob`` is the chance a given
    character is occluded at all.
    """

    dot_dropout: float = 0.0
    occlusion_prob: float = 1.0
    occlusion_bands: tuple[int, int] = (0, 0)
    band_width: tuple[int, int] = (2, 5)
    band_fill: float = 0.0
    contrast_scale: float = 1.0
    brightness_shift: float = 0.0
    noise_sigma: float = 0.0
    jitter_px: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.dot_dropout <= 1.0:
            raise ValueError("dot_dropout must be a probability")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be a probability")
        if self.occlusion_bands[0] < 0 or self.occlusion_bands[1] < self.occlusion_bands[0]:
            raise ValueError("occlusion_bands must be a (min, max) count range")
        if self.band_width[0] < 1 or self.band_width[1] < self.band_width[0]:
            raise ValueError("band_width must be a (min, max) pixel range")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be non-negative")


CLEAN_SPEC = CorruptionSpec()
# light wear typical of the training-side collection
SOURCE_SPEC = CorruptionSpec(dot_dropout=0.01, noise_sigma=0.05)
# deployment-side drift: darker, flatter, noisier, worn dots, occasional
# paint bands
TARGET_SHIFTED_SPEC = CorruptionSpec(
    dot_dropout=0.08,
    occlusion_prob=0.1,
    occlusion_bands=(1, 2),
    band_width=(2, 3),
    brightness_shift=-0.3,
    contrast_scale=0.7,
    noise_sigma=0.1,
)

DOMAIN_SPECS = {"source": SOURCE_SPEC, "target": TARGET_SHIFTED_SPEC}


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _stamp_glyph(img: np.ndarray, rows: tuple[str, ...], x0: int, y0: int) -> None:
    for r, row in enumerate(rows):
        for c, bit in enumerate(row):
            if bit == "1":
                y = y0 + r * DOT_PITCH
                x = x0 + c * DOT_PITCH
                img[y : y + DOT_SIZE, x : x + DOT_SIZE] = 1.0


def render_char(
    symbol: str,
    spec: CorruptionSpec = CLEAN_SPEC,
    seed: int | np.random.SeedSequence = 0,
    font: dict[str, tuple[str, ...]] | None = None,
) -> tuple[np.ndarray, float]:
    """One corrupted character cell.

    Returns (32x32 image in [0, 1], occlusion coverage), where coverage is
    the fraction of glyph-box rows crossed by an occlusion band, computed
    from the band geometry alone.
    """
    font = font or FONT_5X7
    if symbol not in font:
        raise ValueError(f"no glyph for symbol {symbol!r}")
    rng = np.random.default_rng(seed)
    img = np.zeros((CELL, CELL))

    jx = int(rng.integers(-spec.jitter_px, spec.jitter_px + 1)) if spec.jitter_px else 0
    jy = int(rng.integers(-spec.jitter_px, spec.jitter_px + 1)) if spec.jitter_px else 0
    x0 = min(max(GLYPH_X0 + jx, 0), CELL - GLYPH_W)
    y0 = min(max(GLYPH_Y0 + jy, 0), CELL - GLYPH_H)

    rows = font[symbol]
    if spec.dot_dropout > 0.0:
        kept = []
        for row in rows:
            kept.append(
                "".join(
                    "0" if bit == "1" and rng.random() < spec.dot_dropout else bit
                    for bit in row
                )
            )
        rows = tuple(kept)
    _stamp_glyph(img, rows, x0, y0)

    covered = np.zeros(CELL, dtype=bool)
    n_bands = 0
    if spec.occlusion_bands[1] > 0:
        occluded = spec.occlusion_prob >= 1.0 or rng.random() < spec.occlusion_prob
        if occluded:
            n_bands = int(
                rng.integers(spec.occlusion_bands[0], spec.occlusion_bands[1] + 1)
            )
    for _ in range(n_bands):
        width = int(rng.integers(spec.band_width[0], spec.band_width[1] + 1))
        top = int(rng.integers(0, CELL - width + 1))
        img[top : top + width, :] = spec.band_fill
        covered[top : top + width] = True
    coverage = float(covered[y0 : y0 + GLYPH_H].sum()) / GLYPH_H

    img = img * spec.contrast_scale
    img = img + spec.brightness_shift
    if spec.noise_sigma > 0.0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return _quantize(img), coverage


def render_strip(
    label: str,
    rules: EncodingRules | None = None,
    spec: CorruptionSpec = CLEAN_SPEC,
    seed: int | np.random.SeedSequence = 0,
    gap_px: int = GAP_PX,
    margin_px: int = MARGIN_PX,
    damage_threshold: float = 0.5,
) -> tuple[np.ndarray, list[bool]]:
    """Render a full number strip.

    Returns a (1, 32, W) image with W = n*32 + (n-1)*gap + 2*margin and a
    per-character damage flag, true where occlusion covered at least
    ``damage_threshold`` of the glyph rows.  When a schema is given the
    label must conform to it.
    """
    if not label:
        raise ValueError("cannot render an empty label")
    if rules is not None and rules.validate(label):
        raise ValueError(f"label {label!r} violates the schema")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(label))
    width = len(label) * CELL + (len(label) - 1) * gap_px + 2 * margin_px
    strip = np.zeros((CELL, width))
    flags: list[bool] = []
    for i, (ch, child) in enumerate(zip(label, children)):
        cell, coverage = render_char(ch, spec, child)
        x = margin_px + i * (CELL + gap_px)
        strip[:, x : x + CELL] = cell
        flags.append(coverage >= damage_threshold)
    # gaps and margins are bare backing plate: corruption is per character
    return strip[None, :, :], flags


def char_centers(n_chars: int, gap_px: int = GAP_PX, margin_px: int = MARGIN_PX) -> list[int]:
    """Left edge of the 32px window centered on each character cell."""
    return [margin_px + i * (CELL + gap_px) for i in range(n_chars)]


def frame_windows(
    strip: np.ndarray,
    label: str,
    alphabet: Alphabet,
    gap_px: int = GAP_PX,
    margin_px: int = MARGIN_PX,
    stride: int = 8,
) -> tuple[np.ndarray, np.ndarray]:
    """Labeled training frames cut from a rendered strip.

    Every stride-aligned decoder window becomes one frame, labeled by
    geometry: windows centered within ``stride`` of a character center get
    that character's class, all others (gap and margin alignments) the
    blank.  Training frames therefore match the decode-time window
    distribution exactly.
    """
    s = strip[0] if strip.ndim == 3 else strip
    width = s.shape[1]
    centers = [x + CELL // 2 for x in char_centers(len(label), gap_px, margin_px)]
    frames: list[np.ndarray] = []
    labels: list[int] = []
    for x in range(0, width - CELL + 1, stride):
        mid = x + CELL // 2
        nearest = min(range(len(centers)), key=lambda i: abs(centers[i] - mid))
        if abs(centers[nearest] - mid) <= stride:
            cls = alphabet.index_of(label[nearest])
        else:
            cls = alphabet.blank_index
        frames.append(s[:, x : x + CELL])
        labels.append(cls)
    return np.stack(frames), np.asarray(labels, dtype=np.int64)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    domain: str
    damage_flags: str  # '0'/'1' per character
    seed: int


def random_label(rules: EncodingRules, alphabet: Alphabet, rng: np.random.Generator) -> str:
    """A schema-conforming string drawn uniformly per position."""
    letters = [c for c in alphabet.symbols if c.isalpha()]
    digits = [c for c in alphabet.symbols if c.isdigit()]
    out: list[str] = []
    for f in rules.fields:
        for _ in range(f.length):
            if f.char_class.kind == "letter":
                pool = letters
            elif f.char_class.kind == "digit":
                pool = digits
            else:
                if f.char_class.literal not in alphabet:
                    raise ValueError(
                        f"literal {f.char_class.literal!r} not in the alphabet"
                    )
                out.append(f.char_class.literal)
                continue
            if not pool:
                raise ValueError(f"alphabet has no {f.char_class.kind}s")
            out.append(pool[int(rng.integers(len(pool)))])
    return "".join(out)


def gen_dataset(
    rules: EncodingRules,
    count: int,
    out_dir: str | Path,
    domain: str = "source",
    spec: CorruptionSpec | None = None,
    alphabet: Alphabet | None = None,
    seed: int = 0,
) -> list[ManifestEntry]:
    """Generate ``count`` strips plus labeled frames under ``out_dir``.

    Writes strips/NNNNN.pgm, manifest.csv and frames.bin.  Same seed, same
    directory contents, byte for byte.
    """
    if count < 1:
        raise ValueError("count must be positive")
    if domain not in DOMAIN_SPECS and spec is None:
        raise ValueError(f"unknown domain {domain!r} and no explicit spec")
    spec = spec if spec is not None else DOMAIN_SPECS[domain]
    alphabet = alphabet or Alphabet.default()
    out = Path(out_dir)
    (out / "strips").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(root.spawn(1)[0])
    entries: list[ManifestEntry] = []
    all_frames: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    for i in range(count):
        label = random_label(rules, alphabet, label_rng)
        strip_seed = seed * 1_000_003 + i  # stable per-strip seed, logged
        strip, flags = render_strip(label, rules, spec, strip_seed)
        rel = f"strips/{i:05d}.pgm"
        write_pgm(strip[0], out / rel)
        frames, labels = frame_windows(strip, label, alphabet)
        all_frames.append(frames)
        all_labels.append(labels)
        entries.append(
            ManifestEntry(
                rel, label, domain, "".join("1" if f else "0" for f in flags), strip_seed
            )
        )
    write_manifest(entries, out / "manifest.csv")
    write_frames(
        np.concatenate(all_frames), np.concatenate(all_labels), alphabet,
        out / "frames.bin",
    )
    return entries


# ---- file formats ----


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    """8-bit binary PGM (P5)."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValueError("PGM writer expects a 2-D image")
    data = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(blob[pos:], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: PGM payload size mismatch")
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "domain", "damage_flags", "seed"])
        for e in entries:
            writer.writerow([e.path, e.label, e.domain, e.damage_flags, e.seed])


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Entries with image paths kept relative to the manifest's directory."""
    entries: list[ManifestEntry] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"path", "label", "domain", "damage_flags", "seed"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise ValueError(f"{path}: manifest missing columns {needed}")
        for row in reader:
            entries.append(
                ManifestEntry(
                    row["path"],
                    row["label"],
                    row["domain"],
                    row["damage_flags"],
                    int(row["seed"]),
                )
            )
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def write_frames(
    frames: np.ndarray, labels: np.ndarray, alphabet: Alphabet, path: str | Path
) -> None:
    """Frame archive: magic FRAM, u32 count/h/w, alphabet, u32 labels, u8
    pixels (values * 255)."""
    k, h, w = frames.shape
    if labels.shape != (k,):
        raise ValueError("one label per frame required")
    sym = alphabet.symbols.encode("utf-8")
    data = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(
        b"".join(
            [
                FRAMES_MAGIC,
                struct.pack("<III", k, h, w),
                struct.pack("<I", len(sym)),
                sym,
                labels.astype("<u4").tobytes(),
                data.tobytes(),
            ]
        )
    )


def read_frames(path: str | Path) -> tuple[np.ndarray, np.ndarray, Alphabet]:
    blob = Path(path).read_bytes()
    if blob[:4] != FRAMES_MAGIC:
        raise ValueError(f"{path}: not a frame archive")
    k, h, w = struct.unpack_from("<III", blob, 4)
    (sym_len,) = struct.unpack_from("<I", blob, 16)
    sym_end = 20 + sym_len
    alphabet = Alphabet(blob[20:sym_end].decode("utf-8"))
    lab_end = sym_end + 4 * k
    expected = lab_end + k * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: frame archive size mismatch")
    labels = np.frombuffer(blob[sym_end:lab_end], dtype="<u4").astype(np.int64)
    frames = (
        np.frombuffer(blob[lab_end:], dtype=np.uint8)
        .reshape(k, h, w)
        .astype(np.float64)
        / 255.0
    )
    return frames, labels, alphabet
