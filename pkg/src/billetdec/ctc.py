"""Greedy CTC decoding over per-frame class distributions, plus repair of
long blank runs left behind by damaged characters.

A lattice row is the classifier's distribution for one sliding-window frame.
Greedy decoding takes the per-frame argmax and collapses the label path:
consecutive duplicates first, then blanks.  A character that the classifier
refused to commit to shows up as a run of consecutive blanks; runs of at
least ``min_run`` frames are treated as a damaged character and exactly one
frame in the run is flipped to its strongest non-blank class before
collapsing.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import TYPE_CHECKING

import numpy as np

from .core import Alphabet, DIST_SUM_TOL, ROW_SUM_LOAD_TOL, row_entropies

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .rules import EncodingRules

logger = logging.getLogger(__name__)

TEXT_MAGIC = "LAT1"
BINARY_MAGIC = b"LATB"


class Provenance(str, enum.Enum):
    """How an emitted character came to be."""

    NORMAL = "normal"
    BLANK_REPAIRED = "blank_repaired"
    RULE_CORRECTED = "rule_corrected"


@dataclass(frozen=True)
class ProbLattice:
    """(T, C) row-stochastic matrix of per-frame class probabilities.

    C counts the blank, which is always the last column.  The probability
    matrix is copied and frozen at construction.
    """

    alphabet: Alphabet
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.probs, dtype=np.float64, order="C")
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("lattice must be a (T, C) matrix with T >= 1")
        if p.shape[1] != self.alphabet.num_classes:
            raise ValueError(
                f"lattice has {p.shape[1]} columns, alphabet implies "
                f"{self.alphabet.num_classes}"
            )
        if not np.all(np.isfinite(p)):
            raise ValueError("lattice contains non-finite probabilities")
        if np.any(p < 0.0) or np.any(p > 1.0 + 1e-12):
            raise ValueError("lattice probabilities must lie in [0, 1]")
        sums = p.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > DIST_SUM_TOL)[0]
        if bad.size:
            raise ValueError(f"lattice row {bad[0]} sums to {sums[bad[0]]!r}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    def mean_entropy(self) -> float:
        """Mean per-frame entropy; the confidence proxy used in reports."""
        return float(row_entropies(self.probs).mean())


@dataclass(frozen=True)
class LabelPath:
    """One label per frame, blank allowed, tied to its source lattice.

    ``repaired`` holds the frames whose label was rewritten by blank-run
    repair so collapse can tag the resulting characters.
    """

    labels: tuple[int, ...]
    lattice: ProbLattice
    repaired: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if len(self.labels) != self.lattice.num_frames:
            raise ValueError("path length must equal lattice frame count")
        c = self.lattice.num_classes
        for t, lab in enumerate(self.labels):
            if not 0 <= lab < c:
                raise ValueError(f"label {lab} at frame {t} out of range")
        for t in self.repaired:
            if not 0 <= t < len(self.labels):
                raise ValueError(f"repaired frame {t} out of range")


@dataclass(frozen=True)
class DecodedChar:
    symbol: str
    source_frame: int
    provenance: Provenance


@dataclass(frozen=True)
class DecodeResult:
    """Final string with per-character origin.

    ``unresolved`` lists positions where rule correction found a violation it
    could not fix; the original characters are kept at those positions.
    """

    text: str
    chars: tuple[DecodedChar, ...]
    unresolved: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.text != "".join(c.symbol for c in self.chars):
            raise ValueError("text does not match per-character records")
        frames = [c.source_frame for c in self.chars]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("source frames must be strictly increasing")


@dataclass(frozen=True)
class DecodeOptions:
    min_run: int = 3
    repair_enabled: bool = True
    rules_enabled: bool = True
    # leading/trailing blank runs sit over strip margins, not characters,
    # so they are skipped unless explicitly requested
    repair_edges: bool = False


def greedy_path(lattice: ProbLattice) -> LabelPath:
    """Per-frame argmax path; ties resolve to the lowest class index."""
    labels = tuple(int(i) for i in np.argmax(lattice.probs, axis=1))
    return LabelPath(labels, lattice)


def collapse(path: LabelPath) -> DecodeResult:
    """Collapse a label path to text.

    Consecutive duplicate labels merge first, then blanks drop out.  Each
    emitted character records the first frame of its run; a run containing a
    repaired frame is tagged ``blank_repaired``.
    """
    blank = path.lattice.alphabet.blank_index
    chars: list[DecodedChar] = []
    prev: int | None = None
    for t, lab in enumerate(path.labels):
        if lab == prev:
            # same run: only the repair tag can still change
            if t in path.repaired and lab != blank and chars:
                last = chars[-1]
                if last.provenance is Provenance.NORMAL:
                    chars[-1] = DecodedChar(
                        last.symbol, last.source_frame, Provenance.BLANK_REPAIRED
                    )
            continue
        prev = lab
        if lab == blank:
            continue
        prov = (
            Provenance.BLANK_REPAIRED if t in path.repaired else Provenance.NORMAL
        )
        chars.append(DecodedChar(path.lattice.alphabet.symbol_of(lab), t, prov))
    return DecodeResult("".join(c.symbol for c in chars), tuple(chars))


def find_blank_runs(path: LabelPath, min_run: int = 3) -> list[tuple[int, int]]:
    """Maximal runs of consecutive blanks with length >= min_run.

    Returns (start_frame, length) pairs in frame order, edges included.
    """
    if min_run < 1:
        raise ValueError("min_run must be at least 1")
    blank = path.lattice.alphabet.blank_index
    runs: list[tuple[int, int]] = []
    start: int | None = None
    for t, lab in enumerate(path.labels):
        if lab == blank:
            if start is None:
                start = t
        elif start is not None:
            if t - start >= min_run:
                runs.append((start, t - start))
            start = None
    if start is not None and len(path.labels) - start >= min_run:
        runs.append((start, len(path.labels) - start))
    return runs


def repair_blanks(
    path: LabelPath, min_run: int = 3, repair_edges: bool = False
) -> LabelPath:
    """Recover one character from each long interior blank run.

    Within each qualifying run the frame with the strongest non-blank
    probability gets that class written back; every other label is left
    untouched.  Runs touching either end of the path cover strip margins and
    are skipped unless ``repair_edges`` is set.
    """
    blank = path.lattice.alphabet.blank_index
    probs = path.lattice.probs
    labels = list(path.labels)
    repaired = set(path.repaired)
    for start, length in find_blank_runs(path, min_run):
        if not repair_edges and (start == 0 or start + length == len(labels)):
            continue
        window = probs[start : start + length, :blank]
        flat = int(np.argmax(window))
        t = start + flat // window.shape[1]
        labels[t] = int(flat % window.shape[1])
        repaired.add(t)
    return LabelPath(tuple(labels), path.lattice, frozenset(repaired))


def ranked_candidates(
    lattice: ProbLattice, result: DecodeResult
) -> list[list[tuple[str, float]]]:
    """Per-character candidate symbols, best first, blank excluded.

    Candidates for position i come from the lattice row the i-th character
    was emitted from.
    """
    blank = lattice.alphabet.blank_index
    out: list[list[tuple[str, float]]] = []
    for ch in result.chars:
        row = lattice.probs[ch.source_frame, :blank]
        order = np.argsort(-row, kind="stable")
        out.append([(lattice.alphabet.symbols[i], float(row[i])) for i in order])
    return out


def decode(
    lattice: ProbLattice,
    rules: "EncodingRules | None" = None,
    opts: DecodeOptions | None = None,
) -> DecodeResult:
    """Full decode: greedy path, optional blank-run repair, collapse, then
    optional rule-constrained correction."""
    opts = opts or DecodeOptions()
    path = greedy_path(lattice)
    if opts.repair_enabled:
        path = repair_blanks(path, opts.min_run, opts.repair_edges)
    result = collapse(path)
    if opts.rules_enabled and rules is not None:
        if len(result.text) == rules.total_length:
            from .rules import correct  # here to avoid an import cycle

            result = correct(result, ranked_candidates(lattice, result), rules)
        else:
            logger.info(
                "rule correction skipped: decoded %d chars, schema wants %d",
                len(result.text),
                rules.total_length,
            )
    return result


# ---- lattice file formats ----


def write_lattice_text(lattice: ProbLattice, path: str | FsPath) -> None:
    """Text form: 'LAT1 <T> <C> <symbols>' then T rows of C floats."""
    lines = [
        f"{TEXT_MAGIC} {lattice.num_frames} {lattice.num_classes} "
        f"{lattice.alphabet.symbols}"
    ]
    for row in lattice.probs:
        lines.append(" ".join(format(v, ".17g") for v in row))
    FsPath(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_lattice_binary(lattice: ProbLattice, path: str | FsPath) -> None:
    """Binary form: magic LATB, u32 T, u32 C, length-prefixed UTF-8 symbol
    string, then T*C little-endian float64."""
    sym = lattice.alphabet.symbols.encode("utf-8")
    blob = b"".join(
        [
            BINARY_MAGIC,
            struct.pack("<II", lattice.num_frames, lattice.num_classes),
            struct.pack("<I", len(sym)),
            sym,
            np.ascontiguousarray(lattice.probs, dtype="<f8").tobytes(),
        ]
    )
    FsPath(path).write_bytes(blob)


def _lattice_from_rows(symbols: str, rows: np.ndarray, origin: str) -> ProbLattice:
    sums = rows.sum(axis=1)
    bad = np.where(np.abs(sums - 1.0) > ROW_SUM_LOAD_TOL)[0]
    if bad.size:
        raise ValueError(
            f"{origin}: row {bad[0]} sums to {sums[bad[0]]!r}, not 1"
        )
    # rows written with limited precision may be off by < ROW_SUM_LOAD_TOL;
    # renormalize so the in-memory lattice is exact
    rows = rows / sums[:, None]
    return ProbLattice(Alphabet(symbols), rows)


def read_lattice_text(path: str | FsPath) -> ProbLattice:
    raw = FsPath(path).read_text(encoding="utf-8").splitlines()
    if not raw:
        raise ValueError(f"{path}: empty lattice file")
    head = raw[0].split()
    if len(head) != 4 or head[0] != TEXT_MAGIC:
        raise ValueError(f"{path}: bad lattice header {raw[0]!r}")
    try:
        t, c = int(head[1]), int(head[2])
    except ValueError as exc:
        raise ValueError(f"{path}: bad lattice dimensions") from exc
    symbols = head[3]
    if c != len(symbols) + 1:
        raise ValueError(f"{path}: {c} classes but {len(symbols)} symbols")
    body = [line for line in raw[1:] if line.strip()]
    if len(body) != t:
        raise ValueError(f"{path}: expected {t} rows, found {len(body)}")
    try:
        rows = np.array([[float(v) for v in line.split()] for line in body])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric probability") from exc
    if rows.shape != (t, c):
        raise ValueError(f"{path}: row width mismatch")
    return _lattice_from_rows(symbols, rows, str(path))


def read_lattice_binary(path: str | FsPath) -> ProbLattice:
    blob = FsPath(path).read_bytes()
    if len(blob) < 16 or blob[:4] != BINARY_MAGIC:
        raise ValueError(f"{path}: not a binary lattice file")
    t, c = struct.unpack_from("<II", blob, 4)
    (sym_len,) = struct.unpack_from("<I", blob, 12)
    sym_end = 16 + sym_len
    if len(blob) != sym_end + t * c * 8:
        raise ValueError(f"{path}: truncated lattice payload")
    symbols = blob[16:sym_end].decode("utf-8")
    if c != len(symbols) + 1:
        raise ValueError(f"{path}: {c} classes but {len(symbols)} symbols")
    rows = np.frombuffer(blob[sym_end:], dtype="<f8").astype(np.float64)
    return _lattice_from_rows(symbols, rows.reshape(t, c), str(path))


def read_lattice(path: str | FsPath) -> ProbLattice:
    """Load either lattice format, sniffing the 4-byte magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == BINARY_MAGIC:
        return read_lattice_binary(path)
    if magic == TEXT_MAGIC.encode("ascii"):
        return read_lattice_text(path)
    raise ValueError(f"{path}: unrecognized lattice magic {magic!r}")
