"""End-to-end evaluation: decode a manifest of strips under each method
configuration and report string-level metrics.

The ablation grid has four cells: plain greedy decoding, decoding with
prior knowledge (blank-run repair plus rule correction), test-time
adaptation, and adaptation combined with prior knowledge.  Adaptation runs
online: strips arrive in manifest order in fixed-size batches, each batch
is scored with the model state as of its arrival, and the model adapts on
the batch afterwards.  Non-adaptive cells classify every frame with the
frozen running statistics.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import ctc
from .ctc import DecodeOptions, Provenance
from .model import ModelParams, classify_strip, forward, load_checkpoint
from .core import softmax
from .rules import EncodingRules
from .synthgen import ManifestEntry, read_manifest, read_pgm
from .tta import AdaptConfig, AdaptState, TrajectoryRecord, adapt_batch

WINDOW = 32
STRIDE = 8


def worker_count() -> int:
    """Worker cap for sample-parallel scoring, from BILLETDEC_THREADS."""
    raw = os.environ.get("BILLETDEC_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"BILLETDEC_THREADS={raw!r} is not an integer") from exc
        if n < 1:
            raise ValueError("BILLETDEC_THREADS must be at least 1")
        return n
    return min(4, os.cpu_count() or 1)


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance (unit-cost insert/delete/substitute), by
    dynamic programming over a rolling row."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,  # delete from a
                cur[j - 1] + 1,  # insert into a
                prev[j - 1] + (ca != cb),  # substitute
            )
        prev = cur
    return prev[-1]


def exact_match_accuracy(pairs: list[tuple[str, str]]) -> float:
    """Fraction of (ground truth, prediction) pairs that match exactly."""
    if not pairs:
        raise ValueError("no pairs to score")
    return sum(gt == pred for gt, pred in pairs) / len(pairs)


@dataclass(frozen=True)
class SampleRecord:
    index: int
    ground_truth: str
    prediction: str
    edit_distance: int
    mean_entropy: float
    n_repaired: int
    n_rule_corrected: int
    n_unresolved: int

    @property
    def correct(self) -> bool:
        return self.ground_truth == self.prediction


@dataclass
class EvalReport:
    label: str
    records: list[SampleRecord]

    @property
    def exact_match(self) -> float:
        return sum(r.correct for r in self.records) / len(self.records)

    @property
    def mean_edit_distance(self) -> float:
        return float(np.mean([r.edit_distance for r in self.records]))


@dataclass
class AblationConfig:
    """Evaluation settings shared by all four cells."""

    batch_strips: int = 64  # strips per adaptation batch
    # At stride 8 a healthy inter-character gap spans 2 blank frames and a
    # character that still decodes leaves runs of at most 4, so only runs of
    # 6+ indicate a character that vanished outright.
    min_run: int = 6
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    window: int = WINDOW
    stride: int = STRIDE


CELL_LABELS = ("baseline", "prior_knowledge", "tta", "tta_prior_knowledge")


def _strip_windows(strip: np.ndarray, window: int, stride: int) -> np.ndarray:
    width = strip.shape[2]
    starts = range(0, width - window + 1, stride)
    return np.stack([strip[:, :, i : i + window] for i in starts])


def _record(
    index: int, gt: str, lattice: ctc.ProbLattice, result: ctc.DecodeResult
) -> SampleRecord:
    return SampleRecord(
        index=index,
        ground_truth=gt,
        prediction=result.text,
        edit_distance=edit_distance(gt, result.text),
        mean_entropy=lattice.mean_entropy(),
        n_repaired=sum(
            c.provenance is Provenance.BLANK_REPAIRED for c in result.chars
        ),
        n_rule_corrected=sum(
            c.provenance is Provenance.RULE_CORRECTED for c in result.chars
        ),
        n_unresolved=len(result.unresolved),
    )


def _decode_opts(with_prior: bool, rules: EncodingRules | None, cfg: AblationConfig):
    return DecodeOptions(
        min_run=cfg.min_run,
        repair_enabled=with_prior,
        rules_enabled=with_prior and rules is not None,
    )


def _eval_frozen(
    params: ModelParams,
    strips: list[np.ndarray],
    gts: list[str],
    rules: EncodingRules | None,
    with_prior: bool,
    cfg: AblationConfig,
    label: str,
) -> EvalReport:
    opts = _decode_opts(with_prior, rules, cfg)

    def one(item: tuple[int, np.ndarray]) -> SampleRecord:
        i, strip = item
        lattice = classify_strip(params, strip, cfg.window, cfg.stride)
        result = ctc.decode(lattice, rules, opts)
        return _record(i, gts[i], lattice, result)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        records = list(pool.map(one, enumerate(strips)))
    return EvalReport(label, records)


def _eval_adaptive(
    params: ModelParams,
    strips: list[np.ndarray],
    gts: list[str],
    rules: EncodingRules | None,
    with_prior: bool,
    cfg: AblationConfig,
    label: str,
) -> tuple[EvalReport, list[TrajectoryRecord]]:
    params = params.copy()  # adaptation must not leak into other cells
    state = AdaptState(params)
    opts = _decode_opts(with_prior, rules, cfg)
    records: list[SampleRecord] = []
    trajectory: list[TrajectoryRecord] = []
    for batch_idx, lo in enumerate(range(0, len(strips), cfg.batch_strips)):
        batch = strips[lo : lo + cfg.batch_strips]
        windows = np.concatenate(
            [_strip_windows(s, cfg.window, cfg.stride) for s in batch]
        )
        # score with the state as of this batch's arrival, using the
        # batch's own statistics for normalization
        logits, _ = forward(params, windows, "batch_stats", update_running=False)
        probs = softmax(logits, axis=1)
        row = 0
        batch_records: list[SampleRecord] = []
        for j, strip in enumerate(batch):
            t = (strip.shape[2] - cfg.window) // cfg.stride + 1
            lattice = ctc.ProbLattice(params.alphabet, probs[row : row + t])
            row += t
            result = ctc.decode(lattice, rules, opts)
            batch_records.append(_record(lo + j, gts[lo + j], lattice, result))
        records.extend(batch_records)
        _, entropy_before = adapt_batch(params, state, windows, cfg.adapt)
        trajectory.append(
            TrajectoryRecord(
                batch_idx,
                entropy_before,
                state.last_grad_norm,
                accuracy=sum(r.correct for r in batch_records) / len(batch_records),
            )
        )
    return EvalReport(label, records), trajectory


def load_eval_inputs(
    ckpt_path: str | Path, manifest_path: str | Path
) -> tuple[ModelParams, list[ManifestEntry], list[np.ndarray]]:
    """Load a checkpoint plus manifest and check they speak the same
    alphabet."""
    params = load_checkpoint(ckpt_path)
    entries = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    missing = [
        ch
        for e in entries
        for ch in e.label
        if ch not in params.alphabet
    ]
    if missing:
        raise ValueError(
            f"manifest labels use symbols outside the checkpoint alphabet: "
            f"{sorted(set(missing))}"
        )
    strips = [read_pgm(base / e.path)[None, :, :] for e in entries]
    return params, entries, strips


def run_ablation(
    ckpt_path: str | Path,
    manifest_path: str | Path,
    rules: EncodingRules | None,
    cfg: AblationConfig | None = None,
) -> tuple[list[EvalReport], list[TrajectoryRecord]]:
    """Evaluate all four method cells on one manifest.

    Returns the reports in CELL_LABELS order plus the adaptation trajectory
    of the tta_prior_knowledge cell.  Every cell sees the samples in
    manifest order.
    """
    cfg = cfg or AblationConfig()
    params, entries, strips = load_eval_inputs(ckpt_path, manifest_path)
    gts = [e.label for e in entries]

    reports = [
        _eval_frozen(params, strips, gts, rules, False, cfg, "baseline"),
        _eval_frozen(params, strips, gts, rules, True, cfg, "prior_knowledge"),
    ]
    tta_plain, _ = _eval_adaptive(params, strips, gts, rules, False, cfg, "tta")
    tta_prior, trajectory = _eval_adaptive(
        params, strips, gts, rules, True, cfg, "tta_prior_knowledge"
    )
    reports.extend([tta_plain, tta_prior])
    return reports, trajectory


def evaluate(
    ckpt_path: str | Path,
    manifest_path: str | Path,
    rules: EncodingRules | None,
    with_tta: bool,
    with_prior: bool,
    cfg: AblationConfig | None = None,
    label: str = "run",
) -> tuple[EvalReport, list[TrajectoryRecord]]:
    """Single-cell evaluation with explicit switches."""
    cfg = cfg or AblationConfig()
    params, entries, strips = load_eval_inputs(ckpt_path, manifest_path)
    gts = [e.label for e in entries]
    if with_tta:
        return _eval_adaptive(params, strips, gts, rules, with_prior, cfg, label)
    return _eval_frozen(params, strips, gts, rules, with_prior, cfg, label), []


# ---- entropy vs error ----


@dataclass(frozen=True)
class EntropyBin:
    lower: float
    upper: float
    error_rate: float
    count: int


@dataclass
class EntropyErrorReport:
    bins: list[EntropyBin]
    rank_correlation: float


def entropy_error_report(
    records: list[SampleRecord], n_bins: int = 10
) -> EntropyErrorReport:
    """Bin per-sample mean entropy and report the error rate per bin, plus
    the rank correlation between entropy and the error indicator.

    Bins are equal width across the observed entropy range; empty bins
    report a zero rate.  Needs at least ``n_bins`` samples.
    """
    if n_bins < 2:
        raise ValueError("need at least two bins")
    if len(records) < n_bins:
        raise ValueError(f"need at least {n_bins} samples, have {len(records)}")
    ent = np.array([r.mean_entropy for r in records])
    err = np.array([0.0 if r.correct else 1.0 for r in records])
    lo, hi = float(ent.min()), float(ent.max())
    if hi <= lo:
        hi = lo + 1e-12  # degenerate range: single populated bin
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.digitize(ent, edges[1:-1]), 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        rate = float(err[mask].mean()) if count else 0.0
        bins.append(EntropyBin(float(edges[b]), float(edges[b + 1]), rate, count))
    if np.all(err == err[0]) or np.all(ent == ent[0]):
        rho = 0.0  # correlation undefined on a constant margin
    else:
        rho = float(spearmanr(ent, err).statistic)
    return EntropyErrorReport(bins, rho)


# ---- report files ----


def write_reports(
    reports: list[EvalReport], out_dir: str | Path
) -> None:
    """summary.csv, one samples_<label>.csv per cell, and report.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "exact_match", "mean_edit_distance", "samples"])
        for rep in reports:
            writer.writerow(
                [
                    rep.label,
                    format(rep.exact_match, ".17g"),
                    format(rep.mean_edit_distance, ".17g"),
                    len(rep.records),
                ]
            )
    for rep in reports:
        with open(
            out / f"samples_{rep.label}.csv", "w", newline="", encoding="utf-8"
        ) as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "index",
                    "ground_truth",
                    "prediction",
                    "edit_distance",
                    "mean_entropy",
                    "repaired",
                    "rule_corrected",
                    "unresolved",
                ]
            )
            for r in rep.records:
                writer.writerow(
                    [
                        r.index,
                        r.ground_truth,
                        r.prediction,
                        r.edit_distance,
                        format(r.mean_entropy, ".17g"),
                        r.n_repaired,
                        r.n_rule_corrected,
                        r.n_unresolved,
                    ]
                )
    lines = ["method summary", "--------------"]
    width = max(len(r.label) for r in reports)
    for rep in reports:
        lines.append(
            f"{rep.label:<{width}}  exact match {rep.exact_match:.4f}  "
            f"mean edit distance {rep.mean_edit_distance:.4f}  "
            f"({len(rep.records)} samples)"
        )
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_entropy_error(report: EntropyErrorReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lower", "bin_upper", "error_rate", "count"])
        for b in report.bins:
            writer.writerow(
                [
                    format(b.lower, ".17g"),
                    format(b.upper, ".17g"),
                    format(b.error_rate, ".17g"),
                    b.count,
                ]
            )
        writer.writerow(
            ["rank_correlation", format(report.rank_correlation, ".17g"), "", ""]
        )
