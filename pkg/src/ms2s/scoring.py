"""RTTM input/output and diarization error scoring (DER, JER).

Times are quantized to 0.1 ms ticks so all interval arithmetic is exact
integer arithmetic.  Speaker mapping is the optimal one-to-one assignment
on overlapping speech time.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import FormatError, InputError
from .storage import atomic_open

TICKS_PER_S = 10_000


@dataclass(frozen=True)
class RttmSegment:
    rec_id: str
    speaker: str
    onset_s: float
    duration_s: float
    channel: str = "1"

    def __post_init__(self):
        if not self.duration_s > 0:
            raise FormatError(f"segment of {self.speaker} in {self.rec_id} has duration {self.duration_s}")

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


def parse_rttm(path) -> list[RttmSegment]:
    """SPEAKER lines only; blank lines and ';;' comments are skipped."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith(";;"):
                continue
            f = line.split()
            if f[0] != "SPEAKER":
                raise FormatError(f"{path}:{lineno}: expected a SPEAKER record, got {f[0]!r}")
            if len(f) != 10:
                raise FormatError(f"{path}:{lineno}: expected 10 fields, got {len(f)}")
            try:
                onset, dur = float(f[3]), float(f[4])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not dur > 0:
                raise FormatError(f"{path}:{lineno}: non-positive duration {f[4]}")
            out.append(RttmSegment(f[1], f[7], onset, dur, f[2]))
    return out


def format_rttm(segments: Iterable[RttmSegment]) -> str:
    return "".join(
        f"SPEAKER {s.rec_id} {s.channel} {s.onset_s:.3f} {s.duration_s:.3f} <NA> <NA> {s.speaker} <NA> <NA>\n"
        for s in segments
    )


def write_rttm(path, segments: Iterable[RttmSegment]) -> None:
    with atomic_open(Path(path), "w") as fh:
        fh.write(format_rttm(segments))


def by_recording(segments: Iterable[RttmSegment]) -> dict[str, list[RttmSegment]]:
    out: dict[str, list[RttmSegment]] = defaultdict(list)
    for s in segments:
        out[s.rec_id].append(s)
    return dict(out)


def mask_to_segments(mask: np.ndarray, frame_hop_s: float, rec_id: str, labels: Sequence[str] | None = None) -> list[RttmSegment]:
    """Runs of 1s in each row of an (N, T) mask, as segments sorted by onset."""
    out = []
    for n, row in enumerate(np.asarray(mask) > 0):
        d = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
        starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
        name = labels[n] if labels is not None else f"spk{n}"
        out += [RttmSegment(rec_id, name, a * frame_hop_s, (b - a) * frame_hop_s) for a, b in zip(starts, ends)]
    return sorted(out, key=lambda s: (s.onset_s, s.speaker))


# -- interval scoring --------------------------------------------------------------


def _ticks(t: float) -> int:
    return int(round(t * TICKS_PER_S))


@dataclass
class DerReport:
    miss_s: float
    fa_s: float
    conf_s: float
    ref_s: float
    jer: float
    mapping: dict = field(default_factory=dict)

    @property
    def error_s(self) -> float:
        return self.miss_s + self.fa_s + self.conf_s

    @property
    def der(self) -> float:
        return self.error_s / self.ref_s


def _activity(segments: Sequence[RttmSegment]) -> dict[str, list[tuple[int, int]]]:
    out: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for s in segments:
        out[s.speaker].append((_ticks(s.onset_s), _ticks(s.end_s)))
    return out


def _elementary(ref, hyp, collar_ticks: int):
    """Split the timeline at every boundary; return (lengths, ref act, hyp act, scored)."""
    bounds = {0}
    for acts in (ref, hyp):
        for spans in acts.values():
            for a, b in spans:
                bounds.update((a, b))
    zones = []
    if collar_ticks > 0:
        for spans in ref.values():
            for a, b in spans:
                for t in (a, b):
                    zones.append((max(0, t - collar_ticks), t + collar_ticks))
                    bounds.update(zones[-1])
    edges = np.array(sorted(bounds), dtype=np.int64)
    lo, hi = edges[:-1], edges[1:]
    mid2 = lo + hi  # twice the midpoint, keeps everything integral

    def covered(spans):
        m = np.zeros(len(lo), dtype=bool)
        for a, b in spans:
            m |= (mid2 > 2 * a) & (mid2 < 2 * b)
        return m

    R = np.array([covered(s) for s in ref.values()]).reshape(len(ref), len(lo))
    H = np.array([covered(s) for s in hyp.values()]).reshape(len(hyp), len(lo))
    scored = ~covered(zones) if zones else np.ones(len(lo), dtype=bool)
    return hi - lo, R, H, scored


def der(
    ref: Sequence[RttmSegment],
    hyp: Sequence[RttmSegment],
    collar: float = 0.25,
    score_overlap: bool = True,
) -> DerReport:
    """Diarization error of one recording under the optimal speaker mapping.

    ``collar`` seconds either side of every reference boundary are not
    scored.  With ``score_overlap`` False, regions where two or more
    reference speakers talk are not scored either.
    """
    ref_act, hyp_act = _activity(ref), _activity(hyp)
    if not ref_act:
        raise InputError("empty reference: DER is undefined")
    L, R, H, scored = _elementary(ref_act, hyp_act, _ticks(collar))
    if not score_overlap:
        scored &= R.sum(axis=0) < 2
    L = np.where(scored, L, 0)
    nr, nh = R.sum(axis=0), H.sum(axis=0)
    ref_total = int((L * nr).sum())
    if ref_total == 0:
        raise InputError("no scored reference speech: DER is undefined")

    overlap = (R[:, None, :] & H[None, :, :]) @ L if len(hyp_act) else np.zeros((len(ref_act), 0), dtype=np.int64)
    ri, hi = linear_sum_assignment(-overlap) if overlap.size else (np.array([], int), np.array([], int))
    ref_names, hyp_names = list(ref_act), list(hyp_act)
    mapping = {ref_names[r]: hyp_names[h] for r, h in zip(ri, hi) if overlap[r, h] > 0}

    correct = np.zeros(len(L), dtype=np.int64)
    for r, h in zip(ri, hi):
        correct += R[r] & H[h]
    miss = int((L * np.maximum(nr - nh, 0)).sum())
    fa = int((L * np.maximum(nh - nr, 0)).sum())
    conf = int((L * (np.minimum(nr, nh) - correct)).sum())

    jers = []
    for r, name in enumerate(ref_names):
        ref_time = int((L * R[r]).sum())
        if ref_time == 0:
            continue
        if name not in mapping:
            jers.append(1.0)
            continue
        h = hyp_names.index(mapping[name])
        inter = int((L * (R[r] & H[h])).sum())
        union = int((L * (R[r] | H[h])).sum())
        jers.append(1.0 - inter / union)
    s = 1.0 / TICKS_PER_S
    return DerReport(miss * s, fa * s, conf * s, ref_total * s, float(np.mean(jers)), mapping)


def jer(ref: Sequence[RttmSegment], hyp: Sequence[RttmSegment], collar: float = 0.25) -> float:
    return der(ref, hyp, collar).jer


def frame_der(ref: np.ndarray, hyp: np.ndarray) -> tuple[float, float]:
    """Frame-level (error frames, reference frames) for (N, T) and (M, T) binary masks.

    Hypothesis rows are mapped to reference rows optimally, so slot order
    does not matter.
    """
    ref, hyp = np.asarray(ref) > 0, np.asarray(hyp) > 0
    if ref.shape[-1] != hyp.shape[-1]:
        raise InputError(f"frame counts differ: {ref.shape[-1]} vs {hyp.shape[-1]}")
    nr, nh = ref.sum(axis=0), hyp.sum(axis=0)
    ov = ref.astype(np.int64) @ hyp.T.astype(np.int64)
    ri, hi = linear_sum_assignment(-ov)
    correct = ov[ri, hi].sum()
    return float(np.maximum(nr, nh).sum() - correct), float(nr.sum())


# -- reports ---------------------------------------------------------------------


def score_recordings(
    ref: Mapping[str, Sequence[RttmSegment]],
    hyp: Mapping[str, Sequence[RttmSegment]],
    collar: float = 0.25,
    score_overlap: bool = True,
) -> dict[str, DerReport]:
    if set(hyp) - set(ref):
        raise InputError(f"hypothesis recordings without reference: {sorted(set(hyp) - set(ref))}")
    # a recording with no hypothesis speech is legitimately all-miss
    hyp = {**{k: [] for k in ref}, **hyp}
    return {rec: der(ref[rec], hyp[rec], collar, score_overlap) for rec in sorted(ref)}


def macro(reports: Mapping[str, DerReport]) -> dict[str, float]:
    """Unweighted mean over recordings, plus the time-pooled DER."""
    r = list(reports.values())
    return {
        "der": float(np.mean([x.der for x in r])),
        "jer": float(np.mean([x.jer for x in r])),
        "pooled_der": sum(x.error_s for x in r) / sum(x.ref_s for x in r),
    }


REPORT_FIELDS = ["recording", "miss_s", "fa_s", "conf_s", "ref_s", "der", "jer"]


def report_rows(reports: Mapping[str, DerReport]) -> list[list]:
    rows = [[k, v.miss_s, v.fa_s, v.conf_s, v.ref_s, v.der, v.jer] for k, v in reports.items()]
    m = macro(reports)
    rows.append(["MACRO", "", "", "", "", m["der"], m["jer"]])
    return rows


def report_csv(reports: Mapping[str, DerReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for row in report_rows(reports):
        w.writerow([f"{x:.4f}" if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def report_table(reports: Mapping[str, DerReport]) -> str:
    head = f"{'recording':<20} {'miss':>8} {'fa':>8} {'conf':>8} {'ref':>9} {'DER%':>7} {'JER%':>7}"
    lines = [head, "-" * len(head)]
    for row in report_rows(reports):
        name, *nums = row
        secs = [f"{x:8.2f}" if x != "" else " " * 8 for x in nums[:3]]
        ref = f"{nums[3]:9.2f}" if nums[3] != "" else " " * 9
        lines.append(f"{name:<20} {' '.join(secs)} {ref} {100 * nums[4]:7.2f} {100 * nums[5]:7.2f}")
    return "\n".join(lines)
