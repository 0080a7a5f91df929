"""NFE / speedup / acceptance accounting, exports, and the KS utility.

CSV column contract (one row per episode, in this order)::

    episode_id, success, progress, steps, cycles, target_passes, draft_calls,
    nfe, baseline_nfe, nfe_percent, speedup, drafts_proposed, drafts_accepted,
    acceptance_rate
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ks_2samp

from .errors import ParameterError
from .speculative import NfeTally

CSV_COLUMNS = (
    "episode_id", "success", "progress", "steps", "cycles", "target_passes", "draft_calls",
    "nfe", "baseline_nfe", "nfe_percent", "speedup", "drafts_proposed", "drafts_accepted",
    "acceptance_rate",
)


@dataclass
class RunReport:
    """Outcome of one episode (or one bare denoising run when ``steps == 0``).

    The ``*_per_cycle`` series have one entry per denoising cycle (action-chunk
    generation); ``speed_per_step`` has one entry per executed environment step.
    """

    episode_id: int
    success: bool
    progress: float
    tally: NfeTally
    num_steps: int
    steps: int = 0
    accepted_per_cycle: list = field(default_factory=list)
    proposed_per_cycle: list = field(default_factory=list)
    tested_per_cycle: list = field(default_factory=list)
    target_passes_per_cycle: list = field(default_factory=list)
    speed_per_step: list = field(default_factory=list)
    params_per_cycle: list = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return len(self.accepted_per_cycle)

    @property
    def acceptance_rate(self) -> float:
        prop = sum(self.proposed_per_cycle)
        return sum(self.accepted_per_cycle) / prop if prop else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tally"] = self.tally.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        t = d.pop("tally")
        tally = NfeTally(t["target_passes"], t["draft_calls"], t["cost_weight"], t["baseline_nfe"])
        return cls(tally=tally, **d)


def aggregate(reports) -> dict:
    """Summary over reports; NFE% is relative to ``T`` target passes per cycle."""
    reports = list(reports)
    if not reports:
        raise ParameterError("aggregate needs at least one report")
    nfe = sum(r.tally.nfe for r in reports)
    base = sum(r.tally.baseline_nfe for r in reports)
    passes = sum(r.tally.target_passes for r in reports)
    cycles = sum(r.cycles for r in reports)
    proposed = sum(sum(r.proposed_per_cycle) for r in reports)
    accepted = sum(sum(r.accepted_per_cycle) for r in reports)
    tested = sum(sum(r.tested_per_cycle) for r in reports)
    nfe_pct = 100.0 * nfe / base
    return {
        "episodes": len(reports),
        "success_rate": float(np.mean([r.success for r in reports])),
        "mean_progress": float(np.mean([r.progress for r in reports])),
        "nfe_percent": nfe_pct,
        "speedup": 100.0 / nfe_pct,
        "target_pass_reduction": base / passes if passes else float("inf"),
        "acceptance_rate": accepted / proposed if proposed else 0.0,
        "per_test_acceptance": accepted / tested if tested else 0.0,
        "mean_draft_count": proposed / cycles if cycles else 0.0,
        "mean_accepted_drafts": accepted / cycles if cycles else 0.0,
    }


def report_from_tally(episode_id, tally: NfeTally, records, num_steps, success=True, progress=1.0):
    """Wrap one bare denoising run (no environment) as a report."""
    return RunReport(
        episode_id=episode_id, success=success, progress=progress, tally=tally,
        num_steps=num_steps,
        accepted_per_cycle=[sum(r.num_accepted_drafts for r in records)],
        proposed_per_cycle=[sum(len(r.p) - 1 for r in records)],
        tested_per_cycle=[sum(r.num_tested_drafts for r in records)],
        target_passes_per_cycle=[tally.target_passes],
    )


# ------------------------------------------------------------------ KS


def ks_critical(alpha: float, n: int, m: int) -> float:
    c = math.sqrt(-0.5 * math.log(alpha / 2.0))
    return c * math.sqrt((n + m) / (n * m))


def ks_two_sample(a, b, alpha: float = 1e-3, min_size: int = 1000):
    """Two-sample Kolmogorov–Smirnov statistic and its asymptotic critical value.

    Returns ``(statistic, critical)``; the null of equal laws is rejected at
    level ``alpha`` when ``statistic > critical``.
    """
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.size < min_size or b.size < min_size:
        raise ParameterError(f"KS test needs at least {min_size} draws per sample")
    stat = ks_2samp(a, b, method="asymp").statistic
    return float(stat), ks_critical(alpha, a.size, b.size)


# ------------------------------------------------------------------ event log


def write_events(events, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for ev in events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write event log {path}: {exc}") from exc
    return path


def read_events(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_events(events):
    """Recount ``(target_passes, draft_calls)`` from round structure alone.

    A round pays a fresh target pass when it opens a denoising run or follows
    a round that ended without a reusable target output (no drafts, or a
    coupling correction); it pays one verification pass whenever it drafted.
    """
    passes = calls = 0
    prev = None
    for ev in events:
        if ev["round"] == 0 or prev is None or prev["k_eff"] == 0 or prev["coupled"]:
            passes += 1
        if ev["k_eff"] > 0:
            passes += 1
        calls += ev["k_eff"]
        prev = ev
    return passes, calls


# ------------------------------------------------------------------ export


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _csv_row(r: RunReport):
    base = r.tally.baseline_nfe
    return (
        r.episode_id, r.success, float(r.progress), r.steps, r.cycles, r.tally.target_passes,
        r.tally.draft_calls, float(r.tally.nfe), float(base),
        float(100.0 * r.tally.nfe / base) if base else 0.0,
        float(base / r.tally.nfe) if r.tally.nfe else 0.0,
        sum(r.proposed_per_cycle), sum(r.accepted_per_cycle), float(r.acceptance_rate),
    )


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=True, indent=1)


def load_reports_json(path):
    with open(path) as fh:
        return [RunReport.from_dict(d) for d in json.load(fh)]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([_fmt(v) for v in _csv_row(r)])
    return buf.getvalue()


_COLORS = ("#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def svg_series(series, title, ylabel, width=640, height=240) -> str:
    """Minimal SVG line chart with one ``<polyline>`` per series."""
    pad = 40
    vals = [v for s in series for v in s]
    ymax = max(vals) if vals else 1.0
    ymin = min(0.0, min(vals)) if vals else 0.0
    span = (ymax - ymin) or 1.0
    xmax = max((len(s) for s in series), default=1) - 1 or 1
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{width // 2}" y="16" text-anchor="middle" font-size="12">{title}</text>',
        f'<text x="10" y="{height // 2}" font-size="10" transform="rotate(-90 10 {height // 2})">'
        f'{ylabel}</text>',
        f'<rect x="{pad}" y="{pad // 2}" width="{width - 2 * pad}" height="{height - 1.5 * pad:.0f}" '
        'fill="none" stroke="#999"/>',
    ]
    for k, s in enumerate(series):
        pts = " ".join(
            f"{pad + i / xmax * (width - 2 * pad):.2f},"
            f"{pad // 2 + (1 - (v - ymin) / span) * (height - 1.5 * pad):.2f}"
            for i, v in enumerate(s)
        )
        out.append(f'<polyline fill="none" stroke="{_COLORS[k % len(_COLORS)]}" '
                   f'stroke-width="1.2" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export(reports, path, format: str = "json"):
    """Write reports as ``json``/``csv`` (``path`` is a file) or ``svg-plots`` (``path`` is a directory).

    Output bytes depend only on the reports. Returns the written paths.
    """
    reports = list(reports)
    path = Path(path)
    try:
        if format == "json":
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(reports_to_json(reports))
            return [path]
        if format == "csv":
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(reports_to_csv(reports))
            return [path]
        if format == "svg-plots":
            path.mkdir(parents=True, exist_ok=True)
            rates = [[a / p if p else 1.0 for a, p in zip(r.accepted_per_cycle, r.proposed_per_cycle)]
                     for r in reports]
            files = {
                "acceptance_rate.svg": svg_series(rates, "Acceptance rate per cycle", "rate"),
                "draft_count.svg": svg_series([list(map(float, r.accepted_per_cycle)) for r in reports],
                                              "Accepted drafts per cycle", "drafts"),
                "speed.svg": svg_series([list(map(float, r.speed_per_step)) for r in reports],
                                        "Agent speed per step", "speed"),
            }
            written = []
            for name, text in files.items():
                (path / name).write_text(text)
                written.append(path / name)
            return written
    except OSError as exc:
        raise OSError(f"export to {path} failed: {exc}") from exc
    raise ParameterError(f"unknown export format {format!r}")
