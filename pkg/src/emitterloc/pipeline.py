"""End-to-end localization: registration, detection, fitting, reporting."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import Candidate, detect_candidates, dog_bandpass
from .errors import EmitterLocError, IoError, ParameterError, RegistrationError
from .image_model import Image, RegionOfInterest
from .mle import OptimizerOptions, SubRoiData, fit_mle
from .registration import FieldRegistration, RegistrationConfig, corrected_frame, register_field

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
RESULTS_SCHEMA_VERSION = 1
CSV_COLUMNS = ("qd", "index", "x_um", "y_um", "dx_nm", "dx_mle_nm", "dy_nm", "dy_mle_nm", "converged")
THREADS_ENV = "EMITTERLOC_THREADS"


@dataclass(frozen=True)
class DetectionConfig:
    sigma_low: float = 1.0
    sigma_high: float = 8.0
    # noise maxima in a ~0.5 Mpx search area reach about 5 MAD-sigma
    threshold_sigma: float = 8.0
    min_separation: float = 4.0
    subroi_halfwidth: int = 5
    # extra inset of the search ROI beyond the mark arms, pixels
    roi_margin: int = 8

    def __post_init__(self):
        if not 0 < self.sigma_low < self.sigma_high:
            raise ParameterError("need 0 < sigma_low < sigma_high")
        if self.threshold_sigma <= 0:
            raise ParameterError("threshold_sigma must be positive")
        if self.min_separation < 0:
            raise ParameterError("min_separation must be >= 0")
        if self.subroi_halfwidth < 2:
            raise ParameterError("subroi_halfwidth must be >= 2")
        if self.roi_margin < 0:
            raise ParameterError("roi_margin must be >= 0")


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ParameterError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ParameterError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ParameterError(f"bad {where}: {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    """Everything :func:`run_pipeline` needs besides the image.

    ``nominal_marks`` are the expected mark centres in pixels, in the order
    top-left, top-right, bottom-right, bottom-left; ``pitch_nm`` is the
    designed distance between neighbouring marks.
    """

    nominal_marks: tuple[tuple[float, float], ...]
    pitch_nm: float
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    em_gain_active: bool = False
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ParameterError(f"unsupported config schema_version {self.schema_version}")
        marks = tuple(tuple(float(v) for v in m) for m in self.nominal_marks)
        if len(marks) != 4 or any(len(m) != 2 for m in marks):
            raise ParameterError("nominal_marks must list four (x, y) pairs")
        if not all(math.isfinite(v) for m in marks for v in m):
            raise ParameterError("nominal_marks must be finite")
        object.__setattr__(self, "nominal_marks", marks)
        if not (math.isfinite(self.pitch_nm) and self.pitch_nm > 0):
            raise ParameterError("pitch_nm must be positive")
        if not isinstance(self.em_gain_active, bool):
            raise ParameterError("em_gain_active must be true or false")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ParameterError("config must be a JSON object")
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != CONFIG_SCHEMA_VERSION:
            raise ParameterError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
        reg = _build(RegistrationConfig, d.pop("registration", None), "registration")
        det = _build(DetectionConfig, d.pop("detection", None), "detection")
        opt = _build(OptimizerOptions, d.pop("optimizer", None), "optimizer")
        for key in ("nominal_marks", "pitch_nm"):
            if key not in d:
                raise ParameterError(f"config is missing '{key}'")
        marks = d.pop("nominal_marks")
        pitch = d.pop("pitch_nm")
        em = d.pop("em_gain_active", False)
        if d:
            raise ParameterError(f"unknown config keys: {', '.join(sorted(d))}")
        try:
            pitch = float(pitch)
        except (TypeError, ValueError) as exc:
            raise ParameterError("pitch_nm must be a number") from exc
        return cls(marks, pitch, reg, det, opt, em)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "nominal_marks": [list(m) for m in self.nominal_marks],
            "pitch_nm": self.pitch_nm,
            "em_gain_active": self.em_gain_active,
            "registration": dataclasses.asdict(self.registration),
            "detection": dataclasses.asdict(self.detection),
            "optimizer": dataclasses.asdict(self.optimizer),
        }

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class PositionRecord:
    """One row of the position table.

    Positions are in micrometres from the field centre with x to the right
    and y upward.  ``None`` uncertainties mark a failed fit.
    """

    qd: int
    index: int
    x_um: float
    y_um: float
    dx_nm: float | None
    dx_mle_nm: float | None
    dy_nm: float | None
    dy_mle_nm: float | None
    converged: bool

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


@dataclass(frozen=True)
class PipelineResult:
    registration: FieldRegistration
    roi: RegionOfInterest
    candidates: tuple[Candidate, ...]
    records: tuple[PositionRecord, ...]
    # candidate index -> (x, y) fitted position in corrected-frame pixels
    fitted_px: dict = field(default_factory=dict)


def combine_uncertainty(delta_mle: float, field_term: float) -> float:
    """Quadrature sum of the fit uncertainty and the field-reference term (nm)."""
    if delta_mle < 0 or field_term < 0:
        raise ParameterError("uncertainties must be non-negative")
    return math.hypot(delta_mle, field_term)


def field_terms_nm(reg: FieldRegistration) -> tuple[float, float]:
    """Per-axis RMS of the four mark confidence half-widths, in nm."""
    ci = np.asarray(reg.mark_ci68, dtype=np.float64)
    s = reg.pixel_scale.nanometers_per_pixel
    return (
        float(np.sqrt(np.mean(ci[:, 0] ** 2)) * s),
        float(np.sqrt(np.mean(ci[:, 1] ** 2)) * s),
    )


def thread_count(default: int | None = None) -> int:
    """Worker count, capped by ``EMITTERLOC_THREADS`` when it is set."""
    n = default or min(8, os.cpu_count() or 1)
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise ParameterError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
        if cap < 1:
            raise ParameterError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        n = min(n, cap)
    return max(1, n)


def search_roi(reg: FieldRegistration, cfg: PipelineConfig, shape) -> RegionOfInterest:
    """Area bounded by the marks, shrunk so the mark arms stay outside."""
    pts = np.array([[p.x, p.y] for p in reg.mark_centers])
    inset = cfg.registration.arm_length + cfg.detection.roi_margin
    x0 = int(math.ceil(pts[:, 0].min() + inset))
    y0 = int(math.ceil(pts[:, 1].min() + inset))
    x1 = int(math.floor(pts[:, 0].max() - inset)) + 1
    y1 = int(math.floor(pts[:, 1].max() - inset)) + 1
    h, w = shape
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        raise RegistrationError("registered marks enclose no searchable area")
    return RegionOfInterest(x0, y0, x1 - x0, y1 - y0)


def _fit_one(counts: np.ndarray, cand: Candidate, cfg: PipelineConfig):
    sub = cand.subroi
    try:
        data = SubRoiData(counts[sub.slices], origin=(sub.x0, sub.y0))
        return fit_mle(data, opts=cfg.optimizer, em_gain_active=cfg.em_gain_active)
    except (EmitterLocError, ValueError, ArithmeticError) as exc:
        log.warning("fit of candidate at (%.2f, %.2f) failed: %s", cand.centroid.x, cand.centroid.y, exc)
        return None


def run_pipeline(config: PipelineConfig, image: Image, workers: int | None = None) -> PipelineResult:
    """Register the field, find the emitters and localize them.

    Registration errors propagate.  A candidate whose fit fails is kept
    with ``converged=False``, positioned at its detection centroid and
    without uncertainties.
    """
    reg = register_field(image, config.nominal_marks, config.pitch_nm, config.registration)
    frame = corrected_frame(image, reg)
    roi = search_roi(reg, config, frame.counts.shape)
    det = config.detection
    filtered = dog_bandpass(frame, det.sigma_low, det.sigma_high)
    cands = detect_candidates(filtered, roi, det.threshold_sigma, det.min_separation, det.subroi_halfwidth)

    counts = np.asarray(frame.counts)
    n_workers = thread_count(workers)
    if n_workers > 1 and len(cands) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            fits = list(pool.map(lambda c: _fit_one(counts, c, config), cands))
    else:
        fits = [_fit_one(counts, c, config) for c in cands]

    s = reg.pixel_scale.nanometers_per_pixel
    cx, cy = reg.field_center.x, reg.field_center.y
    fx, fy = field_terms_nm(reg)
    rows = []
    fitted = {}
    for idx, (cand, res) in enumerate(zip(cands, fits)):
        if res is None:
            px, py = cand.centroid.x, cand.centroid.y
            dx = dy = dxm = dym = None
            ok = False
        else:
            px, py = res.theta_hat.i0, res.theta_hat.j0
            dxm = float(res.crlb_sigma[0]) * s
            dym = float(res.crlb_sigma[1]) * s
            dx = combine_uncertainty(dxm, fx)
            dy = combine_uncertainty(dym, fy)
            ok = bool(res.converged)
        fitted[idx] = (float(px), float(py))
        rows.append((idx, (px - cx) * s / 1000.0, -(py - cy) * s / 1000.0, dx, dxm, dy, dym, ok))

    def order(r):
        dx, dy = r[3], r[5]
        total = math.inf if dx is None else math.hypot(dx, dy)
        return (total, r[0])

    rows.sort(key=order)
    records = tuple(
        PositionRecord(qd, idx, float(x), float(y), dx, dxm, dy, dym, ok)
        for qd, (idx, x, y, dx, dxm, dy, dym, ok) in enumerate(rows, start=1)
    )
    return PipelineResult(reg, roi, tuple(cands), records, fitted)


# --- output writers ------------------------------------------------------

def _num(v):
    return "" if v is None else repr(float(v))


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([
            r.qd, r.index, _num(r.x_um), _num(r.y_um), _num(r.dx_nm), _num(r.dx_mle_nm),
            _num(r.dy_nm), _num(r.dy_mle_nm), "true" if r.converged else "false",
        ])
    return buf.getvalue()


def results_dict(result: PipelineResult) -> dict:
    reg = result.registration
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "registration": {
            "mark_centers_px": [[p.x, p.y] for p in reg.mark_centers],
            "mark_ci68_px": [list(ci) for ci in reg.mark_ci68],
            "field_center_px": [reg.field_center.x, reg.field_center.y],
            "rotation_deg": reg.rotation_deg,
            "nanometers_per_pixel": reg.pixel_scale.nanometers_per_pixel,
            "iterations_used": reg.iterations_used,
            "angle_history_deg": list(reg.angle_history),
            "warnings": list(reg.warnings),
        },
        "roi_px": [result.roi.x0, result.roi.y0, result.roi.width, result.roi.height],
        "records": [r.as_row() for r in result.records],
    }


def results_json(result: PipelineResult) -> str:
    return json.dumps(results_dict(result), indent=2, allow_nan=False) + "\n"


def _f(v: float) -> str:
    return f"{v:.3f}"


def overlay_svg(result: PipelineResult, width: int, height: int) -> str:
    """Markup for the overlay: marks as red ``+``, field centre as red ``*``,
    emitters as blue ``x`` labelled with their table number."""
    reg = result.registration
    arm = 12.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#202020"/>',
        f'<rect x="{result.roi.x0 - 0.5}" y="{result.roi.y0 - 0.5}" width="{result.roi.width}" '
        f'height="{result.roi.height}" fill="none" stroke="#808080" stroke-dasharray="6 4"/>',
    ]
    for p in reg.mark_centers:
        x, y = p.x, p.y
        out.append(
            f'<path d="M{_f(x - arm)} {_f(y)}H{_f(x + arm)}M{_f(x)} {_f(y - arm)}V{_f(y + arm)}" '
            'stroke="red" stroke-width="2" fill="none"/>'
        )
    cx, cy = reg.field_center.x, reg.field_center.y
    star = []
    for k in range(3):
        a = math.pi * k / 3
        dx, dy = arm * math.cos(a), arm * math.sin(a)
        star.append(f"M{_f(cx - dx)} {_f(cy - dy)}L{_f(cx + dx)} {_f(cy + dy)}")
    out.append(f'<path d="{"".join(star)}" stroke="red" stroke-width="2" fill="none"/>')
    d = arm * 0.6
    for r in result.records:
        x, y = result.fitted_px[r.index]
        out.append(
            f'<path d="M{_f(x - d)} {_f(y - d)}L{_f(x + d)} {_f(y + d)}M{_f(x - d)} {_f(y + d)}L{_f(x + d)} {_f(y - d)}" '
            'stroke="#3080ff" stroke-width="2" fill="none"/>'
        )
        out.append(
            f'<text x="{_f(x + d + 2)}" y="{_f(y - d - 2)}" fill="#3080ff" font-size="14" '
            f'font-family="sans-serif">{r.qd}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_outputs(result: PipelineResult, prefix, width: int, height: int) -> list[Path]:
    """Write ``<prefix>.csv``, ``<prefix>.json`` and ``<prefix>.svg``."""
    prefix = Path(prefix)
    targets = [
        (prefix.with_name(prefix.name + ".csv"), records_csv(result.records)),
        (prefix.with_name(prefix.name + ".json"), results_json(result)),
        (prefix.with_name(prefix.name + ".svg"), overlay_svg(result, width, height)),
    ]
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        for path, text in targets:
            with open(path, "w", newline="") as fh:
                fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write outputs under {prefix}: {exc}") from exc
    return [p for p, _ in targets]
