"""Per-scene rank and linearity metrics with four-parameter logistic mapping.

Quality labels produced by within-scene pairwise comparison are only
comparable inside a scene, so SRCC/PLCC/KRCC/MAE are computed per scene
and then averaged (unweighted) over qualifying scenes. Predictions are
passed through a monotone four-parameter logistic before PLCC/MAE to
compensate for prediction nonlinearity:

    f(x) = beta2 + (beta1 - beta2) / (1 + exp(-(x - beta3) / |beta4|))
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import optimize, stats

from .errors import DegenerateInput, LengthMismatch, NoQualifyingScene

MIN_POINTS_FOR_LOGISTIC = 5


def _validate_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 1 or gt.ndim != 1:
        raise LengthMismatch("pred and gt must be 1-D vectors")
    if pred.shape[0] != gt.shape[0]:
        raise LengthMismatch(f"length mismatch: {pred.shape[0]} vs {gt.shape[0]}")
    if pred.shape[0] < 2:
        raise DegenerateInput("need at least 2 samples")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise DegenerateInput("non-finite values in input")
    if np.ptp(pred) == 0.0:
        raise DegenerateInput("pred is constant")
    if np.ptp(gt) == 0.0:
        raise DegenerateInput("gt is constant")
    return pred, gt


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        raise DegenerateInput("constant vector in correlation")
    return float(np.dot(a, b) / denom)


def srcc(pred, gt) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    pred, gt = _validate_pair(pred, gt)
    rp = stats.rankdata(pred, method="average")
    rg = stats.rankdata(gt, method="average")
    if np.ptp(rp) == 0.0 or np.ptp(rg) == 0.0:
        raise DegenerateInput("rank vector is constant")
    return _pearson(rp, rg)


def krcc(pred, gt) -> float:
    """Kendall rank correlation, tau-b (tie-corrected)."""
    pred, gt = _validate_pair(pred, gt)
    tau = stats.kendalltau(pred, gt, variant="b").statistic
    if not np.isfinite(tau):
        raise DegenerateInput("tau-b undefined on this input")
    return float(tau)


def four_param_logistic(x, beta1: float, beta2: float, beta3: float, beta4: float):
    """Monotone logistic between asymptotes beta1 and beta2."""
    z = np.clip(-(np.asarray(x, dtype=np.float64) - beta3) / abs(beta4), -500.0, 500.0)
    return beta2 + (beta1 - beta2) / (1.0 + np.exp(z))


@dataclass(frozen=True)
class FourParamLogistic:
    beta1: float
    beta2: float
    beta3: float
    beta4: float

    def __call__(self, x):
        return four_param_logistic(x, self.beta1, self.beta2, self.beta3, self.beta4)


@dataclass(frozen=True)
class LogisticFit:
    """Fitted prediction-to-score mapping, logistic or linear fallback."""

    logistic: FourParamLogistic | None
    slope: float | None = None
    intercept: float | None = None
    fallback: bool = False
    reason: str = ""

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.fallback:
            return self.slope * x + self.intercept
        return self.logistic(x)

    def to_dict(self) -> dict:
        if self.fallback:
            return {
                "fallback": True,
                "reason": self.reason,
                "slope": self.slope,
                "intercept": self.intercept,
            }
        return {
            "fallback": False,
            "beta1": self.logistic.beta1,
            "beta2": self.logistic.beta2,
            "beta3": self.logistic.beta3,
            "beta4": self.logistic.beta4,
        }


def _linear_fit(pred: np.ndarray, gt: np.ndarray, reason: str) -> LogisticFit:
    slope, intercept = np.polyfit(pred, gt, 1)
    return LogisticFit(
        logistic=None, slope=float(slope), intercept=float(intercept),
        fallback=True, reason=reason,
    )


def fit_logistic(pred, gt) -> LogisticFit:
    """Least-squares fit of the monotone 4PL from predictions to ground truth.

    Initialization: beta1 = max(gt), beta2 = min(gt), beta3 = median(pred),
    beta4 = std(pred)/4. Falls back to a least-squares linear map when there
    are fewer than MIN_POINTS_FOR_LOGISTIC samples, when the optimizer fails,
    or when the logistic ends up worse than the linear map (a converged fit
    can never lose to a curve shape it contains in the limit).
    """
    pred, gt = _validate_pair(pred, gt)
    if pred.shape[0] < MIN_POINTS_FOR_LOGISTIC:
        return _linear_fit(pred, gt, f"n={pred.shape[0]} < {MIN_POINTS_FOR_LOGISTIC}")
    p0 = [float(np.max(gt)), float(np.min(gt)), float(np.median(pred)),
          float(np.std(pred)) / 4.0]
    try:
        with np.errstate(all="ignore"), warnings.catch_warnings():
            # the parameter covariance is unused; suppress its estimation warning
            warnings.simplefilter("ignore", optimize.OptimizeWarning)
            popt, _ = optimize.curve_fit(
                four_param_logistic, pred, gt, p0=p0, maxfev=20000)
    except (RuntimeError, ValueError):
        return _linear_fit(pred, gt, "optimizer did not converge")
    if not np.all(np.isfinite(popt)) or popt[3] == 0.0:
        return _linear_fit(pred, gt, "non-finite fit parameters")
    fit = LogisticFit(logistic=FourParamLogistic(*(float(b) for b in popt)))
    linear = _linear_fit(pred, gt, "logistic fit worse than linear")
    # The logistic family contains every increasing affine map in the limit,
    # so a converged fit must match the linear candidate on its own
    # least-squares objective; if it does not (local minimum), fall back.
    fit_sse = float(np.sum((fit.predict(pred) - gt) ** 2))
    lin_sse = float(np.sum((linear.predict(pred) - gt) ** 2))
    if fit_sse > lin_sse:
        return linear
    if _mapped_plcc(fit, pred, gt) < _mapped_plcc(linear, pred, gt) - 1e-9:
        return linear
    return fit


def _mapped_plcc(fit: LogisticFit, pred: np.ndarray, gt: np.ndarray) -> float:
    mapped = fit.predict(pred)
    if np.ptp(mapped) == 0.0 or not np.all(np.isfinite(mapped)):
        return -np.inf
    return _pearson(mapped, gt)


def plcc(pred, gt, fit: LogisticFit | None = None) -> float:
    """Pearson correlation of logistic-mapped predictions vs ground truth."""
    pred, gt = _validate_pair(pred, gt)
    if fit is None:
        fit = fit_logistic(pred, gt)
    mapped = fit.predict(pred)
    if np.ptp(mapped) == 0.0:
        return 0.0
    return _pearson(mapped, gt)


def mae(pred, gt, fit: LogisticFit | None = None) -> float:
    """Mean absolute error of logistic-mapped predictions."""
    pred, gt = _validate_pair(pred, gt)
    if fit is None:
        fit = fit_logistic(pred, gt)
    return float(np.mean(np.abs(fit.predict(pred) - gt)))


@dataclass(frozen=True)
class SceneMetrics:
    srcc: float
    plcc: float
    krcc: float
    mae: float
    n: int
    fit: LogisticFit

    def to_dict(self) -> dict:
        return {
            "srcc": self.srcc, "plcc": self.plcc, "krcc": self.krcc,
            "mae": self.mae, "n": self.n, "fit": self.fit.to_dict(),
        }


@dataclass(frozen=True)
class SceneSkip:
    """Scene present in the input but excluded from the average."""

    n: int
    reason: str

    def to_dict(self) -> dict:
        return {"n": self.n, "excluded": True, "reason": self.reason}


@dataclass
class MetricReport:
    attribute: str
    per_scene: dict[str, SceneMetrics | SceneSkip]
    averaged: dict[str, float]
    n_scenes_used: int
    n_scenes_excluded: int
    min_scene_size: int
    schema_version: int = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "attribute": self.attribute,
            "min_scene_size": self.min_scene_size,
            "n_scenes_used": self.n_scenes_used,
            "n_scenes_excluded": self.n_scenes_excluded,
            "averaged": dict(self.averaged),
            "per_scene": {k: v.to_dict() for k, v in self.per_scene.items()},
        }


def scene_metrics(pred, gt) -> SceneMetrics:
    """All four metrics for one scene, sharing a single logistic fit."""
    pred, gt = _validate_pair(pred, gt)
    fit = fit_logistic(pred, gt)
    return SceneMetrics(
        srcc=srcc(pred, gt),
        plcc=plcc(pred, gt, fit=fit),
        krcc=krcc(pred, gt),
        mae=mae(pred, gt, fit=fit),
        n=int(pred.shape[0]),
        fit=fit,
    )


def evaluate_grouped(
    scored: Iterable[tuple[str, float, float]],
    attribute: str = "overall",
    min_scene_size: int = 2,
) -> MetricReport:
    """Per-scene metrics plus their unweighted average.

    `scored` is an iterable of (scene_id, prediction, ground_truth); scenes
    are processed in sorted scene_id order and records in canonical
    (prediction, gt) order, so the report is fully independent of input
    order. Scenes smaller than min_scene_size or with degenerate data are
    reported but excluded from the average.
    """
    by_scene: dict[str, list[tuple[float, float]]] = {}
    for scene_id, pred, gt in scored:
        by_scene.setdefault(str(scene_id), []).append((float(pred), float(gt)))

    per_scene: dict[str, SceneMetrics | SceneSkip] = {}
    used: list[SceneMetrics] = []
    for scene_id in sorted(by_scene):
        pairs = sorted(by_scene[scene_id])
        n = len(pairs)
        if n < max(min_scene_size, 2):
            per_scene[scene_id] = SceneSkip(n=n, reason=f"n={n} < {min_scene_size}")
            continue
        pred = np.array([p for p, _ in pairs])
        gt = np.array([g for _, g in pairs])
        try:
            sm = scene_metrics(pred, gt)
        except DegenerateInput as exc:
            per_scene[scene_id] = SceneSkip(n=n, reason=f"degenerate: {exc}")
            continue
        per_scene[scene_id] = sm
        used.append(sm)

    if not used:
        raise NoQualifyingScene("no scene qualifies for averaging")
    averaged = {
        "srcc": float(np.mean([m.srcc for m in used])),
        "plcc": float(np.mean([m.plcc for m in used])),
        "krcc": float(np.mean([m.krcc for m in used])),
        "mae": float(np.mean([m.mae for m in used])),
    }
    return MetricReport(
        attribute=attribute,
        per_scene=per_scene,
        averaged=averaged,
        n_scenes_used=len(used),
        n_scenes_excluded=len(per_scene) - len(used),
        min_scene_size=min_scene_size,
    )


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version", "attribute", "min_scene_size",
        "n_scenes_used", "n_scenes_excluded", "averaged", "per_scene",
    ],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"type": "integer"},
        "attribute": {"type": "string"},
        "min_scene_size": {"type": "integer"},
        "n_scenes_used": {"type": "integer"},
        "n_scenes_excluded": {"type": "integer"},
        "averaged": {
            "type": "object",
            "required": ["srcc", "plcc", "krcc", "mae"],
            "additionalProperties": False,
            "properties": {
                "srcc": {"type": "number"},
                "plcc": {"type": "number"},
                "krcc": {"type": "number"},
                "mae": {"type": "number"},
            },
        },
        "per_scene": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {
                    "srcc": {"type": "number"},
                    "plcc": {"type": "number"},
                    "krcc": {"type": "number"},
                    "mae": {"type": "number"},
                    "n": {"type": "integer"},
                    "fit": {"type": "object"},
                    "excluded": {"type": "boolean"},
                    "reason": {"type": "string"},
                },
            },
        },
    },
}


def validate_report(report: dict) -> None:
    """Raise jsonschema.ValidationError if the report dict is malformed."""
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)
