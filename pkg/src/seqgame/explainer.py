"""Local interpretable surrogates: K-order AR models and constant vectors.

An explainer is fit over a clipped index neighborhood of a center step,
regressing the predictor's outputs at those steps onto their lagged inputs
with ridge regression.  Fits always happen on plain arrays; gradients never
flow through a fitted explainer.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import RidgeProblem, linear_solve, solve_ridge

__all__ = [
    "ARCoefficients",
    "ConstantExplainer",
    "ExplainerError",
    "Neighborhood",
    "ar_predict",
    "fit_ar_explainer",
    "fit_constant_explainer",
    "fit_global_ar",
    "lag_vector",
    "local_deviation",
    "make_neighborhood",
    "read_explainer_rows",
    "write_explainer_rows",
]


class ExplainerError(ValueError):
    """Invalid neighborhood or fit request."""


@dataclass(frozen=True)
class Neighborhood:
    """Indices within ``radius`` of ``center``, clipped to [lo, hi]."""

    center: int
    radius: int
    lo: int
    hi: int

    def __post_init__(self):
        if self.radius < 0:
            raise ExplainerError(f"radius must be >= 0, got {self.radius}")
        if self.lo > self.hi:
            raise ExplainerError(f"empty valid range [{self.lo}, {self.hi}]")
        if not self.lo <= self.center <= self.hi:
            raise ExplainerError(
                f"center {self.center} outside valid range [{self.lo}, {self.hi}]"
            )

    @property
    def members(self) -> range:
        return range(max(self.lo, self.center - self.radius), min(self.hi, self.center + self.radius) + 1)

    def __len__(self):
        return len(self.members)


def make_neighborhood(center: int, radius: int, lo: int, hi: int) -> Neighborhood:
    return Neighborhood(center=center, radius=radius, lo=lo, hi=hi)


@dataclass(frozen=True)
class ARCoefficients:
    """Order-K linear map: predict(x) = sum_k theta[k] @ x[i-k] + theta0."""

    theta: np.ndarray  # (K, N, N); theta[k] applies to lag k
    theta0: np.ndarray  # (N,)
    include_bias: bool = True

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        th0 = np.asarray(self.theta0, dtype=np.float64)
        if th.ndim != 3 or th.shape[1] != th.shape[2]:
            raise ExplainerError(f"theta must be (K, N, N), got {th.shape}")
        if th0.shape != (th.shape[1],):
            raise ExplainerError(f"theta0 must be ({th.shape[1]},), got {th0.shape}")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "theta0", th0)

    @property
    def order(self) -> int:
        return self.theta.shape[0]

    @property
    def channels(self) -> int:
        return self.theta.shape[1]

    def flatten(self) -> np.ndarray:
        """Parameter vector [theta0, vec(theta[0]), ..., vec(theta[K-1])]."""
        return np.concatenate([self.theta0, self.theta.reshape(-1)])


@dataclass(frozen=True)
class ConstantExplainer:
    """Best constant approximation of a set of vectors (their mean)."""

    value: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=np.float64))


def lag_vector(trajectory: np.ndarray, index: int, order: int) -> np.ndarray:
    """Concatenated lags [x[i], x[i-1], ..., x[i-order+1]] as one row."""
    if index - order + 1 < 0:
        raise ExplainerError(f"index {index} lacks {order} lags")
    return np.concatenate([trajectory[index - k] for k in range(order)])


def ar_predict(coeffs: ARCoefficients, lags: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate the AR map on lags ordered [x[i], x[i-1], ..., x[i-K+1]]."""
    if len(lags) != coeffs.order:
        raise ExplainerError(f"expected {coeffs.order} lags, got {len(lags)}")
    out = coeffs.theta0.copy()
    for k in range(coeffs.order):
        out += coeffs.theta[k] @ np.asarray(lags[k], dtype=np.float64)
    return out


def fit_ar_explainer(
    trajectory: np.ndarray,
    members: Iterable[int],
    targets: np.ndarray,
    order: int,
    alpha: float,
    include_bias: bool = True,
) -> ARCoefficients:
    """Ridge-fit an AR explainer to predictor outputs over a neighborhood.

    ``trajectory`` is the (L, N) input sequence the lags come from;
    ``targets`` holds one predictor output row per entry of ``members``.
    Members without ``order`` lags are dropped; an empty fit is an error.
    With ``include_bias`` the intercept is fit unpenalized, otherwise the
    explainer is forced through the origin.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    members = list(members)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] != len(members):
        raise ExplainerError(
            f"targets shape {targets.shape} does not cover {len(members)} members"
        )
    n = trajectory.shape[1]
    keep = [i for i, m in enumerate(members) if m - order + 1 >= 0]
    if not keep:
        raise ExplainerError(f"no member of {members} provides {order} lags")
    design = np.stack([lag_vector(trajectory, members[i], order) for i in keep])
    kept_targets = targets[keep]

    if include_bias:
        weights, intercept = solve_ridge(
            RidgeProblem(design, kept_targets, alpha=alpha, penalize_intercept=False)
        )
    else:
        gram = design.T @ design + alpha * np.eye(design.shape[1])
        weights = linear_solve(gram, design.T @ kept_targets)
        intercept = np.zeros(n)
    theta = np.stack([weights[k * n : (k + 1) * n].T for k in range(order)])
    return ARCoefficients(theta=theta, theta0=intercept, include_bias=include_bias)


def fit_constant_explainer(values: np.ndarray) -> ConstantExplainer:
    """Mean vector: the squared-distance minimizer over constants."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ExplainerError(f"values must be (M, N) with M >= 1, got {values.shape}")
    return ConstantExplainer(value=values.mean(axis=0))


def local_deviation(
    f_outputs: np.ndarray,
    g_outputs: np.ndarray,
    neighborhood: Neighborhood | None = None,
) -> float:
    """Mean squared L2 distance between aligned output rows."""
    f = np.atleast_2d(np.asarray(f_outputs, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g_outputs, dtype=np.float64))
    if f.shape != g.shape:
        raise ExplainerError(f"output shapes differ: {f.shape} vs {g.shape}")
    if neighborhood is not None and f.shape[0] != len(neighborhood):
        raise ExplainerError(
            f"{f.shape[0]} rows for a {len(neighborhood)}-member neighborhood"
        )
    diff = f - g
    return float(np.mean(np.sum(diff * diff, axis=1)))


def fit_global_ar(
    subsequences: Sequence[np.ndarray],
    order: int,
    alpha: float,
    include_bias: bool = True,
) -> ARCoefficients:
    """One AR fit pooled over every valid step of every window.

    Targets are the actual next rows, so this is the classical AR baseline
    rather than a surrogate of some predictor.
    """
    designs, targets = [], []
    for w in subsequences:
        w = np.asarray(w, dtype=np.float64)
        for j in range(order - 1, w.shape[0] - 1):
            designs.append(lag_vector(w, j, order))
            targets.append(w[j + 1])
    if not designs:
        raise ExplainerError(f"no window provides {order} lags plus a target")
    design = np.stack(designs)
    target = np.stack(targets)
    n = design.shape[1] // order
    if include_bias:
        weights, intercept = solve_ridge(
            RidgeProblem(design, target, alpha=alpha, penalize_intercept=False)
        )
    else:
        gram = design.T @ design + alpha * np.eye(design.shape[1])
        weights = linear_solve(gram, design.T @ target)
        intercept = np.zeros(n)
    theta = np.stack([weights[k * n : (k + 1) * n].T for k in range(order)])
    return ARCoefficients(theta=theta, theta0=intercept, include_bias=include_bias)


# ---------------------------------------------------------------------------
# per-center fit dumps


def _param_header(order: int, channels: int) -> list[str]:
    names = [f"theta0_{c}" for c in range(channels)]
    for k in range(1, order + 1):
        names += [f"theta{k}_{r}_{c}" for r in range(channels) for c in range(channels)]
    return names


def write_explainer_rows(
    path: str,
    records: Sequence[tuple[int, ARCoefficients, float]],
    comments: Sequence[str] = (),
):
    """One CSV row per fitted center: index, deviation, then parameters."""
    if not records:
        raise ExplainerError("nothing to write")
    first = records[0][1]
    header = ["center", "deviation"] + _param_header(first.order, first.channels)
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for center, coeffs, dev in records:
        vals = [str(center), repr(float(dev))] + [
            repr(float(v)) for v in coeffs.flatten()
        ]
        lines.append(",".join(vals))
    payload = "\n".join(lines) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_explainer_rows(path: str) -> list[tuple[int, ARCoefficients, float]]:
    with open(path) as fh:
        rows = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    header = rows[0].split(",")
    n = sum(1 for h in header if h.startswith("theta0_"))
    order = max(
        (int(h[5 : h.index("_", 5)]) for h in header if h.startswith("theta") and not h.startswith("theta0")),
        default=0,
    )
    out = []
    for ln in rows[1:]:
        parts = ln.split(",")
        center = int(parts[0])
        dev = float(parts[1])
        flat = np.array([float(v) for v in parts[2:]])
        theta0 = flat[:n]
        theta = flat[n:].reshape(order, n, n)
        out.append((center, ARCoefficients(theta=theta, theta0=theta0), dev))
    return out
