"""Rollout metrics: generation error, explainer deviation, explanation drift.

All three metrics run on free-running (greedy) trajectories: the model
consumes the input segment, then feeds its own mean predictions back for
``output_len`` steps.

* error_rmse: RMSE between the generated rows and the held-out truth.
* deviation_rmse: RMSE between the model and per-center explainers refit
  along the generated trajectory.  Explicit models are scored as the sum of
  an AR-part RMSE and a bias-head RMSE; the two-part score is flagged as not
  comparable to the implicit one.
* tv: mean absolute per-step change of the explanation parameter vector,
  normalized by its dimension; small values mean the local explanation
  drifts slowly over the horizon.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .explainer import ar_predict, fit_ar_explainer, fit_global_ar, make_neighborhood
from .game import GameConfig, center_range, member_bounds
from .predictor import PredictorOutput, SequencePredictor

__all__ = [
    "ARBaseline",
    "EvalReport",
    "deviation_rmse",
    "error_rmse",
    "evaluate",
    "fit_ar_baseline",
    "read_report",
    "total_variation",
    "write_report",
    "write_step_table",
]


# ---------------------------------------------------------------------------
# classical baseline under the same stepwise interface


class ARBaseline:
    """A fixed AR map exposed through the predictor's step protocol.

    Useful as a floor/ceiling in sweeps: its explanation parameters never
    change, so its drift is exactly zero and its deviation is whatever the
    ridge refit loses.
    """

    def __init__(self, coeffs, logvar):
        self.coeffs = coeffs
        self.logvar = np.asarray(logvar, dtype=np.float64).reshape(-1)
        if self.logvar.shape[0] != coeffs.channels:
            raise ValueError("logvar must have one entry per channel")

    @property
    def channels(self) -> int:
        return self.coeffs.channels

    @property
    def parameterization(self) -> str:
        return "explicit"

    class _State:
        __slots__ = ("lags",)

        def __init__(self):
            self.lags = []

    def init_state(self):
        return ARBaseline._State()

    def step(self, state, x_row: np.ndarray) -> PredictorOutput:
        x_row = np.asarray(x_row, dtype=np.float64).reshape(self.channels)
        order, n = self.coeffs.order, self.channels
        lags = np.zeros((order, n))
        lags[0] = x_row
        for k in range(1, order):
            idx = len(state.lags) - k
            if idx >= 0:
                lags[k] = state.lags[idx]
        mu = self.coeffs.theta0.copy()
        for k in range(order):
            mu += self.coeffs.theta[k] @ lags[k]
        if order > 1:
            state.lags.append(x_row)
            if len(state.lags) > order - 1:
                state.lags.pop(0)
        return PredictorOutput(
            mu=mu,
            logvar=self.logvar.copy(),
            theta=self.coeffs.theta.copy(),
            theta0=self.coeffs.theta0.copy(),
        )


def fit_ar_baseline(subsequences, order: int, alpha: float) -> ARBaseline:
    """Pooled next-value AR fit wrapped as a steppable model.

    The constant log variance comes from per-channel residuals on the same
    pooled one-step problem, floored away from zero.
    """
    coeffs = fit_global_ar(subsequences, order, alpha, include_bias=True)
    sq_sum = np.zeros(coeffs.channels)
    count = 0
    for w in subsequences:
        w = np.asarray(w, dtype=np.float64)
        for j in range(order - 1, w.shape[0] - 1):
            lags = [w[j - k] for k in range(order)]
            sq_sum += (w[j + 1] - ar_predict(coeffs, lags)) ** 2
            count += 1
    var = np.maximum(sq_sum / max(count, 1), 1e-12)
    return ARBaseline(coeffs, np.log(var))


# ---------------------------------------------------------------------------
# rollouts


def _rollout(model, window: np.ndarray, input_len: int):
    """Greedy trajectory plus the model output at every step 0..L-1."""
    length, n = window.shape
    horizon = length - input_len
    state = model.init_state()
    outs = []
    for row in window[:input_len]:
        outs.append(model.step(state, row))
    generated = np.empty((horizon, n))
    for s in range(horizon):
        generated[s] = outs[-1].mu
        outs.append(model.step(state, generated[s]))
    trajectory = np.vstack([window[:input_len], generated])
    return trajectory, generated, outs


def _check_dataset(model, dataset):
    if len(dataset) == 0:
        raise ValueError(f"empty '{dataset.split}' split")
    if dataset.n_channels != model.channels:
        raise ValueError(
            f"dataset has {dataset.n_channels} channels, model {model.channels}"
        )


def error_rmse(model, dataset) -> float:
    """RMSE of greedy generation against the held-out output segments."""
    _check_dataset(model, dataset)
    total = 0.0
    count = 0
    for window in dataset.subsequences:
        _, generated, _ = _rollout(model, window, dataset.input_len)
        diff = generated - window[dataset.input_len :]
        total += float(np.sum(diff * diff))
        count += diff.size
    return float(np.sqrt(total / count))


def total_variation(series: np.ndarray) -> float:
    """Mean absolute step change of a parameter series, per dimension.

    For an (H, D) series: (1/(H-1)) sum_h |p_h - p_{h-1}|_1 / D.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2 or series.shape[1] < 1:
        raise ValueError(f"need an (H, D) series, got {series.shape}")
    if series.shape[0] < 2:
        raise ValueError(f"need at least 2 steps, got {series.shape[0]}")
    steps = np.abs(np.diff(series, axis=0)).mean(axis=1)
    return float(steps.mean())


@dataclass
class _SequenceScores:
    gen_diff: np.ndarray  # (H, N)
    dev: np.ndarray  # (H, N), nan where no center exists
    dev_const: np.ndarray | None  # (H, N) bias-head part (explicit only)
    params: np.ndarray  # (H, D) explanation parameters, nan rows at gaps


def _score_sequence(model, window, input_len, cfg: GameConfig) -> _SequenceScores:
    length, n = window.shape
    horizon = length - input_len
    order, eps = cfg.markov_order, cfg.epsilon
    centers = center_range(length, input_len, order)
    if len(centers) == 0:
        raise ValueError(
            f"no generation step provides {order} lags for an explainer fit"
        )
    trajectory, generated, outs = _rollout(model, window, input_len)
    gen_diff = generated - window[input_len:]

    explicit = model.parameterization == "explicit"
    mu_traj = np.stack([o.mu for o in outs])
    if explicit:
        bias_traj = np.stack([o.theta0 for o in outs])
        ar_traj = mu_traj - bias_traj
    dim = n + order * n * n  # theta0 block plus K flattened theta matrices

    dev = np.full((horizon, n), np.nan)
    dev_const = np.full((horizon, n), np.nan) if explicit else None
    params = np.full((horizon, dim), np.nan)
    lo, hi = member_bounds(length, order)
    for j in centers:
        h = j - (input_len - 1)
        members = make_neighborhood(j, eps, lo, hi).members
        idx = list(members)
        lags = [trajectory[j - k] for k in range(order)]
        if explicit:
            fit = fit_ar_explainer(
                trajectory, members, ar_traj[idx], order, cfg.ridge_alpha,
                include_bias=False,
            )
            dev[h] = ar_traj[j] - ar_predict(fit, lags)
            dev_const[h] = bias_traj[j] - bias_traj[idx].mean(axis=0)
            params[h] = np.concatenate([outs[j].theta0, outs[j].theta.reshape(-1)])
        else:
            fit = fit_ar_explainer(
                trajectory, members, mu_traj[idx], order, cfg.ridge_alpha,
                include_bias=True,
            )
            dev[h] = mu_traj[j] - ar_predict(fit, lags)
            params[h] = fit.flatten()
    return _SequenceScores(gen_diff, dev, dev_const, params)


def deviation_rmse(model, dataset, cfg: GameConfig) -> float:
    """RMSE between model outputs and refit explainers along rollouts.

    Implicit models score one RMSE over the mean outputs; explicit models
    score the AR-part RMSE plus the bias-head RMSE.
    """
    _check_dataset(model, dataset)
    scores = [
        _score_sequence(model, w, dataset.input_len, cfg)
        for w in dataset.subsequences
    ]
    dev = np.stack([s.dev for s in scores])
    main = float(np.sqrt(np.nanmean(dev * dev)))
    if scores[0].dev_const is None:
        return main
    const = np.stack([s.dev_const for s in scores])
    return main + float(np.sqrt(np.nanmean(const * const)))


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    """All metrics for one split, plus per-step diagnostic series.

    ``deviation_ar``/``deviation_const`` are filled for explicit models only,
    and then ``deviation_rmse`` is their sum, which is not comparable to an
    implicit model's score (``deviation_non_comparable``).  ``param_steps``
    holds the per-step mean explanation parameter vector.  The TV flag marks
    configurations whose neighborhood span covers the whole horizon, where
    drift mostly reflects refit jitter.
    """

    error_rmse: float
    deviation_rmse: float
    tv: float
    deviation_ar: float | None
    deviation_const: float | None
    deviation_non_comparable: bool
    error_steps: list
    deviation_steps: list
    tv_steps: list
    param_steps: list
    n_sequences: int
    horizon: int
    tv_window_covers_horizon: bool
    model_desc: dict
    game_config: dict
    config_echo: str = ""
    provenance: list = field(default_factory=list)


def _model_desc(model) -> dict:
    if isinstance(model, SequencePredictor):
        desc = {"kind": "sequence-predictor"}
        desc.update(asdict(model.config))
        return desc
    if isinstance(model, ARBaseline):
        return {
            "kind": "ar-baseline",
            "channels": model.channels,
            "ar_order": model.coeffs.order,
        }
    return {"kind": type(model).__name__, "channels": model.channels}


def evaluate(model, dataset, cfg: GameConfig, config_echo: str = "", provenance=()) -> EvalReport:
    """Score one split and assemble the per-step breakdown tables.

    Per-step entries are indexed by generation step.  Deviation entries are
    NaN at steps whose center lacks the required lags, and drift entries
    lead with zero because step 0 has no predecessor; a one-step horizon has
    no consecutive pairs at all and reports zero drift.
    """
    _check_dataset(model, dataset)
    scores = [
        _score_sequence(model, w, dataset.input_len, cfg)
        for w in dataset.subsequences
    ]
    horizon = dataset.output_len
    gen = np.stack([s.gen_diff for s in scores])  # (S, H, N)
    dev = np.stack([s.dev for s in scores])
    params = np.stack([s.params for s in scores])  # (S, H, D)

    error = float(np.sqrt(np.mean(gen * gen)))
    deviation = float(np.sqrt(np.nanmean(dev * dev)))
    deviation_ar = deviation_const = None
    explicit = scores[0].dev_const is not None
    if explicit:
        const = np.stack([s.dev_const for s in scores])
        deviation_ar = deviation
        deviation_const = float(np.sqrt(np.nanmean(const * const)))
        deviation = deviation_ar + deviation_const

    # nan-aware aggregation; steps without any center stay nan, which numpy
    # announces as empty slices
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if horizon > 1:
            step_diffs = np.abs(np.diff(params, axis=1)).mean(axis=2)  # (S, H-1)
            tv = float(np.mean(np.nanmean(step_diffs, axis=1)))
        else:
            tv = 0.0

        error_steps = np.sqrt(np.mean(gen * gen, axis=(0, 2)))
        deviation_steps = np.sqrt(np.nanmean(dev * dev, axis=(0, 2)))
        if explicit:
            deviation_steps = deviation_steps + np.sqrt(
                np.nanmean(const * const, axis=(0, 2))
            )
        tv_steps = np.zeros(horizon)
        if horizon > 1:
            tv_steps[1:] = np.nanmean(step_diffs, axis=0)
        param_steps = np.nanmean(params, axis=0)  # (H, D)

    return EvalReport(
        error_rmse=error,
        deviation_rmse=deviation,
        tv=tv,
        deviation_ar=deviation_ar,
        deviation_const=deviation_const,
        deviation_non_comparable=explicit,
        error_steps=[float(v) for v in error_steps],
        deviation_steps=[float(v) for v in deviation_steps],
        tv_steps=[float(v) for v in tv_steps],
        param_steps=[[float(v) for v in row] for row in param_steps],
        n_sequences=len(scores),
        horizon=horizon,
        tv_window_covers_horizon=2 * cfg.epsilon + 1 >= horizon,
        model_desc=_model_desc(model),
        game_config=asdict(cfg),
        config_echo=config_echo,
        provenance=list(provenance),
    )


def write_report(report: EvalReport, path: str):
    """JSON dump with sorted keys; floats survive a round trip exactly."""
    payload = json.dumps(asdict(report), sort_keys=True, indent=2) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_report(path: str) -> EvalReport:
    with open(path) as fh:
        raw = json.load(fh)
    return EvalReport(**raw)


def write_step_table(report: EvalReport, path: str, comments=()):
    """Companion CSV: one row per generation step, explainer params included."""
    dim = len(report.param_steps[0]) if report.param_steps else 0
    header = "step,error,deviation,tv," + ",".join(f"param_{d}" for d in range(dim))
    lines = [f"# {c}" for c in comments]
    lines.append(header)
    for h in range(report.horizon):
        cells = [
            str(h),
            repr(report.error_steps[h]),
            repr(report.deviation_steps[h]),
            repr(report.tv_steps[h]),
        ]
        cells += [repr(v) for v in report.param_steps[h]]
        lines.append(",".join(cells))
    payload = "\n".join(lines) + "\n"
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)
