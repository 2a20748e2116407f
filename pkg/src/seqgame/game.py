"""Training objectives that tie a predictor to local AR explainers.

Per window, the negative log likelihood over the output segment is optionally
augmented with a deviation penalty between the predictor and per-center
explainers fit over index neighborhoods.  Explainer best responses are always
refit from the current weights and entered into the loss as constants, so no
gradient flows through a fit.  In asymmetric mode only the center prediction
is penalized; in symmetric mode every neighborhood member is.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .explainer import (
    ARCoefficients,
    ar_predict,
    fit_ar_explainer,
    fit_constant_explainer,
    make_neighborhood,
)
from .numerics import NonFiniteError, Tape, Tensor, backward, linear_solve
from .predictor import SequencePredictor, gaussian_nll, save_model

__all__ = [
    "DivergenceError",
    "GameConfig",
    "StepLoss",
    "TrainLog",
    "TrainLogRecord",
    "asymmetric_step_loss",
    "averaging_operator",
    "explicit_step_loss",
    "nonparametric_fixed_point",
    "symmetric_step_loss",
    "train",
    "train_mle",
]


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the offending epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class GameConfig:
    lam: float = 1.0
    epsilon: int = 9
    markov_order: int = 2
    ridge_alpha: float = 1.0
    mode: str = "asymmetric"
    parameterization: str = "implicit"
    reg_fraction: float = 0.1
    optimizer: str = "adam"
    step_size: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    checkpoint_every: int = 0  # epochs between snapshots; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epsilon < 1:
            raise ValueError(f"epsilon must be >= 1, got {self.epsilon}")
        if self.markov_order < 1:
            raise ValueError(f"markov_order must be >= 1, got {self.markov_order}")
        if self.ridge_alpha < 0:
            raise ValueError(f"ridge_alpha must be >= 0, got {self.ridge_alpha}")
        if self.mode not in ("asymmetric", "symmetric"):
            raise ValueError(f"unknown game mode '{self.mode}'")
        if self.parameterization not in ("implicit", "explicit"):
            raise ValueError(f"unknown parameterization '{self.parameterization}'")
        if not 0 < self.reg_fraction <= 1:
            raise ValueError(f"reg_fraction must be in (0, 1], got {self.reg_fraction}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass
class TrainLogRecord:
    epoch: int
    nll: float
    penalty: float
    total: float
    wall_time: float
    val_error: float


@dataclass
class TrainLog:
    records: list[TrainLogRecord] = field(default_factory=list)

    def write_csv(self, path: str, comments=()):
        # wall time is kept in memory only; files stay identical across reruns
        lines = [f"# {c}" for c in comments]
        lines.append("epoch,nll,penalty,total,val_error")
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.nll!r},{r.penalty!r},{r.total!r},{r.val_error!r}"
            )
        payload = "\n".join(lines) + "\n"
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)


# ---------------------------------------------------------------------------
# penalty bookkeeping


def center_range(length: int, input_len: int, order: int) -> range:
    """Penalized steps: output-segment predictions with enough lags."""
    return range(max(input_len - 1, order - 1), length - 1)


def member_bounds(length: int, order: int) -> tuple[int, int]:
    """Valid fit indices: each needs ``order`` lags and a defined output."""
    return order - 1, length - 1


@dataclass
class StepLoss:
    """One sequence's objective plus the pieces tests and logs need.

    ``outputs`` exposes the tracked per-step model outputs the loss was built
    from, so callers can query gradients of intermediate quantities.
    """

    total: Tensor
    nll: float
    penalty: float
    frozen: "FrozenPenalty | None" = None
    outputs: object = None


@dataclass
class FrozenPenalty:
    """Best-response explainer values captured as constants.

    ``targets``-style fields hold center evaluations (asymmetric);
    ``weights``/``linear``/``const`` express the symmetric neighborhood sum
    sum_j (lam/|B_j|) sum_{m in B_j} |out_m - v_{j,m}|^2 as the quadratic
    form sum_m w_m |out_m|^2 - 2 sum_m linear_m . out_m + const.
    """

    kind: str
    centers: range
    fits: list[ARCoefficients] = field(default_factory=list)
    targets: np.ndarray | None = None
    bias_targets: np.ndarray | None = None
    weights: np.ndarray | None = None
    linear: np.ndarray | None = None
    const: float = 0.0
    bias_linear: np.ndarray | None = None
    bias_const: float = 0.0


def _check_window(model: SequencePredictor, window: np.ndarray, input_len: int, cfg: GameConfig):
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[1] != model.channels:
        raise ValueError(f"window shape {window.shape} does not match {model.channels} channels")
    length = window.shape[0]
    if not 1 <= input_len < length:
        raise ValueError(f"input_len {input_len} invalid for window of {length} rows")
    if length <= cfg.markov_order + 1:
        raise ValueError(
            f"window of {length} rows too short for order {cfg.markov_order}"
        )
    if model.parameterization != cfg.parameterization:
        raise ValueError(
            f"model is {model.parameterization} but config says {cfg.parameterization}"
        )
    return window


def _output_nll(seq, window: np.ndarray, input_len: int) -> Tensor:
    length = window.shape[0]
    mu_o = nm.rows(seq.mu, input_len - 1, length - 1)
    lv_o = nm.rows(seq.logvar, input_len - 1, length - 1)
    return gaussian_nll(mu_o, lv_o, window[input_len:])


def _center_fits(
    window: np.ndarray,
    values: np.ndarray,
    centers: range,
    cfg: GameConfig,
    include_bias: bool,
) -> list[tuple[ARCoefficients, range]]:
    lo, hi = member_bounds(window.shape[0], cfg.markov_order)
    out = []
    for j in centers:
        nb = make_neighborhood(j, cfg.epsilon, lo, hi)
        fit = fit_ar_explainer(
            window,
            nb.members,
            values[list(nb.members)],
            cfg.markov_order,
            cfg.ridge_alpha,
            include_bias=include_bias,
        )
        out.append((fit, nb.members))
    return out


def _freeze_asym(window, mu_values, input_len, cfg) -> FrozenPenalty:
    centers = center_range(window.shape[0], input_len, cfg.markov_order)
    fits = _center_fits(window, mu_values, centers, cfg, include_bias=True)
    targets = np.stack(
        [ar_predict(fit, _lags(window, j, cfg.markov_order)) for (fit, _), j in zip(fits, centers)]
    )
    return FrozenPenalty(
        kind="asym", centers=centers, fits=[f for f, _ in fits], targets=targets
    )


def _freeze_sym(window, mu_values, input_len, cfg) -> FrozenPenalty:
    length, n = window.shape
    centers = center_range(length, input_len, cfg.markov_order)
    fits = _center_fits(window, mu_values, centers, cfg, include_bias=True)
    weights = np.zeros((length, 1))
    linear = np.zeros((length, n))
    const = 0.0
    for (fit, members), j in zip(fits, centers):
        coef = cfg.lam / len(members)
        for m in members:
            v = ar_predict(fit, _lags(window, m, cfg.markov_order))
            weights[m, 0] += coef
            linear[m] += coef * v
            const += coef * float(v @ v)
    return FrozenPenalty(
        kind="sym",
        centers=centers,
        fits=[f for f, _ in fits],
        weights=weights,
        linear=linear,
        const=const,
    )


def _freeze_explicit(window, ar_values, bias_values, input_len, cfg) -> FrozenPenalty:
    length, n = window.shape
    centers = center_range(length, input_len, cfg.markov_order)
    ar_fits = _center_fits(window, ar_values, centers, cfg, include_bias=False)
    if cfg.mode == "asymmetric":
        ar_targets = np.stack(
            [ar_predict(fit, _lags(window, j, cfg.markov_order)) for (fit, _), j in zip(ar_fits, centers)]
        )
        bias_targets = np.stack(
            [fit_constant_explainer(bias_values[list(members)]).value for _, members in ar_fits]
        )
        return FrozenPenalty(
            kind="explicit-asym",
            centers=centers,
            fits=[f for f, _ in ar_fits],
            targets=ar_targets,
            bias_targets=bias_targets,
        )
    weights = np.zeros((length, 1))
    linear = np.zeros((length, n))
    const = 0.0
    bias_linear = np.zeros((length, n))
    bias_const = 0.0
    for (fit, members), j in zip(ar_fits, centers):
        coef = cfg.lam / len(members)
        mean = fit_constant_explainer(bias_values[list(members)]).value
        for m in members:
            v = ar_predict(fit, _lags(window, m, cfg.markov_order))
            weights[m, 0] += coef
            linear[m] += coef * v
            const += coef * float(v @ v)
            bias_linear[m] += coef * mean
            bias_const += coef * float(mean @ mean)
    return FrozenPenalty(
        kind="explicit-sym",
        centers=centers,
        fits=[f for f, _ in ar_fits],
        weights=weights,
        linear=linear,
        const=const,
        bias_linear=bias_linear,
        bias_const=bias_const,
    )


def _lags(window: np.ndarray, index: int, order: int) -> list[np.ndarray]:
    return [window[index - k] for k in range(order)]


def _quadratic_penalty(values: Tensor, weights, linear, const) -> Tensor:
    quad = nm.sum_all(nm.mul(nm.square(values), Tensor(weights)))
    lin = nm.sum_all(nm.mul(values, Tensor(linear)))
    return nm.add(nm.sub(quad, nm.scale(lin, 2.0)), Tensor(np.float64(const)))


def asymmetric_step_loss(
    model: SequencePredictor,
    window: np.ndarray,
    input_len: int,
    cfg: GameConfig,
    frozen: FrozenPenalty | None = None,
    penalized: bool = True,
) -> StepLoss:
    """NLL plus lam * |mu(center) - explainer(center)|^2 over output steps.

    The explainer for each center is ridge-fit to the current detached means
    over the center's neighborhood and enters the loss as a constant; pass
    ``frozen`` to reuse a previous best response.
    """
    window = _check_window(model, window, input_len, cfg)
    seq = model.forward_sequence(window)
    nll = _output_nll(seq, window, input_len)
    if not penalized or cfg.lam == 0.0:
        return StepLoss(total=nll, nll=nll.item(), penalty=0.0, outputs=seq)
    if frozen is None:
        frozen = _freeze_asym(window, seq.mu.data, input_len, cfg)
    c = frozen.centers
    mu_cent = nm.rows(seq.mu, c.start, c.stop)
    pen = nm.scale(
        nm.sum_all(nm.square(nm.sub(mu_cent, Tensor(frozen.targets)))), cfg.lam
    )
    return StepLoss(
        total=nm.add(nll, pen),
        nll=nll.item(),
        penalty=pen.item(),
        frozen=frozen,
        outputs=seq,
    )


def symmetric_step_loss(
    model: SequencePredictor,
    window: np.ndarray,
    input_len: int,
    cfg: GameConfig,
    frozen: FrozenPenalty | None = None,
    penalized: bool = True,
) -> StepLoss:
    """NLL plus neighborhood-averaged deviation at every member step.

    Each center contributes (lam/|B|) sum over members of the squared distance
    between the member's mean and the center's explainer, so gradients reach
    the means at non-center members too.
    """
    window = _check_window(model, window, input_len, cfg)
    seq = model.forward_sequence(window)
    nll = _output_nll(seq, window, input_len)
    if not penalized or cfg.lam == 0.0:
        return StepLoss(total=nll, nll=nll.item(), penalty=0.0, outputs=seq)
    if frozen is None:
        frozen = _freeze_sym(window, seq.mu.data, input_len, cfg)
    pen = _quadratic_penalty(seq.mu, frozen.weights, frozen.linear, frozen.const)
    return StepLoss(
        total=nm.add(nll, pen),
        nll=nll.item(),
        penalty=pen.item(),
        frozen=frozen,
        outputs=seq,
    )


def explicit_step_loss(
    model: SequencePredictor,
    window: np.ndarray,
    input_len: int,
    cfg: GameConfig,
    frozen: FrozenPenalty | None = None,
    penalized: bool = True,
) -> StepLoss:
    """Coefficient-head game: the AR part and the bias are penalized apart.

    The AR part of the output is matched to a bias-free AR explainer and the
    bias head to its neighborhood mean, at the center (asymmetric mode) or
    across members (symmetric mode).
    """
    window = _check_window(model, window, input_len, cfg)
    seq = model.forward_sequence(window)
    nll = _output_nll(seq, window, input_len)
    if not penalized or cfg.lam == 0.0:
        return StepLoss(total=nll, nll=nll.item(), penalty=0.0, outputs=seq)
    if frozen is None:
        frozen = _freeze_explicit(
            window, seq.ar_part.data, seq.theta0.data, input_len, cfg
        )
    c = frozen.centers
    if frozen.kind == "explicit-asym":
        ar_cent = nm.rows(seq.ar_part, c.start, c.stop)
        b_cent = nm.rows(seq.theta0, c.start, c.stop)
        pen = nm.scale(
            nm.add(
                nm.sum_all(nm.square(nm.sub(ar_cent, Tensor(frozen.targets)))),
                nm.sum_all(nm.square(nm.sub(b_cent, Tensor(frozen.bias_targets)))),
            ),
            cfg.lam,
        )
    else:
        pen = nm.add(
            _quadratic_penalty(seq.ar_part, frozen.weights, frozen.linear, frozen.const),
            _quadratic_penalty(seq.theta0, frozen.weights, frozen.bias_linear, frozen.bias_const),
        )
    return StepLoss(
        total=nm.add(nll, pen),
        nll=nll.item(),
        penalty=pen.item(),
        frozen=frozen,
        outputs=seq,
    )


def _loss_fn(cfg: GameConfig):
    if cfg.parameterization == "explicit":
        return explicit_step_loss
    return asymmetric_step_loss if cfg.mode == "asymmetric" else symmetric_step_loss


# ---------------------------------------------------------------------------
# optimizers


class _Sgd:
    def __init__(self, step_size):
        self.step_size = step_size

    def update(self, params, grads_by_name):
        for name, g in grads_by_name.items():
            params[name] = Tensor(params[name].data - self.step_size * g)


class _Adam:
    def __init__(self, step_size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, params, grads_by_name):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads_by_name.items():
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[name] = Tensor(
                params[name].data - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)
            )


# ---------------------------------------------------------------------------
# training loops


def train(model: SequencePredictor, data, cfg: GameConfig, checkpoint_dir: str | None = None):
    """Minibatch training of the configured game; returns (model, TrainLog).

    Per batch a seeded ``reg_fraction`` of the sequences receive the deviation
    penalty (every sequence contributes NLL) and explainer best responses are
    refit from the current weights.  Shuffling, the regularized sample, and
    weight updates are all deterministic in ``cfg.seed``.  With a checkpoint
    directory and ``cfg.checkpoint_every`` > 0, a model snapshot is written
    every that many epochs.
    """
    return _run_training(model, data, cfg, penalized=True, checkpoint_dir=checkpoint_dir)


def train_mle(model: SequencePredictor, data, cfg: GameConfig, checkpoint_dir: str | None = None):
    """Plain maximum-likelihood training; never touches explainer machinery."""
    return _run_training(model, data, cfg, penalized=False, checkpoint_dir=checkpoint_dir)


def _run_training(
    model: SequencePredictor,
    data,
    cfg: GameConfig,
    penalized: bool,
    checkpoint_dir: str | None = None,
):
    from .eval import error_rmse  # avoids a module cycle

    windows = data.train.subsequences
    if not windows:
        raise ValueError("empty training split")
    input_len = data.input_len
    loss_fn = _loss_fn(cfg)
    use_penalty = penalized and cfg.lam > 0.0

    root = np.random.SeedSequence(cfg.seed)
    shuffle_seed, reg_seed = root.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    reg_rng = np.random.default_rng(reg_seed)

    opt = _Adam(cfg.step_size) if cfg.optimizer == "adam" else _Sgd(cfg.step_size)
    log = TrainLog()
    n = len(windows)
    start = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        nll_sum = 0.0
        pen_sum = 0.0
        try:
            for lo in range(0, n, cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                reg_set: set[int] = set()
                if use_penalty:
                    count = max(1, int(round(cfg.reg_fraction * len(batch))))
                    count = min(count, len(batch))
                    reg_set = set(reg_rng.choice(len(batch), size=count, replace=False))
                with Tape() as tape:
                    model.watch_parameters(tape)
                    total = None
                    for pos, wi in enumerate(batch):
                        sl = loss_fn(
                            model,
                            windows[wi],
                            input_len,
                            cfg,
                            penalized=use_penalty and pos in reg_set,
                        )
                        nll_sum += sl.nll
                        pen_sum += sl.penalty
                        total = sl.total if total is None else nm.add(total, sl.total)
                    batch_loss = nm.scale(total, 1.0 / len(batch))
                grads = backward(tape, batch_loss)
                by_name = {name: grads[model.params[name]] for name in model.parameter_names()}
                opt.update(model.params, by_name)
        except NonFiniteError as err:
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}: {err}", epoch=epoch
            ) from err
        val_error = (
            error_rmse(model, data.val) if len(data.val) else float("nan")
        )
        log.records.append(
            TrainLogRecord(
                epoch=epoch,
                nll=nll_sum / n,
                penalty=pen_sum / n,
                total=(nll_sum + pen_sum) / n,
                wall_time=time.monotonic() - start,
                val_error=val_error,
            )
        )
        if (
            checkpoint_dir
            and cfg.checkpoint_every > 0
            and epoch % cfg.checkpoint_every == 0
        ):
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_model(model, os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.model"))
    return model, log


# ---------------------------------------------------------------------------
# nonparametric analysis


def averaging_operator(length: int, epsilon: int) -> np.ndarray:
    """Row-stochastic matrix averaging over clipped index windows."""
    if length < 1:
        raise ValueError("need at least one point")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    op = np.zeros((length, length))
    for t in range(length):
        lo, hi = max(0, t - epsilon), min(length - 1, t + epsilon)
        op[t, lo : hi + 1] = 1.0 / (hi - lo + 1)
    return op


def _containing_average(length: int, epsilon: int) -> np.ndarray:
    """Averaging over the neighborhoods that contain each point (adjoint side)."""
    counts = np.zeros(length)
    op = np.zeros((length, length))
    for t in range(length):
        lo, hi = max(0, t - epsilon), min(length - 1, t + epsilon)
        for s in range(lo, hi + 1):
            counts[s] += 1
            op[s, t] = 1.0
    return op / counts[:, None]


def nonparametric_fixed_point(
    y: np.ndarray, epsilon: int, lam: float, mode: str
) -> np.ndarray:
    """Pointwise equilibrium of the game when the predictor is unconstrained.

    Solves (1+lam) f - lam K f = y (asymmetric) or (1+lam) f - lam Kt K f = y
    (symmetric), where K averages over clipped windows and Kt averages over
    containing windows.  lam = 0 returns the input unchanged.
    """
    if mode not in ("asymmetric", "symmetric"):
        raise ValueError(f"unknown mode '{mode}'")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    y = np.asarray(y, dtype=np.float64)
    flat = y.ndim == 1
    mat = y[:, None] if flat else y
    if not np.all(np.isfinite(mat)):
        raise ValueError("input series contains non-finite values")
    length = mat.shape[0]
    if lam == 0.0:
        return y.copy()
    k = averaging_operator(length, epsilon)
    smooth = k if mode == "asymmetric" else _containing_average(length, epsilon) @ k
    a = (1.0 + lam) * np.eye(length) - lam * smooth
    f = linear_solve(a, mat)
    return f[:, 0] if flat else f
