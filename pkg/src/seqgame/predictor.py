"""Sequence predictor: causal conv, a gated recurrent cell, two dense layers.

The model reads a prefix x[0:i] and emits a Gaussian over the next row:
a mean and a per-channel log-variance.  With the explicit parameterization
the mean is not a free head; the network emits per-step AR coefficient
matrices and a bias vector, and the mean is their combination with the
lagged inputs.  Output at step i never depends on rows after i.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

__all__ = [
    "ModelFormatError",
    "PredictorConfig",
    "PredictorOutput",
    "SequencePredictor",
    "SequenceTensors",
    "ar_combine",
    "forward",
    "gaussian_nll",
    "generate_greedy",
    "load_model",
    "save_model",
]

LOG_2PI = float(np.log(2.0 * np.pi))

MODEL_FORMAT = "seqgame-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Unreadable or inconsistent model file."""


@dataclass(frozen=True)
class PredictorConfig:
    channels: int
    conv_width: int = 3
    conv_filters: int = 16
    hidden: int = 32
    dense1: int = 32
    dense2: int = 32
    parameterization: str = "implicit"
    ar_order: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        for name in ("conv_width", "conv_filters", "hidden", "dense1", "dense2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.parameterization not in ("implicit", "explicit"):
            raise ValueError(f"unknown parameterization '{self.parameterization}'")
        if self.parameterization == "explicit" and self.ar_order < 1:
            raise ValueError("explicit parameterization needs ar_order >= 1")


@dataclass
class PredictorOutput:
    """One step of model output; theta/theta0 only for explicit models."""

    mu: np.ndarray
    logvar: np.ndarray
    theta: np.ndarray | None = None
    theta0: np.ndarray | None = None


@dataclass
class SequenceTensors:
    """Tracked per-step outputs of a whole-sequence forward pass.

    Row j of each matrix corresponds to the prefix x[0:j+1].  ``ar_part``
    is the lag combination without the bias (explicit models only).
    """

    mu: Tensor
    logvar: Tensor
    thetas: list[Tensor] | None = None  # per lag: (L, N*N) head outputs
    theta0: Tensor | None = None  # (L, N)
    ar_part: Tensor | None = None  # (L, N)


def ar_combine(theta: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """Bias-free combination sum_k theta[k] @ lags[k] of one step's lags."""
    out = np.zeros(theta.shape[1])
    for k in range(theta.shape[0]):
        out = out + theta[k] @ lags[k]
    return out


@dataclass
class _State:
    """Recurrent state: cell memory plus enough history for conv and lags."""

    h: Tensor
    c: Tensor
    recent: list  # last conv_width-1 input rows, newest last
    lags: list  # last ar_order-1 input rows, newest last (explicit only)
    steps: int = 0


class SequencePredictor:
    """Weights plus forward passes; construction is seeded and deterministic."""

    def __init__(self, config: PredictorConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        n, w = config.channels, config.conv_width
        f, h = config.conv_filters, config.hidden
        d1, d2 = config.dense1, config.dense2

        def uniform(name, shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape))

        def zeros(name, shape, value=0.0):
            self.params[name] = Tensor(np.full(shape, value))

        uniform("conv_w", (w, n, f), w * n)
        zeros("conv_b", (f,))
        for gate in ("i", "f", "o", "c"):
            uniform(f"w_{gate}", (f, h), f)
            uniform(f"u_{gate}", (h, h), h)
            zeros(f"b_{gate}", (h,), 1.0 if gate == "f" else 0.0)
        uniform("fc1_w", (h, d1), h)
        zeros("fc1_b", (d1,))
        uniform("fc2_w", (d1, d2), d1)
        zeros("fc2_b", (d2,))
        uniform("lv_w", (d2, n), d2)
        zeros("lv_b", (n,))
        if config.parameterization == "implicit":
            uniform("mu_w", (d2, n), d2)
            zeros("mu_b", (n,))
        else:
            for k in range(1, config.ar_order + 1):
                uniform(f"coef{k}_w", (d2, n * n), d2)
                zeros(f"coef{k}_b", (n * n,))
            uniform("bias_w", (d2, n), d2)
            zeros("bias_b", (n,))

    # -- plumbing ----------------------------------------------------------

    @property
    def channels(self) -> int:
        return self.config.channels

    @property
    def parameterization(self) -> str:
        return self.config.parameterization

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def watch_parameters(self, tape: nm.Tape):
        for name in self.parameter_names():
            tape.watch(self.params[name])

    def _cell(self, u: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        gi = nm.sigmoid(nm.matmul(u, p["w_i"]) + nm.matmul(h, p["u_i"]) + p["b_i"])
        gf = nm.sigmoid(nm.matmul(u, p["w_f"]) + nm.matmul(h, p["u_f"]) + p["b_f"])
        go = nm.sigmoid(nm.matmul(u, p["w_o"]) + nm.matmul(h, p["u_o"]) + p["b_o"])
        gc = nm.tanh(nm.matmul(u, p["w_c"]) + nm.matmul(h, p["u_c"]) + p["b_c"])
        c2 = nm.add(nm.mul(gf, c), nm.mul(gi, gc))
        h2 = nm.mul(go, nm.tanh(c2))
        return h2, c2

    def _dense_heads(self, hs: Tensor) -> dict[str, Tensor]:
        """Dense stack + heads applied to stacked hidden states (L, H)."""
        p = self.params
        z = nm.tanh(nm.matmul(hs, p["fc1_w"]) + p["fc1_b"])
        z = nm.tanh(nm.matmul(z, p["fc2_w"]) + p["fc2_b"])
        out = {"logvar": nm.matmul(z, p["lv_w"]) + p["lv_b"]}
        if self.config.parameterization == "implicit":
            out["mu"] = nm.matmul(z, p["mu_w"]) + p["mu_b"]
        else:
            out["theta0"] = nm.matmul(z, p["bias_w"]) + p["bias_b"]
            for k in range(1, self.config.ar_order + 1):
                out[f"coef{k}"] = nm.matmul(z, p[f"coef{k}_w"]) + p[f"coef{k}_b"]
        return out

    # -- whole-sequence pass (training path) -------------------------------

    def forward_sequence(self, x: np.ndarray) -> SequenceTensors:
        """Per-step outputs for every prefix of ``x`` in one sweep.

        Records on the active tape if one is open.  Causality holds by
        construction: row j only sees rows 0..j.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.channels:
            raise ValueError(f"expected (L, {self.config.channels}) input, got {x.shape}")
        length = x.shape[0]
        p = self.params
        conv = nm.tanh(nm.conv1d_causal(Tensor(x), p["conv_w"], p["conv_b"]))
        h = Tensor(np.zeros(self.config.hidden))
        c = Tensor(np.zeros(self.config.hidden))
        hs = []
        for t in range(length):
            u = nm.reshape(nm.rows(conv, t, t + 1), (self.config.conv_filters,))
            h, c = self._cell(u, h, c)
            hs.append(h)
        heads = self._dense_heads(nm.stack_rows(hs))
        if self.config.parameterization == "implicit":
            return SequenceTensors(mu=heads["mu"], logvar=heads["logvar"])

        n, order = self.config.channels, self.config.ar_order
        theta0 = heads["theta0"]
        ar_part = None
        for k in range(1, order + 1):
            lagmat = np.zeros((length, n))
            lagmat[k - 1 :] = x[: length - k + 1]
            term = nm.rowwise_matvec(heads[f"coef{k}"], Tensor(lagmat))
            ar_part = term if ar_part is None else nm.add(ar_part, term)
        return SequenceTensors(
            mu=nm.add(ar_part, theta0),
            logvar=heads["logvar"],
            thetas=[heads[f"coef{k}"] for k in range(1, order + 1)],
            theta0=theta0,
            ar_part=ar_part,
        )

    # -- stepwise pass (generation / evaluation path) ----------------------

    def init_state(self) -> _State:
        return _State(
            h=Tensor(np.zeros(self.config.hidden)),
            c=Tensor(np.zeros(self.config.hidden)),
            recent=[],
            lags=[],
        )

    def step(self, state: _State, x_row: np.ndarray) -> PredictorOutput:
        """Consume one observed row and return the next-row prediction."""
        x_row = np.asarray(x_row, dtype=np.float64).reshape(self.config.channels)
        cfg = self.config
        p = self.params
        window = [x_row]
        for k in range(1, cfg.conv_width):
            idx = len(state.recent) - k
            window.append(state.recent[idx] if idx >= 0 else np.zeros(cfg.channels))
        u = p["conv_b"]
        for j, row in enumerate(window):
            u = nm.add(u, nm.matmul(Tensor(row), _conv_slice(p["conv_w"], j)))
        u = nm.tanh(u)
        state.h, state.c = self._cell(u, state.h, state.c)
        z = nm.tanh(nm.matmul(state.h, p["fc1_w"]) + p["fc1_b"])
        z = nm.tanh(nm.matmul(z, p["fc2_w"]) + p["fc2_b"])
        logvar = (nm.matmul(z, p["lv_w"]) + p["lv_b"]).data.copy()

        if cfg.parameterization == "implicit":
            mu = (nm.matmul(z, p["mu_w"]) + p["mu_b"]).data.copy()
            out = PredictorOutput(mu=mu, logvar=logvar)
        else:
            n = cfg.channels
            theta = np.empty((cfg.ar_order, n, n))
            for k in range(1, cfg.ar_order + 1):
                vec = (nm.matmul(z, p[f"coef{k}_w"]) + p[f"coef{k}_b"]).data
                theta[k - 1] = vec.reshape(n, n)
            theta0 = (nm.matmul(z, p["bias_w"]) + p["bias_b"]).data.copy()
            lags = np.zeros((cfg.ar_order, n))
            lags[0] = x_row
            for k in range(1, cfg.ar_order):
                idx = len(state.lags) - k
                if idx >= 0:
                    lags[k] = state.lags[idx]
            mu = ar_combine(theta, lags) + theta0
            out = PredictorOutput(mu=mu, logvar=logvar, theta=theta, theta0=theta0)

        if cfg.conv_width > 1:
            state.recent.append(x_row)
            if len(state.recent) > cfg.conv_width - 1:
                state.recent.pop(0)
        if cfg.parameterization == "explicit" and cfg.ar_order > 1:
            state.lags.append(x_row)
            if len(state.lags) > cfg.ar_order - 1:
                state.lags.pop(0)
        state.steps += 1
        return out


def _conv_slice(conv_w: Tensor, j: int) -> Tensor:
    """Row j of the (W, C, F) kernel as a (C, F) matrix tensor."""
    w, c, f = conv_w.shape
    return nm.reshape(nm.rows(nm.reshape(conv_w, (w, c * f)), j, j + 1), (c, f))


def forward(model: SequencePredictor, prefix: np.ndarray) -> PredictorOutput:
    """Prediction after the final row of ``prefix`` (stepwise evaluation)."""
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 2 or prefix.shape[0] < 1:
        raise ValueError(f"prefix must be (i, N) with i >= 1, got {prefix.shape}")
    state = model.init_state()
    out = None
    for row in prefix:
        out = model.step(state, row)
    return out


def generate_greedy(
    model: SequencePredictor, prefix: np.ndarray, horizon: int
) -> tuple[np.ndarray, list[PredictorOutput]]:
    """Feed the mean back as the next observation for ``horizon`` steps.

    Returns the generated rows and the per-step outputs that produced them
    (outputs[s].mu is exactly the generated row s).
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    prefix = np.asarray(prefix, dtype=np.float64)
    state = model.init_state()
    out = None
    for row in prefix:
        out = model.step(state, row)
    if out is None:
        raise ValueError("empty prefix")
    generated = np.empty((horizon, model.channels))
    outputs = []
    for s in range(horizon):
        outputs.append(out)
        generated[s] = out.mu
        if s + 1 < horizon:
            out = model.step(state, out.mu)
    return generated, outputs


def gaussian_nll(mu, logvar, target) -> Tensor:
    """Diagonal-Gaussian negative log likelihood, summed over all entries.

    Per entry: 0.5 * (logvar + (target - mu)^2 * exp(-logvar) + log 2 pi).
    """
    mu_t = mu if isinstance(mu, Tensor) else Tensor(mu)
    lv_t = logvar if isinstance(logvar, Tensor) else Tensor(logvar)
    y = Tensor(np.asarray(target, dtype=np.float64))
    if mu_t.shape != lv_t.shape or mu_t.shape != y.shape:
        raise ValueError(
            f"shape mismatch: mu {mu_t.shape}, logvar {lv_t.shape}, target {y.shape}"
        )
    diff = nm.sub(y, mu_t)
    quad = nm.mul(nm.square(diff), nm.exp(nm.neg(lv_t)))
    total = nm.sum_all(nm.add(lv_t, quad))
    count = float(np.prod(mu_t.shape)) if mu_t.ndim else 1.0
    return nm.add(nm.scale(total, 0.5), Tensor(0.5 * LOG_2PI * count))


# ---------------------------------------------------------------------------
# serialization


def save_model(model: SequencePredictor, path: str, extra: dict | None = None):
    """Single-file dump: one JSON header line, then raw float64 weights.

    Identical models produce identical bytes.
    """
    names = model.parameter_names()
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "arrays": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    blob += b"".join(model.params[n].data.tobytes() for n in names)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_model(path: str) -> tuple[SequencePredictor, dict]:
    """Rebuild a model saved by :func:`save_model`; returns (model, extra)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise ModelFormatError(f"no model file at {path}") from None
    nl = raw.find(b"\n")
    if nl < 0:
        raise ModelFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"{path}: corrupt header: {err}") from None
    if header.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: not a model file")
    if header.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {header.get('version')}")
    try:
        config = PredictorConfig(**header["config"])
    except (TypeError, KeyError, ValueError) as err:
        raise ModelFormatError(f"{path}: bad config block: {err}") from None

    model = SequencePredictor(config)
    expected = model.parameter_names()
    listed = [a["name"] for a in header["arrays"]]
    if listed != expected:
        raise ModelFormatError(f"{path}: arrays {listed} do not match config {expected}")
    body = raw[nl + 1 :]
    offset = 0
    loaded = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        if shape != model.params[entry["name"]].shape:
            raise ModelFormatError(
                f"{path}: array '{entry['name']}' has shape {shape}, "
                f"config implies {model.params[entry['name']].shape}"
            )
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = body[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ModelFormatError(f"{path}: truncated weight data at '{entry['name']}'")
        loaded[entry["name"]] = np.frombuffer(chunk, dtype=np.float64).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise ModelFormatError(f"{path}: {len(body) - offset} trailing bytes")
    for name, arr in loaded.items():
        model.params[name] = Tensor(arr)
    return model, header.get("extra", {})
