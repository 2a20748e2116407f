"""Train sequence predictors that stay locally faithful to AR explainers."""

import os

# Single-threaded BLAS keeps repeated runs bit-identical; only takes effect
# when seqgame is imported before numpy initializes its backend.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

__version__ = "0.1.0"

from . import cli, data, eval, explainer, game, numerics, predictor  # noqa: E402

__all__ = [
    "cli",
    "data",
    "eval",
    "explainer",
    "game",
    "numerics",
    "predictor",
    "__version__",
]
