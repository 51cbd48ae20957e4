"""Alpha/beta ablation grid over CAMO's two fusion weights."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

log = logging.getLogger(__name__)


@dataclass
class SweepCell:
    alpha: float
    beta: float
    cider: float
    error: str | None = None


def ablation_sweep(alphas: Sequence[float], betas: Sequence[float], train_fn: Callable, eval_fn: Callable, seed: int = 0) -> list[SweepCell]:
    """Train and score one model per ``(alpha, beta)``, rows ordered by beta.

    ``train_fn(alpha, beta, seed)`` returns a model and ``eval_fn(model)`` its
    CIDEr-D. A failing cell is recorded as NaN with its error message; the
    remaining cells still run.
    """
    if not alphas or not betas:
        raise ValueError("alpha and beta grids must be non-empty")
    cells = []
    for beta in betas:
        for alpha in alphas:
            try:
                score = float(eval_fn(train_fn(alpha, beta, seed)))
                cells.append(SweepCell(alpha, beta, score))
            except Exception as exc:  # noqa: BLE001 - one bad cell must not abort the grid
                log.warning("sweep cell alpha=%s beta=%s failed: %s", alpha, beta, exc)
                cells.append(SweepCell(alpha, beta, math.nan, f"{type(exc).__name__}: {exc}"))
    return cells


def format_sweep_csv(cells: Sequence[SweepCell]) -> str:
    lines = ["alpha,beta,cider"]
    for c in cells:
        lines.append(f"{c.alpha:.4f},{c.beta:.4f},{c.cider:.4f}")
    return "\n".join(lines) + "\n"


def write_sweep_csv(path, cells: Sequence[SweepCell]) -> None:
    Path(path).write_text(format_sweep_csv(cells), encoding="utf-8")
