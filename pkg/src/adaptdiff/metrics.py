"""Dice overlap, paired t-test and the label-pollution robustness study."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

log = logging.getLogger(__name__)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|a & b| / (|a| + |b|)``; 1.0 when both masks are empty."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def dice_scores(preds, truths) -> np.ndarray:
    return np.array([dice(p, t) for p, t in zip(preds, truths)])


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False

    def __iter__(self):
        return iter((self.t, self.p))


def paired_t_test(scores_a, scores_b) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    The p-value is ``I_{df/(df+t^2)}(df/2, 1/2)``.  Zero spread with a
    non-zero mean difference is reported as ``p = 0`` with ``degenerate``
    set; identical samples give ``t = 0, p = 1``.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, df)
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), p, df)


# -- robustness grid ----------------------------------------------------------------


@dataclass
class RobustnessGridResult:
    fp_rates: list[float]
    fn_rates: list[float]
    mean_dice: np.ndarray  # (len(fp_rates), len(fn_rates)); NaN where invalid
    counts: np.ndarray
    valid: np.ndarray
    examples: dict = field(default_factory=dict)  # (r_fp, r_fn) -> one sample image
    errors: dict = field(default_factory=dict)

    def cell(self, r_fp: float, r_fn: float) -> float:
        return float(self.mean_dice[self.fp_rates.index(r_fp), self.fn_rates.index(r_fn)])

    def rows(self):
        for i, fp in enumerate(self.fp_rates):
            for j, fn in enumerate(self.fn_rates):
                yield fp, fn, float(self.mean_dice[i, j]), int(self.counts[i, j]), bool(self.valid[i, j])

    def to_csv(self) -> str:
        lines = ["r_fp,r_fn,mean_dice,n,valid"]
        for fp, fn, d, n, ok in self.rows():
            lines.append(f"{fp:g},{fn:g},{d:.6f},{n},{int(ok)}")
        return "\n".join(lines) + "\n"


def robustness_study(
    train_images: np.ndarray,
    train_truth: np.ndarray,
    eval_masks: np.ndarray,
    oracle,
    cfg,
    fp_rates=None,
    fn_rates=None,
    progress=None,
) -> RobustnessGridResult:
    """Train one conditional denoiser per pollution level and score its samples.

    ``train_truth`` is only ever passed through :func:`pollute_mask` before it
    reaches the denoiser; no segmenter is trained here.  Each cell's samples,
    conditioned on the clean ``eval_masks``, are re-segmented by ``oracle``
    and scored by Dice against those masks.  All cells share the training
    and sampling seeds so that only the label pollution differs.
    """
    from .phantom import pollute_mask
    from .pipeline import fit_denoiser, resegment, synthesize

    fp_rates = list(fp_rates if fp_rates is not None else cfg.pollution_fp)
    fn_rates = list(fn_rates if fn_rates is not None else cfg.pollution_fn)
    shape = (len(fp_rates), len(fn_rates))
    result = RobustnessGridResult(
        fp_rates, fn_rates, np.full(shape, np.nan), np.zeros(shape, int), np.zeros(shape, bool)
    )
    for i, r_fp in enumerate(fp_rates):
        for j, r_fn in enumerate(fn_rates):
            try:
                polluted = np.stack([
                    pollute_mask(m, r_fp, r_fn, np.random.default_rng([cfg.seed, 7, i, j, k]))
                    for k, m in enumerate(train_truth)
                ])
                model, _ = fit_denoiser(train_images, polluted, cfg, epochs=cfg.epochs_grid)
                samples = synthesize(model, eval_masks, cfg, seed=cfg.seed + 1)
                preds = resegment(oracle, samples, cfg.pseudo_threshold)
                scores = dice_scores(preds, eval_masks)
                result.mean_dice[i, j] = scores.mean()
                result.counts[i, j] = len(scores)
                result.valid[i, j] = True
                result.examples[(r_fp, r_fn)] = samples[0]
                log.info("cell (%g, %g): dice %.4f", r_fp, r_fn, scores.mean())
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                log.warning("cell (%g, %g) failed: %s", r_fp, r_fn, exc)
                result.errors[(r_fp, r_fn)] = repr(exc)
            if progress:
                progress(r_fp, r_fn, result)
    return result
