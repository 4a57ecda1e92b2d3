"""Small statistical helpers shared by the martingale tests and the verifiers."""
from __future__ import annotations

import numpy as np
from scipy.stats import norm

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
VERDICT_RANK = {PASS: 0, INCONCLUSIVE: 1, FAIL: 2}

# Discretization margin  c * sqrt(h) * RMS(per-path quantity).  The constant is
# fixed by the euclidean calibration run (see martingale.calibrate_margin_constant):
# for f(y) = |y|^2 the Ito residual has RMS exactly sqrt(h / T) * RMS(F - F_0).
MARGIN_CONSTANT = 1.0


def z_value(level: float = 0.99, tests: int = 1, sided: int = 1) -> float:
    """Normal quantile for a Bonferroni-corrected one- or two-sided test."""
    alpha = (1.0 - level) / max(int(tests), 1)
    return float(norm.ppf(1.0 - alpha / sided))


def mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        return x.mean(axis=axis), np.zeros_like(x.mean(axis=axis))
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / np.sqrt(n)


def rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def margin(h: float, scale: float, constant: float = MARGIN_CONSTANT) -> float:
    return float(constant * np.sqrt(h) * scale)


def inequality_verdict(slack: float, se: float, marg: float, z: float) -> str:
    """slack >= 0 is the claim; fail only when it is negative beyond noise and margin."""
    return FAIL if slack + z * se + marg < 0 else PASS


def identity_verdict(diff: float, se: float, marg: float, z: float) -> str:
    return FAIL if abs(diff) > z * se + marg else PASS


def worst(verdicts) -> str:
    verdicts = list(verdicts)
    if not verdicts:
        return PASS
    return max(verdicts, key=VERDICT_RANK.__getitem__)
