"""Central-difference gradients and an analytic-vs-numeric comparison harness."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tape, Tensor

log = logging.getLogger(__name__)


def _scalar(out) -> float:
    data = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if data.size != 1:
        raise ValueError(f"function must return a scalar, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def _select(x: np.ndarray, indices, max_elems, seed) -> np.ndarray:
    if indices is not None:
        return np.asarray(indices, dtype=np.int64)
    if max_elems is None or x.size <= max_elems:
        return np.arange(x.size)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(x.size, size=max_elems, replace=False))


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-6,
                     indices=None) -> Tensor:
    """Central differences ``(f(x+eps e_i) - f(x-eps e_i)) / 2 eps``.

    Only entries listed in ``indices`` (flat) are computed when given; the
    rest of the returned gradient is zero.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        xp = flat.copy()
        xp[i] += epsilon
        xm = flat.copy()
        xm[i] -= epsilon
        fp = _scalar(f(Tensor(xp.reshape(x0.shape))))
        fm = _scalar(f(Tensor(xm.reshape(x0.shape))))
        grad[i] = (fp - fm) / (2.0 * epsilon)
    return Tensor(grad.reshape(x0.shape))


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    n_checked: int
    kink_elements: tuple  # flat indices whose probes crossed a branch boundary
    min_kink_margin: float

    @property
    def precondition_ok(self) -> bool:
        return not self.kink_elements

    def __bool__(self) -> bool:
        return self.passed


def _taped_eval(f, x: np.ndarray):
    tape = Tape()
    out = f(tape.leaf(x))
    return _scalar(out), tape


def _same_branches(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    for sa, sb in zip(a, b):
        if (sa is None) != (sb is None):
            return False
        if sa is not None and not np.array_equal(sa, sb):
            return False
    return True


def grad_check(f: Callable[[Tensor], Tensor], x, rel_tol: float = 1e-6, abs_tol: float = 1e-9,
               epsilon: float = 1e-6, indices=None, max_elems: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    An element passes when ``|analytic - numeric| <= max(abs_tol, rel_tol*|numeric|)``.
    Elements whose +/-epsilon probes change the branch pattern of any piecewise
    op (ReLU, abs, clamp, bilinear cell, ...) are excluded and reported in
    ``kink_elements`` instead of being counted as failures.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0)
    out = f(xt)
    _scalar(out)
    analytic = tape.backward(out)[xt.node_id].data.reshape(-1)
    base_sig = tape.signatures()
    margin = tape.min_kink_margin()

    flat = x0.reshape(-1)
    sel = _select(x0, indices, max_elems, seed)
    kinks = []
    errs, refs = [], []
    for i in sel:
        vals = []
        crossed = False
        for s in (epsilon, -epsilon):
            xp = flat.copy()
            xp[i] += s
            val, t = _taped_eval(f, xp.reshape(x0.shape))
            vals.append(val)
            crossed = crossed or not _same_branches(base_sig, t.signatures())
        if crossed:
            kinks.append(int(i))
            continue
        num = (vals[0] - vals[1]) / (2.0 * epsilon)
        errs.append(abs(analytic[i] - num))
        refs.append(abs(num))
    if kinks:
        log.warning("grad_check: %d element(s) sit on a non-differentiable kink; excluded", len(kinks))
    errs = np.asarray(errs)
    refs = np.asarray(refs)
    if errs.size == 0:
        return GradCheckReport(float("nan"), float("nan"), False, 0, tuple(kinks), margin)
    ok = errs <= np.maximum(abs_tol, rel_tol * refs)
    rel = errs / np.maximum(refs, max(abs_tol, np.finfo(float).tiny))
    return GradCheckReport(float(rel.max()), float(errs.max()), bool(ok.all()), int(errs.size),
                           tuple(kinks), margin)
