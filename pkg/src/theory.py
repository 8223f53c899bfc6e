"""
Equal-budget comparison of rank masking against output masking.

Rank masking keeps s of the r SVD components; output masking keeps d_s rows
of the best rank-r approximation. With s chosen so both use the same number of
parameters, the rank-mask error is expected to be no larger. The harness here
measures that claim on random matrices; instances where it fails are recorded,
never raised.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from typing import List, Literal

import numpy as np

from .errors import MatrixValidationError
from .linalg import as_matrix, svd, tail_energy
from .schemas import (
    BudgetSpec, TheoremAggregate, TheoremCheckResult, TheoremInstance, TheoremReport,
)

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_ROWS = 20
HOLDS_TOLERANCE = 1e-9

Method = Literal['auto', 'exhaustive', 'greedy']


# --- PARAMETER BUDGETS ---

def param_count_rank(d_out: int, d_in: int, s: int) -> int:
    return s * (d_out + d_in)


def param_count_out(d_out: int, d_in: int, r: int, d_s: int) -> int:
    return d_s * r + r * d_in


def equal_budget_s(r: int, d_out: int, d_in: int, d_s: int) -> int:
    """Largest s with s*(d_out + d_in) <= r*(d_s + d_in); s = r(1 - f/2) when square."""
    if not 0 <= d_s <= d_out:
        raise MatrixValidationError(f"active outputs d_s={d_s} outside [0, {d_out}]")
    if r < 1:
        raise MatrixValidationError(f"rank must be positive, got {r}")
    return (r * (d_s + d_in)) // (d_out + d_in)


def equal_budget(r: int, d_out: int, d_in: int, d_s: int) -> BudgetSpec:
    return BudgetSpec(d_out=d_out, d_in=d_in, r=r, d_s=d_s, s=equal_budget_s(r, d_out, d_in, d_s))


# --- ERRORS ---

def _check_rank(x: np.ndarray, r: int):
    p = min(x.shape)
    if not 1 <= r <= p:
        raise MatrixValidationError(f"rank {r} outside [1, {p}] for {x.shape[0]}x{x.shape[1]} matrix")


def rank_mask_error(x, r: int, s: int) -> float:
    """Error of keeping the top-s of the r SVD components: the tail energy beyond s."""
    x = as_matrix(x)
    _check_rank(x, r)
    if not 0 <= s <= r:
        raise MatrixValidationError(f"active components s={s} outside [0, {r}]")
    return tail_energy(svd(x).sigma, s)


def _row_costs(x: np.ndarray, r: int):
    """Per-row squared error when a row is kept (residual) and when it is dropped (energy)."""
    x_r = svd(x).reconstruct(r)
    kept = np.sum(np.square(x - x_r), axis=1)
    dropped = np.sum(np.square(x), axis=1)
    return kept, dropped


def _exhaustive_keep(gain: np.ndarray, d_s: int) -> np.ndarray:
    # combinations() walks masks lexicographically; strict '>' keeps the first optimum
    best, best_rows = -np.inf, ()
    for rows in combinations(range(gain.shape[0]), d_s):
        total = float(np.sum(gain[list(rows)]))
        if total > best:
            best, best_rows = total, rows
    keep = np.zeros(gain.shape[0], dtype=bool)
    keep[list(best_rows)] = True
    return keep


def _greedy_keep(gain: np.ndarray, d_s: int) -> np.ndarray:
    keep = np.ones(gain.shape[0], dtype=bool)
    for _ in range(gain.shape[0] - d_s):
        candidates = np.flatnonzero(keep)
        # dropping row i costs its gain; drop the cheapest, lowest index on ties
        drop = candidates[np.argmin(gain[candidates])]
        keep[drop] = False
    return keep


def output_mask_selection(x, r: int, d_s: int, method: Method = 'auto'):
    """Returns (error, keep-mask, method used) for the best row mask on the rank-r approximation."""
    x = as_matrix(x)
    _check_rank(x, r)
    d_out = x.shape[0]
    if not 0 <= d_s <= d_out:
        raise MatrixValidationError(f"active outputs d_s={d_s} outside [0, {d_out}]")
    if method == 'exhaustive' and d_out > EXHAUSTIVE_MAX_ROWS:
        raise MatrixValidationError(
            f"exhaustive output-mask search limited to d_out <= {EXHAUSTIVE_MAX_ROWS}, got {d_out}"
        )
    if method == 'auto':
        method = 'exhaustive' if d_out <= EXHAUSTIVE_MAX_ROWS else 'greedy'

    kept, dropped = _row_costs(x, r)
    gain = dropped - kept
    keep = _exhaustive_keep(gain, d_s) if method == 'exhaustive' else _greedy_keep(gain, d_s)
    err_sq = float(np.sum(kept[keep]) + np.sum(dropped[~keep]))
    return float(np.sqrt(max(err_sq, 0.0))), keep, method


def output_mask_error_exact(x, r: int, d_s: int, method: Method = 'auto') -> float:
    error, _, _ = output_mask_selection(x, r, d_s, method)
    return error


def output_mask_error_lower_bound(sigma, r: int, f: float) -> float:
    """sqrt(f * sum_{i<=r} sigma_i^2 + sum_{i>r} sigma_i^2)."""
    if not 0.0 <= f <= 1.0:
        raise MatrixValidationError(f"masked fraction f={f} outside [0, 1]")
    s = np.asarray(sigma, dtype=np.float64)
    tail = tail_energy(s, r)
    head = float(np.sum(np.square(s[:r])))
    return float(np.sqrt(f * head + tail ** 2))


def theorem_check(x, r: int, d_s: int, method: Method = 'auto') -> TheoremCheckResult:
    x = as_matrix(x)
    d_out, d_in = x.shape
    budget = equal_budget(r, d_out, d_in, d_s)
    e_rank = rank_mask_error(x, r, budget.s)
    e_out, _, used = output_mask_selection(x, r, d_s, method)
    bound = output_mask_error_lower_bound(svd(x).sigma, r, budget.f)
    return TheoremCheckResult(
        budget=budget,
        e_rank=e_rank,
        e_out=e_out,
        e_out_lower_bound=bound,
        method=used,
        holds=e_rank <= e_out + HOLDS_TOLERANCE,
        bound_holds=e_out >= bound - HOLDS_TOLERANCE,
        degenerate=budget.s == 0,
    )


def sweep_active_outputs(x, r: int, method: Method = 'auto') -> List[TheoremCheckResult]:
    """theorem_check for every d_s in [0, d_out]."""
    x = as_matrix(x)
    return [theorem_check(x, r, d_s, method) for d_s in range(x.shape[0] + 1)]


# --- RANDOM INSTANCES ---

def instance_seed(seed: int, index: int) -> int:
    state = np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)
    return int(state[0]) >> 1


def random_instance(d_out: int, d_in: int, seed: int, ensemble: str = 'gaussian',
                    gamma: float = 0.8, scale: float = 1.0) -> np.ndarray:
    """Gaussian i.i.d. entries, or orthonormal factors around sigma_i = scale * gamma^i."""
    rng = np.random.default_rng(seed)
    if ensemble == 'gaussian':
        return rng.standard_normal((d_out, d_in))
    if ensemble == 'geometric':
        p = min(d_out, d_in)
        u, _ = np.linalg.qr(rng.standard_normal((d_out, p)))
        v, _ = np.linalg.qr(rng.standard_normal((d_in, p)))
        sigma = scale * gamma ** np.arange(p)
        return (u * sigma) @ v.T
    raise MatrixValidationError(f"unknown ensemble '{ensemble}'")


def _run_instance(index: int, seed: int, d_out: int, d_in: int, r: int, d_s: int,
                  method: Method, ensemble: str, gamma: float) -> TheoremInstance:
    inst_seed = instance_seed(seed, index)
    x = random_instance(d_out, d_in, inst_seed, ensemble, gamma)
    result = theorem_check(x, r, d_s, method)
    return TheoremInstance(
        index=index,
        seed=inst_seed,
        d_out=d_out,
        d_in=d_in,
        r=r,
        d_s=d_s,
        s=result.budget.s,
        budget_slack=result.budget.slack,
        e_rank=result.e_rank,
        e_out=result.e_out,
        e_out_lower_bound=result.e_out_lower_bound,
        method=result.method,
        holds=result.holds,
        bound_holds=result.bound_holds,
        degenerate=result.degenerate,
        matrix=None if result.holds else x.tolist(),
    )


def run_theorem_batch(trials: int, d_out: int, d_in: int, r: int, d_s: int, seed: int,
                      method: Method = 'auto', ensemble: str = 'gaussian', gamma: float = 0.8,
                      jobs: int = 1) -> TheoremReport:
    if trials < 1:
        raise MatrixValidationError(f"trials must be positive, got {trials}")
    if not 1 <= r <= min(d_out, d_in):
        raise MatrixValidationError(f"rank {r} outside [1, {min(d_out, d_in)}] for {d_out}x{d_in}")
    if not 0 <= d_s <= d_out:
        raise MatrixValidationError(f"active outputs d_s={d_s} outside [0, {d_out}]")
    if method == 'exhaustive' and d_out > EXHAUSTIVE_MAX_ROWS:
        raise MatrixValidationError(
            f"exhaustive output-mask search limited to d_out <= {EXHAUSTIVE_MAX_ROWS}, got {d_out}"
        )

    def task(i):
        return _run_instance(i, seed, d_out, d_in, r, d_s, method, ensemble, gamma)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            instances = list(pool.map(task, range(trials)))
    else:
        instances = [task(i) for i in range(trials)]
    instances.sort(key=lambda inst: inst.index)

    counterexamples = [inst.index for inst in instances if not inst.holds]
    violations = [inst.index for inst in instances if not inst.bound_holds]
    degenerate = [inst.index for inst in instances if inst.degenerate]
    slack_counterexamples = [idx for idx in counterexamples if instances[idx].budget_slack > 0]
    for idx in counterexamples:
        inst = instances[idx]
        logger.warning(f"Counterexample #{idx} (seed {inst.seed}): e_rank={inst.e_rank:.6g} > e_out={inst.e_out:.6g}, budget slack {inst.budget_slack}")
    if violations:
        logger.warning(f"Averaged-energy lower bound not met by the best row mask in {len(violations)}/{trials} instances")

    aggregate = TheoremAggregate(
        trials=trials,
        holds_fraction=(trials - len(counterexamples)) / trials,
        bound_holds_fraction=(trials - len(violations)) / trials,
        counterexamples=counterexamples,
        bound_violations=violations,
        degenerate=degenerate,
        slack_counterexamples=slack_counterexamples,
    )
    logger.info(f"Theorem batch {d_out}x{d_in}, r={r}, d_s={d_s}: holds in {aggregate.holds_fraction:.2%} of {trials} trials")
    return TheoremReport(ensemble=ensemble, instances=instances, aggregate=aggregate)
