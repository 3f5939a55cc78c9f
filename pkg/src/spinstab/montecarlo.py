"""Ensemble experiments: convergence statistics, mean-state checks, exit times.

Trajectory fan-out is embarrassingly parallel. Members are processed in
fixed-size chunks whose partial sums are merged in chunk order, so the
aggregate statistics are bit-identical no matter how many workers run the
chunks. Per-trajectory noise is keyed by (base_seed, stream), which makes
every number here a deterministic function of the configuration.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .controller import ControllerState
from .dynamics import EPS_CONV, SdeStepConfig, _integrate_batch, integrate_ensemble
from .quantum import QuantumState, SpinOperators, _clip_psd, distance_V

__all__ = [
    "EnsembleStats",
    "ExitTimeReport",
    "run_ensemble",
    "estimate_exit_time",
    "compare_mean_vs_ode",
    "default_workers",
]

# Members per scheduling chunk. Fixed (not derived from the worker count) so
# that partial-sum merge order, and hence every statistic, is scheduling-free.
_CHUNK = 64


def default_workers() -> int:
    """Worker-process count from SPINSTAB_WORKERS (default 1 = in-process)."""
    try:
        return max(1, int(os.environ.get("SPINSTAB_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class EnsembleStats:
    """Aggregated trajectory statistics on the output grid.

    ``mean_state`` is the per-time average over the members active at that
    time, projected back to the state space. ``conv_frac`` tracks the
    fraction of active members with V below ``eps_conv`` at each time;
    ``convergence_fraction`` is its value at the horizon. ``failures``
    lists (stream, time) for members that lost the state space; their
    contributions are dropped from the failure step on.
    """

    times: np.ndarray
    mean_V: np.ndarray
    conv_frac: np.ndarray
    mean_state: np.ndarray
    final_V: np.ndarray
    first_below: np.ndarray
    convergence_fraction: float
    M: int
    base_seed: int
    streams: list
    eps_conv: float
    failures: list


@dataclass
class ExitTimeReport:
    """Exit-time sample summary with the stopping-time diagnostic.

    ``tau`` holds the uncensored first times at which V dropped to
    1 - gamma_a; ``censored`` counts paths that never exited by the horizon.
    The diagnostic bound is T0 / (1 - p_hat) with p_hat the fraction of all
    paths still inside after T0 (censored paths count as still inside).
    ``inconclusive`` is set when no path exited, in which case no mean is
    fabricated.
    """

    gamma_a: float
    threshold: float
    tau: np.ndarray
    censored: int
    M: int
    mean: float | None
    stderr: float | None
    dynkin_t0: float | None
    dynkin_p_hat: float | None
    dynkin_bound: float | None
    inconclusive: bool
    base_seed: int
    T_cap: float


def _chunk_streams(m_count: int) -> list[list[int]]:
    return [list(range(lo, min(lo + _CHUNK, m_count)))
            for lo in range(0, m_count, _CHUNK)]


def _run_chunk(args):
    (rho0, control, T, cfg, ops, base_seed, streams, f, record_stride,
     accumulate_sum, exit_threshold, stop_on_exit, eps_conv) = args
    return _integrate_batch(
        rho0, control, T, cfg, ops, base_seed, streams, f=f,
        record_stride=record_stride, accumulate_sum=accumulate_sum,
        exit_threshold=exit_threshold, stop_on_exit=stop_on_exit,
        eps_conv=eps_conv)


def _map_chunks(tasks, workers: int | None):
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [_run_chunk(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_chunk, tasks))


def run_ensemble(rho0, control, T: float, cfg: SdeStepConfig, M: int = 100,
                 base_seed: int = 0, *, f: int | None = None,
                 ops: SpinOperators | None = None, record_stride: int = 1,
                 eps_conv: float = EPS_CONV,
                 workers: int | None = None) -> EnsembleStats:
    """Run M trajectories and reduce them into ensemble statistics.

    ``control`` is a ControllerState or a fixed real input (then ``f`` and
    ``ops`` are required). Per-trajectory failures are kept as partial
    results: the member is excluded from the aggregates from its failure
    time on and reported in ``failures``.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if isinstance(control, ControllerState):
        f, ops = control.f, control.ops
    elif f is None or ops is None:
        raise ValueError("a fixed-input ensemble requires both f and ops")

    rho0 = np.asarray(rho0, dtype=complex)
    chunks = _chunk_streams(M)
    tasks = [(rho0, control, T, cfg, ops, base_seed, streams, f,
              record_stride, True, None, False, eps_conv)
             for streams in chunks]
    results = _map_chunks(tasks, workers)

    times = results[0].times
    n_rec = len(times)
    state_sum = np.zeros((n_rec, ops.dim, ops.dim), dtype=complex)
    v_sum = np.zeros(n_rec)
    below_count = np.zeros(n_rec)
    active_count = np.zeros(n_rec)
    final_V = []
    first_below = []
    failures = []
    for streams, res in zip(chunks, results):
        state_sum += res.state_sum
        v_sum += np.sum(res.V * res.active, axis=1)
        below_count += np.sum((res.V < eps_conv) & res.active, axis=1)
        active_count += res.active_count
        final_V.append(res.V[-1])
        first_below.append(res.first_below)
        failures.extend((streams[i], t) for i, t in res.failures)

    if np.any(active_count == 0):
        raise RuntimeError("all trajectories failed; no statistics available")
    mean_V = v_sum / active_count
    conv_frac = below_count / active_count
    mean_state, _ = _clip_psd(state_sum / active_count[:, None, None])

    return EnsembleStats(
        times=times, mean_V=mean_V, conv_frac=conv_frac,
        mean_state=mean_state, final_V=np.concatenate(final_V),
        first_below=np.concatenate(first_below),
        convergence_fraction=float(conv_frac[-1]), M=M, base_seed=base_seed,
        streams=list(range(M)), eps_conv=eps_conv, failures=failures)


def estimate_exit_time(gamma_a: float, rho0, f: int, ops: SpinOperators,
                       T_cap: float, cfg: SdeStepConfig, M: int = 100,
                       base_seed: int = 0, *, t0: float | str = "median",
                       workers: int | None = None) -> ExitTimeReport:
    """Estimate the first time V drops to 1 - gamma_a under the fixed input u = 1.

    The initial state must start strictly inside the far region
    (V(rho0) > 1 - gamma_a). Paths that have not exited by ``T_cap`` are
    censored: they are excluded from the sample mean but counted as "still
    inside" by the stopping-time diagnostic. ``t0`` picks the diagnostic
    horizon (the median observed exit time by default). Estimates describe
    the given initial state only, not the worst case over the region.
    """
    if not 0.0 < gamma_a < 1.0:
        raise ValueError(f"gamma_a must be in (0, 1), got {gamma_a}")
    threshold = 1.0 - gamma_a
    v0 = distance_V(np.asarray(rho0), f)
    if v0 <= threshold:
        raise ValueError(
            f"initial state must satisfy V > {threshold:g}, got V = {v0:g}")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")

    rho0 = np.asarray(rho0, dtype=complex)
    chunks = _chunk_streams(M)
    # Records are incidental here; keep them minimal via a huge stride.
    stride = max(1, int(round(T_cap / cfg.dt)))
    tasks = [(rho0, 1.0, T_cap, cfg, ops, base_seed, streams, f, stride,
              False, threshold, True, EPS_CONV) for streams in chunks]
    results = _map_chunks(tasks, workers)

    exit_times = np.concatenate([res.exit_times for res in results])
    failures = []
    for streams, res in zip(chunks, results):
        failures.extend((streams[i], t) for i, t in res.failures)
    # A member that failed before exiting counts as censored.
    tau = np.sort(exit_times[~np.isnan(exit_times)])
    censored = int(np.isnan(exit_times).sum())

    if tau.size == 0:
        return ExitTimeReport(
            gamma_a=gamma_a, threshold=threshold, tau=tau, censored=censored,
            M=M, mean=None, stderr=None, dynkin_t0=None, dynkin_p_hat=None,
            dynkin_bound=None, inconclusive=True, base_seed=base_seed,
            T_cap=T_cap)

    mean = float(tau.mean())
    stderr = float(tau.std(ddof=1) / np.sqrt(tau.size)) if tau.size > 1 else None
    t0_val = float(np.median(tau)) if t0 == "median" else float(t0)
    still_inside = int((tau > t0_val).sum()) + censored
    p_hat = still_inside / M
    bound = float(t0_val / (1.0 - p_hat)) if p_hat < 1.0 else None
    return ExitTimeReport(
        gamma_a=gamma_a, threshold=threshold, tau=tau, censored=censored,
        M=M, mean=mean, stderr=stderr, dynkin_t0=t0_val, dynkin_p_hat=p_hat,
        dynkin_bound=bound, inconclusive=False, base_seed=base_seed,
        T_cap=T_cap)


def compare_mean_vs_ode(rho0, u: float, T: float, cfg: SdeStepConfig,
                        M: int, dt_ode: float, base_seed: int = 0, *,
                        f: int, ops: SpinOperators, record_stride: int = 1,
                        workers: int | None = None) -> float:
    """Max entrywise gap between the Monte Carlo mean state and the averaged ODE.

    Valid for a fixed (state-independent) input, where the averaged
    dynamics propagates the exact mean. The expected gap scales like
    O(M^-1/2 + dt).
    """
    stats = run_ensemble(rho0, float(u), T, cfg, M, base_seed, f=f, ops=ops,
                         record_stride=record_stride, workers=workers)
    ode = integrate_ensemble(rho0, float(u), T, dt_ode, ops)
    idx = np.clip(np.round(stats.times / dt_ode).astype(int), 0,
                  len(ode.times) - 1)
    if np.max(np.abs(ode.times[idx] - stats.times)) > 1e-9:
        raise ValueError("ODE grid does not cover the trajectory record grid; "
                         "pick dt_ode dividing the record interval")
    ode_states = np.stack([np.asarray(ode.states[i]) for i in idx])
    return float(np.max(np.abs(stats.mean_state - ode_states)))


def mean_state_at(stats: EnsembleStats, index: int) -> QuantumState:
    """The (projected) ensemble mean at a record index, as a validated state."""
    return QuantumState(stats.mean_state[index])
