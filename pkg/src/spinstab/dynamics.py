"""Numerical integration of the controlled measurement dynamics.

Two integrators live here:

* an Euler-Maruyama scheme for the diffusion (Ito) equation of the
  conditional state under continuous measurement and feedback,

      d rho = -i u [F_y, rho] dt - 1/2 [F_z, [F_z, rho]] dt
              + sqrt(eta) (F_z rho + rho F_z - 2 Tr(F_z rho) rho) dW,

  with a state-space projection after every step (configurable stride);

* a classical fixed-step RK4 integrator for the averaged (ensemble)
  dynamics, which is the same drift with the noise term dropped.

Trajectories are deterministic functions of their inputs: the Wiener
increments come from a counter-based generator keyed by
(base_seed, stream), so ensembles reproduce bit-for-bit regardless of
how the trajectories are scheduled.

The stepping core is vectorized over a leading batch axis; all public
drift/diffusion operations accept either a single (N, N) matrix or a
stacked (M, N, N) array.
"""

from dataclasses import dataclass

import numpy as np

from .controller import ControllerState, Mode, feedback_gain, switch_modes
from .quantum import (
    GeneralModel,
    NumericalFailureError,
    QuantumState,
    SpinOperators,
    _clip_psd,
)

__all__ = [
    "SdeStepConfig",
    "TrajectoryRecord",
    "OdeTrajectory",
    "EPS_CONV",
    "sme_drift",
    "sme_diffusion",
    "general_drift",
    "general_diffusion",
    "em_step",
    "simulate_trajectory",
    "simulate_batch",
    "ensemble_rhs",
    "integrate_ensemble",
]

# Convergence flag threshold on V: discriminates converged paths at figure level.
EPS_CONV = 0.01

# Cap on the number of Gaussian increments drawn per chunk (memory bound).
_NOISE_CHUNK_ELEMS = 4_000_000


@dataclass(frozen=True)
class SdeStepConfig:
    """Step configuration for the stochastic integrator.

    ``projection_every`` is the number of Euler-Maruyama steps between
    state-space projections (1 = project after every step, the default).
    """

    dt: float = 1e-3
    eta: float = 1.0
    projection_every: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.projection_every < 1:
            raise ValueError("projection_every must be >= 1")


@dataclass
class TrajectoryRecord:
    """Sampled summaries of one trajectory on the output grid.

    ``modes`` holds the controller branch applied at each recorded time
    ('feedback' or 'constant'); for a fixed-input run it is 'constant'
    throughout. ``states`` carries full snapshots only when requested.
    ``converged`` means V at the final recorded time is below the
    convergence threshold; ``first_time_below`` is the first step time at
    which V dropped below it (None if it never did).
    """

    times: np.ndarray
    V: np.ndarray
    u: np.ndarray
    purity: np.ndarray
    modes: np.ndarray
    states: list[QuantumState] | None
    seed: int
    stream: int
    converged: bool
    first_time_below: float | None


@dataclass
class OdeTrajectory:
    """Grid states of the averaged dynamics (one state per RK4 step)."""

    times: np.ndarray
    states: list[QuantumState]


def _as_u(u) -> np.ndarray:
    """Shape a scalar or per-member control input for (..., N, N) broadcasting."""
    return np.asarray(u, dtype=float)[..., None, None]


def sme_drift(rho, u, ops: SpinOperators) -> np.ndarray:
    """Deterministic increment rate: -i u [F_y, rho] - 1/2 [F_z, [F_z, rho]].

    The double commutator is evaluated entrywise as (lam_i - lam_j)^2 rho_ij,
    which is exact because F_z is diagonal. Traceless and Hermitian for
    Hermitian input; vanishes at every measurement eigenstate when u = 0.
    """
    m = np.asarray(rho)
    comm_y = ops.f_y @ m - m @ ops.f_y
    gaps = ops.lambdas[:, None] - ops.lambdas[None, :]
    return -1j * _as_u(u) * comm_y - 0.5 * gaps**2 * m


def sme_diffusion(rho, ops: SpinOperators, eta: float) -> np.ndarray:
    """Measurement back-action rate sqrt(eta)(F_z rho + rho F_z - 2 Tr(F_z rho) rho).

    Traceless and Hermitian; zero at every measurement eigenstate.
    """
    m = np.asarray(rho)
    lam = ops.lambdas
    diag = np.einsum("...ii,i->...", m, lam).real
    out = lam[:, None] * m + m * lam - 2.0 * diag[..., None, None] * m
    return np.sqrt(eta) * out


def general_drift(rho, u, model: GeneralModel) -> np.ndarray:
    """Drift of the generic model: Hamiltonian, control and decoherence terms."""
    m = np.asarray(rho)
    c, cd = model.c, model.c.conj().T
    comm_h = model.H @ m - m @ model.H
    comm_g = model.G @ m - m @ model.G
    lind = c @ m @ cd - 0.5 * (cd @ c @ m + m @ (cd @ c))
    return -1j * comm_h - 1j * _as_u(u) * comm_g + lind


def general_diffusion(rho, model: GeneralModel) -> np.ndarray:
    """Back-action of the generic model: sqrt(eta)(c rho + rho c* - Tr[(c+c*) rho] rho)."""
    m = np.asarray(rho)
    c, cd = model.c, model.c.conj().T
    tr = np.einsum("...ii->...", (c + cd) @ m).real
    return np.sqrt(model.eta) * (c @ m + m @ cd - tr[..., None, None] * m)


def em_step(rho, u: float, cfg: SdeStepConfig, dw: float,
            ops: SpinOperators) -> QuantumState:
    """One projected Euler-Maruyama step.

    ``dw`` is a caller-supplied Gaussian increment with variance dt, so a
    step is a deterministic function of its arguments. The result is
    projected back onto the state space unconditionally.
    """
    m = np.asarray(rho, dtype=complex)
    incr = sme_drift(m, u, ops) * cfg.dt + sme_diffusion(m, ops, cfg.eta) * dw
    out, tr = _clip_psd(m + incr)
    if np.any(tr <= 0.0):
        raise NumericalFailureError(
            f"projection failed after step: trace {np.min(tr):.3e}")
    return QuantumState(out, validate=False)


def _philox_rng(base_seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator keyed by (base_seed, stream)."""
    key = np.array([base_seed % 2**64, stream % 2**64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class _BatchResult:
    """Raw per-member series produced by the batched stepping loop."""

    times: np.ndarray            # (R,) recorded times
    V: np.ndarray                # (R, M)
    u: np.ndarray                # (R, M)
    purity: np.ndarray           # (R, M)
    modes: np.ndarray            # (R, M) uint8, 1 = feedback branch
    active: np.ndarray           # (R, M) False from the failure step on
    states: np.ndarray | None    # (R, M, N, N) raw snapshots
    state_sum: np.ndarray | None  # (R, N, N) sum over members active at t
    active_count: np.ndarray     # (R,)
    first_below: np.ndarray      # (M,) first time V < eps_conv, NaN if never
    exit_times: np.ndarray       # (M,) first time V <= exit_threshold
    failures: list               # [(member_index, time), ...]


def _integrate_batch(rho0, control, T: float, cfg: SdeStepConfig,
                     ops: SpinOperators, base_seed: int, streams,
                     *, f: int | None = None, record_stride: int = 1,
                     record_states: bool = False, accumulate_sum: bool = False,
                     exit_threshold: float | None = None,
                     stop_on_exit: bool = False,
                     eps_conv: float = EPS_CONV) -> _BatchResult:
    """Step a batch of trajectories that share rho0 and the control law.

    ``control`` is either a ControllerState template (each member gets an
    independent copy of its mode) or a real number used as a fixed input.
    ``f`` names the target index used for the V summaries; it is taken from
    the controller when one is given. Failed members (projection losing the
    whole trace) are frozen at their last valid state, excluded from the
    active mask from that step on, and reported in ``failures``.
    """
    if isinstance(control, ControllerState):
        mh = True
        f = control.f
        gamma = control.gamma
    else:
        mh = False
        u_const = float(control)
        if f is None:
            raise ValueError("a target index f is required with a fixed input")
    if record_stride < 1:
        raise ValueError("record_stride must be >= 1")
    if T <= 0:
        raise ValueError(f"horizon T must be > 0, got {T}")
    n_steps = int(round(T / cfg.dt))
    if n_steps < 1:
        raise ValueError(f"horizon T = {T} is below one step dt = {cfg.dt}")

    streams = list(streams)
    m_count = len(streams)
    rho0 = np.asarray(rho0, dtype=complex)
    n = rho0.shape[-1]
    fi = f - 1
    if not 0 <= fi < n:
        raise ValueError(f"target index must be in 1..{n}, got {f}")

    rec_ks = list(range(0, n_steps + 1, record_stride))
    if rec_ks[-1] != n_steps:
        rec_ks.append(n_steps)
    n_rec = len(rec_ks)

    state = np.tile(rho0, (m_count, 1, 1))
    modes = np.full(m_count, mh and control.mode is Mode.FEEDBACK, dtype=bool)
    active = np.ones(m_count, dtype=bool)
    first_below = np.full(m_count, np.nan)
    exit_times = np.full(m_count, np.nan)
    failures: list[tuple[int, float]] = []

    rec_V = np.zeros((n_rec, m_count))
    rec_u = np.zeros((n_rec, m_count))
    rec_purity = np.zeros((n_rec, m_count))
    rec_modes = np.zeros((n_rec, m_count), dtype=np.uint8)
    rec_active = np.zeros((n_rec, m_count), dtype=bool)
    rec_states = (np.zeros((n_rec, m_count, n, n), dtype=complex)
                  if record_states else None)
    rec_sum = np.zeros((n_rec, n, n), dtype=complex) if accumulate_sum else None

    gens = [_philox_rng(base_seed, s) for s in streams]
    sqrt_dt = np.sqrt(cfg.dt)
    chunk_len = max(1, min(n_steps, _NOISE_CHUNK_ELEMS // max(m_count, 1)))
    noise = np.empty((m_count, chunk_len))
    chunk_start = chunk_fill = 0

    rec_i = 0
    k = 0
    while True:
        t = k * cfg.dt
        v = np.clip(1.0 - state[:, fi, fi].real, 0.0, 1.0)

        newly_below = active & np.isnan(first_below) & (v < eps_conv)
        if newly_below.any():
            first_below[newly_below] = t
        if exit_threshold is not None:
            newly_out = active & np.isnan(exit_times) & (v <= exit_threshold)
            if newly_out.any():
                exit_times[newly_out] = t

        if mh:
            modes = switch_modes(modes, v, gamma)
            u_vec = np.where(modes, feedback_gain(state, f, ops), 1.0)
        else:
            u_vec = np.full(m_count, u_const)

        if rec_i < n_rec and k == rec_ks[rec_i]:
            rec_V[rec_i] = v
            rec_u[rec_i] = u_vec
            rec_purity[rec_i] = np.sum(np.abs(state) ** 2, axis=(-2, -1))
            rec_modes[rec_i] = modes
            rec_active[rec_i] = active
            if record_states:
                rec_states[rec_i] = state
            if accumulate_sum:
                rec_sum[rec_i] = state[active].sum(axis=0)
            rec_i += 1

        if k == n_steps:
            break
        if stop_on_exit and not (active & np.isnan(exit_times)).any():
            break

        if k - chunk_start >= chunk_fill:
            chunk_start = k
            chunk_fill = min(chunk_len, n_steps - k)
            for j, g in enumerate(gens):
                noise[j, :chunk_fill] = g.normal(0.0, sqrt_dt, chunk_fill)
        dw = noise[:, k - chunk_start]

        incr = (sme_drift(state, u_vec, ops) * cfg.dt
                + sme_diffusion(state, ops, cfg.eta) * dw[:, None, None])
        new_state = state + incr
        if (k + 1) % cfg.projection_every == 0:
            new_state, tr = _clip_psd(new_state)
            bad = active & (tr <= 0.0)
            if bad.any():
                t_fail = (k + 1) * cfg.dt
                failures.extend((int(i), t_fail) for i in np.flatnonzero(bad))
                active = active & ~bad
        if not active.all():
            new_state[~active] = state[~active]
        state = new_state
        k += 1

    return _BatchResult(
        times=np.asarray(rec_ks[:rec_i], dtype=float) * cfg.dt,
        V=rec_V[:rec_i], u=rec_u[:rec_i], purity=rec_purity[:rec_i],
        modes=rec_modes[:rec_i], active=rec_active[:rec_i],
        states=rec_states[:rec_i] if record_states else None,
        state_sum=rec_sum[:rec_i] if accumulate_sum else None,
        active_count=rec_active[:rec_i].sum(axis=1),
        first_below=first_below, exit_times=exit_times, failures=failures)


def simulate_batch(rho0, control, T: float, cfg: SdeStepConfig,
                   base_seed: int, streams, *, f: int | None = None,
                   ops: SpinOperators | None = None, record_stride: int = 1,
                   record_states: bool = False,
                   eps_conv: float = EPS_CONV) -> list[TrajectoryRecord]:
    """Simulate one trajectory per stream index and return their records.

    All trajectories start from ``rho0`` and share the control law;
    stream k draws its noise from the generator keyed (base_seed, k).
    Raises NumericalFailureError (with the failure time attached) if any
    member loses the state space.
    """
    if isinstance(control, ControllerState):
        ops = control.ops
    elif ops is None or f is None:
        raise ValueError("a fixed-input run requires both f and ops")
    res = _integrate_batch(rho0, control, T, cfg, ops, base_seed, streams,
                           f=f, record_stride=record_stride,
                           record_states=record_states, eps_conv=eps_conv)
    return _records_from_batch(res, base_seed, streams, record_states, eps_conv)


def _records_from_batch(res: _BatchResult, base_seed: int, streams,
                        record_states: bool,
                        eps_conv: float) -> list[TrajectoryRecord]:
    if res.failures:
        idx, t_fail = res.failures[0]
        raise NumericalFailureError(
            f"trajectory stream {streams[idx]} lost the state space at "
            f"t = {t_fail:g}", time=t_fail)
    records = []
    for j, stream in enumerate(streams):
        states = None
        if record_states:
            states = [QuantumState(res.states[i, j], validate=False)
                      for i in range(len(res.times))]
        fb = res.first_below[j]
        records.append(TrajectoryRecord(
            times=res.times.copy(),
            V=res.V[:, j].copy(),
            u=res.u[:, j].copy(),
            purity=res.purity[:, j].copy(),
            modes=np.where(res.modes[:, j] == 1, "feedback", "constant"),
            states=states,
            seed=base_seed,
            stream=stream,
            converged=bool(res.V[-1, j] < eps_conv),
            first_time_below=None if np.isnan(fb) else float(fb)))
    return records


def simulate_trajectory(rho0, controller, T: float, cfg: SdeStepConfig,
                        seed: int, *, stream: int = 0, f: int | None = None,
                        ops: SpinOperators | None = None,
                        record_stride: int = 1, record_states: bool = False,
                        eps_conv: float = EPS_CONV) -> TrajectoryRecord:
    """Simulate a single closed-loop (or fixed-input) trajectory.

    ``controller`` is a ControllerState for the switching law, or a real
    number for a fixed input (then ``f`` and ``ops`` must be given so the
    distance summaries are defined). Deterministic given all inputs: the
    same (seed, stream) yields a bit-identical record.
    """
    return simulate_batch(rho0, controller, T, cfg, seed, [stream], f=f,
                          ops=ops, record_stride=record_stride,
                          record_states=record_states, eps_conv=eps_conv)[0]


def ensemble_rhs(rho_bar, u, ops: SpinOperators) -> np.ndarray:
    """Right-hand side of the averaged dynamics (the drift alone).

    Identical to the trajectory drift; kept as its own entry point because
    it plays a different role: it propagates the ensemble average, whose
    unique equilibrium is the maximally mixed state.
    """
    return sme_drift(rho_bar, u, ops)


def integrate_ensemble(rho0, u_of_t, T: float, dt_ode: float,
                       ops: SpinOperators) -> OdeTrajectory:
    """Integrate the averaged dynamics with classical fixed-step RK4.

    ``u_of_t`` is a smooth function of time (or a constant); every grid
    state is projected back onto the state space. With any nonzero constant
    input the trajectory approaches I/N as T grows.
    """
    if dt_ode <= 0:
        raise ValueError(f"dt_ode must be > 0, got {dt_ode}")
    if T <= 0:
        raise ValueError(f"horizon T must be > 0, got {T}")
    n_steps = int(round(T / dt_ode))
    if n_steps < 1:
        raise ValueError(f"horizon T = {T} is below one step dt_ode = {dt_ode}")
    if callable(u_of_t):
        u_fun = u_of_t
    else:
        u_val = float(u_of_t)

        def u_fun(_t):
            return u_val

    state = np.asarray(rho0, dtype=complex)
    times = np.arange(n_steps + 1) * dt_ode
    states = [QuantumState(state, validate=False)]
    half = 0.5 * dt_ode
    for k in range(n_steps):
        t = k * dt_ode
        k1 = ensemble_rhs(state, u_fun(t), ops)
        k2 = ensemble_rhs(state + half * k1, u_fun(t + half), ops)
        k3 = ensemble_rhs(state + half * k2, u_fun(t + half), ops)
        k4 = ensemble_rhs(state + dt_ode * k3, u_fun(t + dt_ode), ops)
        state = state + (dt_ode / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        state, tr = _clip_psd(state)
        if tr <= 0.0:
            raise NumericalFailureError(
                f"averaged dynamics lost the state space at t = {t + dt_ode:g}",
                time=t + dt_ode)
        states.append(QuantumState(state, validate=False))
    return OdeTrajectory(times=times, states=states)
