"""Neuron-astrocyte dynamical system integrated with forward Euler.

A single population of ``n`` leaky integrate-and-fire neurons sits on a 1-D
line.  Every ordered pair (i, j) carries a facilitating synapse, and every
synapse is watched by an astrocyte process with two timescales: a fast one
(``stp``) that couples synapses by spatial proximity, and a slow one
(``ltp``) that integrates facilitation into a long-term level.  The slow
level is the quantity the retention module turns into per-segment factors.

State variables per step (n neurons, n x n synapses):

* ``v``      membrane potentials, reset on threshold crossing
* ``rate``   exponential moving average of each neuron's spike rate (Hz)
* ``fac``    synaptic facilitation, driven by co-activity of the two
             endpoint neurons plus feedback from the fast astrocyte process
* ``stp``    fast astrocyte process, coupled across synapses through a
             distance-decay tensor
* ``ltp``    slow astrocyte process, integrating a squashed copy of ``fac``

Spikes use delta-function semantics: an emitted spike contributes
``1 / dt`` to the synaptic current for one step, so the injected charge is
independent of the step size.  Spikes emitted at step k (externally driven
or threshold crossings) arrive at the synapses at step k + 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalOverflowError

def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


ACTIVATIONS = {
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "linear": lambda x: x,
}


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}"
        ) from None


def _centered(name: str):
    """The named activation shifted so that f(0) = 0.

    Keeps the all-zero state a fixed point even for sigmoid-style maps.
    """
    f = _activation(name)
    offset = float(np.asarray(f(np.zeros(1)))[0])

    def g(x):
        return f(x) - offset

    return g


@dataclass(frozen=True)
class SimParams:
    """Integration constants and nonlinearity choices.

    Defaults are the reference configuration used throughout the tests:
    membrane/facilitation/fast/slow time constants 0.5 / 0.75 / 1 / 6 s,
    decay rates 0.2 / 0.25 / 0.2 / 0.1, thresholds +-1 mV, zero input
    offsets, dt = 40 ms.
    """

    tau_mem: float = 0.5
    tau_fac: float = 0.75
    tau_stp: float = 1.0
    tau_ltp: float = 6.0
    leak: float = 0.2
    fac_decay: float = 0.25
    stp_decay: float = 0.2
    ltp_decay: float = 0.1
    v_th: float = 1.0
    v_reset: float = -1.0
    bias: float = 0.0
    fac_input: float = 0.0
    stp_input: float = 0.0
    dt: float = 0.04
    act_rate: str = "tanh"
    act_hebb: str = "tanh"
    act_astro: str = "tanh"
    act_ltp: str = "sigmoid"
    syn_gain: str = "linear"

    def __post_init__(self):
        for name in ("tau_mem", "tau_fac", "tau_stp", "tau_ltp", "dt"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("leak", "fac_decay", "stp_decay", "ltp_decay"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if self.dt >= min(self.tau_mem, self.tau_fac, self.tau_stp, self.tau_ltp):
            raise InvalidArgumentError(
                "dt must be smaller than every time constant for a stable Euler step"
            )
        if self.tau_ltp <= self.tau_stp:
            raise InvalidArgumentError(
                "the slow astrocyte timescale must exceed the fast one"
            )
        if self.v_th <= self.v_reset:
            raise InvalidArgumentError("v_th must exceed v_reset")
        for name in ("act_rate", "act_hebb", "act_astro", "act_ltp", "syn_gain"):
            _activation(getattr(self, name))


@dataclass(frozen=True)
class SynapseGeometry:
    """Neuron coordinates on a line plus derived synapse-midpoint distances.

    ``distances`` is the (n^2, n^2) matrix of separations between all
    synapse midpoints, indexed row-major: synapse (i, j) is entry i*n + j.
    """

    positions: np.ndarray
    midpoints: np.ndarray
    distances: np.ndarray

    @property
    def n_neurons(self) -> int:
        return self.positions.shape[0]


def build_geometry(n_neurons: int, spacing: float = 1.0) -> SynapseGeometry:
    """Place neurons at 0, spacing, 2*spacing, ... and compute midpoints."""
    if n_neurons < 1:
        raise InvalidArgumentError("n_neurons must be at least 1")
    if spacing <= 0:
        raise InvalidArgumentError("spacing must be positive")
    positions = np.arange(n_neurons, dtype=np.float64) * spacing
    midpoints = 0.5 * (positions[:, None] + positions[None, :])
    flat = midpoints.ravel()
    distances = np.abs(flat[:, None] - flat[None, :])
    return SynapseGeometry(positions=positions, midpoints=midpoints, distances=distances)


@dataclass(frozen=True)
class CouplingTensor:
    """exp(-distance * scale) influence weights between synapse pairs."""

    matrix: np.ndarray
    scale: float
    n_neurons: int


def coupling_tensor(geometry: SynapseGeometry, scale: float) -> CouplingTensor:
    if scale < 0:
        raise InvalidArgumentError("coupling scale must be non-negative")
    matrix = np.exp(-geometry.distances * scale)
    return CouplingTensor(matrix=matrix, scale=scale, n_neurons=geometry.n_neurons)


@dataclass(frozen=True)
class DriveSpec:
    """Regular forced spiking applied to every neuron at a fixed rate."""

    rate_hz: float = 10.0

    def __post_init__(self):
        if self.rate_hz < 0:
            raise InvalidArgumentError("drive rate must be non-negative")

    def spike_vector(self, t: float, dt: float, n: int) -> np.ndarray:
        """Spike indicators for the step covering (t, t + dt]."""
        if self.rate_hz == 0:
            return np.zeros(n)
        eps = 1e-9
        before = math.floor(t * self.rate_hz + eps)
        after = math.floor((t + dt) * self.rate_hz + eps)
        if after > before:
            return np.ones(n)
        return np.zeros(n)


@dataclass
class SimState:
    v: np.ndarray
    fac: np.ndarray
    stp: np.ndarray
    ltp: np.ndarray
    rate: np.ndarray
    spikes: np.ndarray
    t: float = 0.0


def initial_state(
    n_neurons: int,
    params: SimParams,
    fac: np.ndarray | float | None = None,
    stp: np.ndarray | float | None = None,
    ltp: np.ndarray | float | None = None,
) -> SimState:
    """Rest state: v at reset, everything else zero unless overridden."""

    def matrix(value):
        if value is None:
            return np.zeros((n_neurons, n_neurons))
        if np.isscalar(value):
            return np.full((n_neurons, n_neurons), float(value))
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != (n_neurons, n_neurons):
            raise InvalidArgumentError(
                f"override shape {arr.shape} != ({n_neurons}, {n_neurons})"
            )
        return arr.copy()

    return SimState(
        v=np.full(n_neurons, params.v_reset, dtype=np.float64),
        fac=matrix(fac),
        stp=matrix(stp),
        ltp=matrix(ltp),
        rate=np.zeros(n_neurons),
        spikes=np.zeros(n_neurons),
        t=0.0,
    )


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalOverflowError(name)


def step(
    state: SimState,
    params: SimParams,
    coupling: CouplingTensor,
    spikes_in: np.ndarray,
) -> SimState:
    """One forward-Euler update; all right-hand sides use the old state."""
    n = state.v.shape[0]
    if coupling.n_neurons != n:
        raise InvalidArgumentError(
            f"coupling built for {coupling.n_neurons} neurons, state has {n}"
        )
    spikes_in = np.asarray(spikes_in, dtype=np.float64)
    if spikes_in.shape != (n,):
        raise InvalidArgumentError(f"spikes_in must have shape ({n},)")
    dt = params.dt

    gain = _activation(params.syn_gain)
    hebb = _activation(params.act_hebb)
    astro = _activation(params.act_astro)
    ltp_map = _centered(params.act_ltp)
    rate_map = _activation(params.act_rate)

    # Membrane update: leak toward reset plus synaptic current from spikes
    # emitted at the previous step (delta semantics, hence the 1/dt).
    current = gain(state.fac) @ (state.spikes / dt) + params.bias
    v_new = state.v + (dt / params.tau_mem) * (
        -params.leak * (state.v - params.v_reset) + current
    )
    crossed = v_new >= params.v_th
    emitted = np.maximum(crossed.astype(np.float64), spikes_in)
    v_new = np.where(emitted > 0, params.v_reset, v_new)

    # Activity estimate: EMA of the instantaneous spike rate over tau_mem,
    # squashed to a bounded per-neuron activity used symmetrically for the
    # pre- and postsynaptic side of the same step.
    rate_new = state.rate + (dt / params.tau_mem) * (emitted / dt - state.rate)
    activity = rate_map(state.rate)
    co_active = np.outer(hebb(activity), hebb(activity))

    fac_new = state.fac + (dt / params.tau_fac) * (
        -params.fac_decay * state.fac
        + co_active
        + astro(state.stp)
        + params.fac_input
    )

    influence = (coupling.matrix @ astro(state.stp).ravel()).reshape(n, n)
    stp_new = state.stp + (dt / params.tau_stp) * (
        -params.stp_decay * state.stp + influence + params.stp_input
    )

    ltp_new = state.ltp + (dt / params.tau_ltp) * (
        -params.ltp_decay * state.ltp + ltp_map(state.fac)
    )

    _check_finite("v", v_new)
    _check_finite("fac", fac_new)
    _check_finite("stp", stp_new)
    _check_finite("ltp", ltp_new)

    return SimState(
        v=v_new,
        fac=fac_new,
        stp=stp_new,
        ltp=ltp_new,
        rate=rate_new,
        spikes=emitted,
        t=state.t + dt,
    )


@dataclass(frozen=True)
class SimTrace:
    """Recorded state snapshots, one per step plus the initial sample.

    ``cycle_ends[k]`` is the sample index where cycle k + 1 finished; the
    fast variables were reset immediately after that sample.
    """

    times: np.ndarray
    fac: np.ndarray
    stp: np.ndarray
    ltp: np.ndarray
    cycle_ends: tuple[int, ...]


def steps_per_cycle(cycle_duration: float, dt: float) -> int:
    ratio = cycle_duration / dt
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise InvalidArgumentError(
            f"cycle duration {cycle_duration} is not a positive multiple of dt {dt}"
        )
    return n


def run_stp_cycles(
    params: SimParams,
    coupling: CouplingTensor,
    n_cycles: int,
    cycle_duration: float,
    drive: DriveSpec,
    initial: SimState | None = None,
) -> SimTrace:
    """Integrate repeated stimulation cycles.

    At each cycle boundary the fast variables (v, rate, spikes, fac, stp)
    are reset to their initial values; the slow ltp level and the clock
    persist, which is what lets it accumulate across cycles.
    """
    if n_cycles < 1:
        raise InvalidArgumentError("n_cycles must be at least 1")
    n = coupling.n_neurons
    spc = steps_per_cycle(cycle_duration, params.dt)
    state = initial if initial is not None else initial_state(n, params)
    if state.v.shape[0] != n:
        raise InvalidArgumentError("initial state size does not match coupling")
    reset_template = SimState(
        v=state.v.copy(),
        fac=state.fac.copy(),
        stp=state.stp.copy(),
        ltp=state.ltp.copy(),
        rate=state.rate.copy(),
        spikes=state.spikes.copy(),
        t=0.0,
    )

    n_samples = n_cycles * spc + 1
    times = np.empty(n_samples)
    fac = np.empty((n_samples, n, n))
    stp = np.empty((n_samples, n, n))
    ltp = np.empty((n_samples, n, n))

    def record(k: int, s: SimState) -> None:
        times[k] = s.t
        fac[k] = s.fac
        stp[k] = s.stp
        ltp[k] = s.ltp

    record(0, state)
    k = 0
    for cycle in range(n_cycles):
        if cycle > 0:
            state = SimState(
                v=reset_template.v.copy(),
                fac=reset_template.fac.copy(),
                stp=reset_template.stp.copy(),
                ltp=state.ltp,
                rate=reset_template.rate.copy(),
                spikes=reset_template.spikes.copy(),
                t=state.t,
            )
        for _ in range(spc):
            spikes_in = drive.spike_vector(state.t, params.dt, n)
            state = step(state, params, coupling, spikes_in)
            k += 1
            record(k, state)

    cycle_ends = tuple((c + 1) * spc for c in range(n_cycles))
    return SimTrace(times=times, fac=fac, stp=stp, ltp=ltp, cycle_ends=cycle_ends)
