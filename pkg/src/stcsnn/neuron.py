"""Synaptic layer and parametric multi-threshold LIF (PMLIF) dynamics.

All functions are elementwise over numpy arrays and keep no state of their
own; the small state dataclasses only bundle what one step consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class NeuronParams:
    v_th: float = 10.0
    s_max: int = 15
    alpha_h: float = 1.0
    alpha_w: float = 20.0

    def __post_init__(self):
        if self.v_th <= 0:
            raise ConfigError(f"V_th must be positive, got {self.v_th}")
        if self.s_max < 1:
            raise ConfigError(f"S_max must be >= 1, got {self.s_max}")
        if self.alpha_w <= 0:
            raise ConfigError(f"alpha_W must be positive, got {self.alpha_w}")


def sigmoid(w):
    w = np.asarray(w, dtype=float) if np.isscalar(w) else w
    # split by sign so exp never overflows
    e = np.exp(-np.abs(w))
    return np.where(w >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_grad(w):
    s = sigmoid(w)
    return s * (1.0 - s)


# --- synaptic layer -------------------------------------------------------

@dataclass(frozen=True)
class SynapseState:
    i_syn: np.ndarray

    @property
    def c_total(self) -> int:
        return self.i_syn.shape[-3]


def synaptic_decay(i_in: np.ndarray) -> np.ndarray:
    """Fraction of channels (axis -3) whose incoming current has any nonzero entry.

    Returns one factor per leading batch index (a 0-d array when unbatched).
    """
    if i_in.ndim < 3:
        raise ShapeError(f"synaptic input must be [..., C, H, W], got {i_in.shape}")
    active = np.any(i_in != 0, axis=(-2, -1))
    return active.sum(axis=-1) / i_in.shape[-3]


def synaptic_step(i_prev: np.ndarray, i_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One step of the first-order synapse; returns ``(i_syn, decay)``.

    The decay ``1 - 1/tau_syn`` equals ``C_valid / C_total``, with ``C_valid``
    counted on the incoming current of this step.
    """
    if isinstance(i_prev, SynapseState):
        i_prev = i_prev.i_syn
    if i_prev.shape != i_in.shape:
        raise ShapeError(f"synaptic state {i_prev.shape} does not match input {i_in.shape}")
    d = synaptic_decay(i_in)
    d_b = np.asarray(d, dtype=i_in.dtype)[..., None, None, None]
    return d_b * i_prev + i_in, d


# --- PMLIF ----------------------------------------------------------------

def spike_count(u, v_th: float, s_max: int):
    """Integer spike count 0..S_max for membrane potential ``u`` (elementwise)."""
    u = np.asarray(u, dtype=float) if np.isscalar(u) else u
    s = np.floor(u / v_th)
    # guard the division against rounding across a threshold
    s = np.where(s * v_th > u, s - 1, s)
    s = np.where((s + 1) * v_th <= u, s + 1, s)
    s = np.clip(s, 0, s_max)
    return s if np.ndim(s) else int(s)


def surrogate_grad(u, v_th: float, s_max: int, alpha_h: float, alpha_w: float):
    """Sum of ``S_max`` Gaussian bumps centred on ``i * V_th`` (i = 1..S_max)."""
    u = np.asarray(u, dtype=float) if np.isscalar(u) else u
    out = np.zeros_like(u)
    for i in range(1, s_max + 1):
        out = out + alpha_h * np.exp(-((u - i * v_th) ** 2) / alpha_w)
    return out if np.ndim(out) else out.item()


@dataclass(frozen=True)
class PMLIFState:
    u: np.ndarray
    w_m: np.ndarray
    v_th: float = 10.0
    s_max: int = 15

    def __post_init__(self):
        if self.v_th <= 0:
            raise ConfigError("V_th must be positive")
        if self.s_max < 1:
            raise ConfigError("S_max must be >= 1")

    @property
    def leak(self) -> np.ndarray:
        return sigmoid(self.w_m)


def pmlif_update(u_prev: np.ndarray, current: np.ndarray, leak: np.ndarray, v_th: float, s_max: int):
    """Euler step with soft reset. Returns ``(spikes, u_new, u_pre)``.

    Spikes are read from the pre-reset potential; the stored potential has
    ``spikes * v_th`` subtracted.
    """
    if np.shape(u_prev) != np.shape(current):
        raise ShapeError(f"membrane {np.shape(u_prev)} does not match current {np.shape(current)}")
    u_pre = leak * u_prev + current
    s = spike_count(u_pre, v_th, s_max)
    return s, u_pre - s * v_th, u_pre


def pmlif_step(state: PMLIFState, current: np.ndarray) -> tuple[np.ndarray, PMLIFState]:
    s, u_new, _ = pmlif_update(np.asarray(state.u, dtype=float), np.asarray(current, dtype=float),
                               state.leak, state.v_th, state.s_max)
    return np.asarray(s).astype(np.int64), replace(state, u=u_new)
