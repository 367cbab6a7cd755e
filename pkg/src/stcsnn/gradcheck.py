"""Gradient verification for tiny networks.

Two independent checks of the production backward pass:

1. equality with the scalar-loop oracle in :mod:`stcsnn.oracle`;
2. central finite differences over the differentiable front end. With no
   spiking layer the loss itself is differentiated. Otherwise the spiking
   layers are frozen: the error that the learning rule delivers to the first
   dense block's input at each step is held fixed, which turns the loss into
   a linear functional of the front-end activations whose exact gradient the
   rule must reproduce.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import Conv, DensePMLIF, Model, NetworkConfig, SynapticConv, forward
from .oracle import oracle_gradients
from .train import encode_targets, init_model, sample_gradients

ORACLE_TOL = 1e-10
FD_TOL = 1e-4


@dataclass
class CheckResult:
    block: str
    method: str
    error: float
    tol: float
    scale: float = 0.0   # largest production gradient magnitude in the block

    @property
    def ok(self) -> bool:
        return self.error < self.tol


@dataclass
class GradCheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def max_error(self) -> dict:
        out = {}
        for r in self.results:
            out[r.method] = max(out.get(r.method, 0.0), r.error)
        return out

    def failures(self) -> list:
        return [r for r in self.results if not r.ok]

    def format(self) -> str:
        lines = [f"{'block':<12} {'method':<8} {'rel.error':>12} {'tol':>8} {'max|grad|':>11}  status"]
        for r in self.results:
            lines.append(f"{r.block:<12} {r.method:<8} {r.error:12.3e} {r.tol:8.0e} {r.scale:11.3e}  "
                         f"{'ok' if r.ok else 'FAIL'}")
        lines.append("PASS" if self.passed else "FAIL: " + ", ".join(f"{r.block} ({r.method})" for r in self.failures()))
        return "\n".join(lines)


def rel_error(a, b) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; zero when both blocks are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    diff = np.max(np.abs(a - b), initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def random_frames(input_shape, T: int, rng, zero_step_prob: float = 0.25) -> np.ndarray:
    """Small non-negative integer frames; whole steps are blanked at random.

    At least one step is kept and carries at least one event.
    """
    frames = rng.integers(0, 4, size=(T,) + tuple(input_shape)).astype(np.float64)
    blank = rng.random(T) < zero_step_prob
    keep = rng.integers(0, T)
    blank[keep] = False
    frames[blank] = 0.0
    if not frames[keep].any():
        idx = tuple(int(rng.integers(0, n)) for n in input_shape)
        frames[(keep,) + idx] = float(rng.integers(1, 4))
    return frames


def _front_end_params(config: NetworkConfig):
    first_dense = next((i for i, l in enumerate(config.layers) if isinstance(l, DensePMLIF)), None)
    stop = first_dense if first_dense is not None else len(config.layers)
    names = []
    for i, layer in enumerate(config.layers[:stop]):
        if isinstance(layer, (Conv, SynapticConv)):
            names += [f"{i}.weight", f"{i}.bias"]
    return first_dense, names


def calibrate(model: Model, frames, seed, peak: float = 97.3) -> None:
    """Rescale dense weights so the largest input current is ``peak``.

    Freshly initialised deep nets tend to saturate at ``S_max`` where the
    surrogate vanishes and every gradient is exactly zero; scaling layer by
    layer keeps membrane potentials inside the surrogate's support. The
    default peak sits between two thresholds so no potential lands on one.
    """
    for i, layer in enumerate(model.config.layers):
        if not isinstance(layer, DensePMLIF):
            continue
        trace, _ = forward(model, frames[None], mode="train", seed=seed)
        w, b = model.params[f"{i}.weight"], model.params[f"{i}.bias"]
        top = max(float(np.max(np.abs(step[i].x @ w.T + b))) for step in trace.steps)
        if top > 0:
            w *= peak / top
            b *= peak / top


def _fd_objective(model: Model, frames, seed, targets, first_dense, frozen_grads, decay):
    trace, out = forward(model, frames[None], mode="train", seed=seed, fixed_decay=decay)
    if first_dense is None:
        diff = out[0] - targets[0]
        return 0.5 * float(np.sum(diff * diff))
    total = 0.0
    for t, step in enumerate(trace.steps):
        total += float(np.dot(step[first_dense].x[0], frozen_grads[t]))
    return total


def grad_check(config: NetworkConfig, input_shape, seed: int = 0, eps: float = 1e-3,
               desired_count: int = 1, perturb: str | None = None, frames=None,
               model: Model | None = None) -> GradCheckReport:
    """Compare production gradients to the oracle and to finite differences.

    ``perturb`` names a parameter block whose production gradient is
    deliberately corrupted (fault injection for testing the checker).
    """
    rng = np.random.default_rng([seed, 7])
    own_model = model is None
    if own_model:
        model = init_model(config, input_shape, seed, dtype=np.float64)
        # move ReLU convolutions off the kink that zero bias puts at blank steps
        for i, layer in enumerate(config.layers):
            relu_conv = isinstance(layer, Conv) or (
                isinstance(layer, SynapticConv) and not config.ablation.use_synaptic_block)
            if relu_conv:
                model.params[f"{i}.bias"] = rng.normal(0.0, 0.5, size=layer.channels)
    if frames is None:
        frames = random_frames(input_shape, config.T, rng)
    frames = np.asarray(frames, dtype=np.float64)
    label = int(rng.integers(0, config.n_classes))
    targets = encode_targets(model, [label], desired_count)
    dropout_seed = [int(rng.integers(0, 2**31))]
    if own_model:
        for name in model.params:
            if name.endswith(".wm"):
                model.params[name] = rng.normal(0.0, 1.0, size=model.params[name].shape)
        calibrate(model, frames, dropout_seed)

    grads, _, _ = sample_gradients(model, frames[None], targets, dropout_seed)
    if perturb is not None:
        if perturb not in grads:
            raise KeyError(f"no parameter block named {perturb!r}")
        grads[perturb] = grads[perturb] + 1e-3 * (1.0 + np.abs(grads[perturb]))

    report = GradCheckReport()
    first_dense, fe_names = _front_end_params(config)

    if first_dense is not None:
        trace, _ = forward(model, frames[None], mode="train", seed=dropout_seed)
        masks = {i: m[0] for i, m in trace.masks.items()}
        ograds, _, in_grads = oracle_gradients(model, frames, targets[0], masks)
        for name in model.params:
            report.results.append(CheckResult(name, "oracle", rel_error(grads[name], ograds[name]), ORACLE_TOL,
                                              float(np.max(np.abs(grads[name])))))
    else:
        in_grads = None

    if fe_names:
        frozen = [np.asarray(g) for g in in_grads] if in_grads is not None else None
        # the rule treats the synaptic decay as a constant
        base, _ = forward(model, frames[None], mode="train", seed=dropout_seed)
        decay = {i: [step[i].decay for step in base.steps]
                 for i, rec in enumerate(base.steps[0]) if rec.decay is not None}
        for name in fe_names:
            p = model.params[name]
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = _fd_objective(model, frames, dropout_seed, targets, first_dense, frozen, decay)
                p[idx] = old - eps
                down = _fd_objective(model, frames, dropout_seed, targets, first_dense, frozen, decay)
                p[idx] = old
                fd[idx] = (up - down) / (2 * eps)
            report.results.append(CheckResult(name, "fd", rel_error(grads[name], fd), FD_TOL,
                                          float(np.max(np.abs(grads[name])))))
    return report
