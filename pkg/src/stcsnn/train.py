"""Manual learning rule for the hybrid network.

Errors are propagated spatially within each step only. Temporal credit is
carried forward by eligibility traces:

* dense PMLIF layers keep ``du/dW``, ``du/db`` and ``du/dw_m``, each divided by
  ``1 + f1(u) * V_th`` where ``f1`` is the multi-Gaussian surrogate derivative;
* the synaptic convolution keeps the synapse-filtered input and bias trace,
  which is the exact derivative of the synaptic current with the adaptive
  decay held constant.

Per-step gradients ``delta * trace`` are summed over time, averaged over the
batch and applied with Adam.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as K
from .errors import ConfigError, NumericalError, ShapeError
from .network import (
    AvgPool,
    Conv,
    DensePMLIF,
    Dropout,
    Model,
    NetworkConfig,
    SynapticConv,
    Voting,
    forward,
    infer_shapes,
    group_bounds,
    init_group_map,
    output_size,
    param_shapes,
    voting,
)
from .neuron import sigmoid, sigmoid_grad, surrogate_grad

log = logging.getLogger(__name__)


def loss_mse(s_out: np.ndarray, y: np.ndarray):
    """Half squared error over the last axis; returns ``(L, dL/ds)``."""
    s_out = np.asarray(s_out)
    y = np.asarray(y)
    if s_out.shape != y.shape:
        raise ShapeError(f"output {s_out.shape} and target {y.shape} differ")
    diff = s_out - y
    return 0.5 * np.sum(diff * diff, axis=-1), diff


def target_encode(label: int, group_map: np.ndarray, n_dense: int, desired_count: int = 1,
                  n_class: int | None = None, s_max: int = 15) -> np.ndarray:
    """Desired per-step firing: ``desired_count`` on the label's voting group, 0 elsewhere."""
    if n_class is None:
        raise ConfigError("n_class is required")
    if not 1 <= desired_count <= s_max:
        raise ConfigError(f"desired_count must lie in [1, {s_max}], got {desired_count}")
    if not 0 <= label < n_class:
        raise ConfigError(f"label {label} out of range for {n_class} classes")
    if len(group_map) != n_dense:
        raise ConfigError(f"group map covers {len(group_map)} neurons, layer has {n_dense}")
    lo, hi = group_bounds(n_dense, n_class)[label]
    y = np.zeros(n_dense)
    y[group_map[lo:hi]] = desired_count
    return y


def encode_targets(model: Model, labels, desired_count: int = 1) -> np.ndarray:
    n = output_size(model.config, model.input_shape)
    return np.stack([
        target_encode(int(c), model.group_map, n, desired_count, model.config.n_classes,
                      model.config.neuron.s_max)
        for c in labels
    ]).astype(model.dtype)


# --- initialisation -------------------------------------------------------

def init_weights(config: NetworkConfig, input_shape, seed: int, dtype=np.float32) -> dict:
    """Normal(V_th / fan_in, 0.5) weights, zero biases, zero ``w_m`` (leak 0.5)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, input_shape).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(config.neuron.v_th / fan_in, 0.5, size=shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def init_model(config: NetworkConfig, input_shape, seed: int, dtype=np.float32) -> Model:
    params = init_weights(config, input_shape, seed, dtype)
    n_out = output_size(config, input_shape)
    group_map = init_group_map(n_out, config.n_classes, (seed, 1))
    return Model(config, tuple(input_shape), params, group_map, seed)


def trainable(model: Model) -> list[str]:
    if model.config.ablation.use_learnable_wm:
        return list(model.params)
    return [n for n in model.params if not n.endswith(".wm")]


# --- backward -------------------------------------------------------------

@dataclass
class Eligibility:
    """Per-layer traces, keyed by layer index.

    Dense PMLIF layers hold ``W`` ``[B, N_out, N_in]``, ``b`` and ``wm``
    ``[B, N_out]``; the synaptic convolution holds ``x`` (filtered input) and
    ``beta`` (filtered bias drive, ``[B]``).
    """

    traces: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, model: Model, batch: int) -> "Eligibility":
        shapes = infer_shapes(model.config, model.input_shape)
        traces = {}
        dt = model.dtype
        for i, layer in enumerate(model.config.layers):
            if isinstance(layer, DensePMLIF):
                n_in = int(np.prod(shapes[i][0]))
                traces[i] = {"W": np.zeros((batch, layer.n, n_in), dt),
                             "b": np.zeros((batch, layer.n), dt),
                             "wm": np.zeros((batch, layer.n), dt)}
            elif isinstance(layer, SynapticConv) and model.config.ablation.use_synaptic_block:
                traces[i] = {"x": np.zeros((batch,) + tuple(shapes[i][0]), dt),
                             "beta": np.zeros(batch, dt)}
        return cls(traces)


def backward_step(model: Model, step, masks: dict, grad_out: np.ndarray, elig: Eligibility,
                  surrogate=None):
    """Gradient contributions of one time step.

    ``step`` is the list of :class:`LayerTrace` for this step, ``grad_out``
    is dL/d(output activations) ``[B, N_out]``. Returns ``(contrib, elig)``
    where ``contrib`` maps parameter names to batch-summed gradients and
    ``elig`` holds the traces updated to this step.
    """
    cfg = model.config
    nrn = cfg.neuron
    params = model.params
    if surrogate is None:
        def surrogate(u):
            return surrogate_grad(u, nrn.v_th, nrn.s_max, nrn.alpha_h, nrn.alpha_w)
    shapes = infer_shapes(cfg, model.input_shape)
    B = grad_out.shape[0]
    new = {}
    contrib = {}
    g = grad_out
    for i in range(len(cfg.layers) - 1, -1, -1):
        layer, rec = cfg.layers[i], step[i]
        if isinstance(layer, Voting):
            g = g.reshape((B,) + tuple(shapes[i][0]))
        elif isinstance(layer, DensePMLIF):
            prev = elig.traces[i]
            if prev["W"].shape != (B, layer.n, rec.x.shape[1]):
                raise ShapeError(f"layer {i}: eligibility {prev['W'].shape} does not match the trace")
            wm = params[f"{i}.wm"]
            leak = sigmoid(wm)
            f = surrogate(rec.u_pre)
            denom = 1.0 + f * nrn.v_th
            e_w = (leak[None, :, None] * prev["W"] + rec.x[:, None, :]) / denom[:, :, None]
            e_b = (leak * prev["b"] + 1.0) / denom
            if cfg.ablation.use_learnable_wm:
                e_m = sigmoid_grad(wm) * rec.u_prev / denom
            else:
                e_m = np.zeros_like(prev["wm"])
            new[i] = {"W": e_w, "b": e_b, "wm": e_m}
            delta = g.reshape(B, layer.n) * f
            contrib[f"{i}.weight"] = np.einsum("bi,bij->ij", delta, e_w)
            contrib[f"{i}.bias"] = np.sum(delta * e_b, axis=0)
            contrib[f"{i}.wm"] = np.sum(delta * e_m, axis=0)
            if i > 0:
                g = (delta @ params[f"{i}.weight"]).reshape((B,) + tuple(shapes[i][0]))
        elif isinstance(layer, Dropout):
            if i in masks:
                g = g * masks[i]
        elif isinstance(layer, AvgPool):
            g = K.avgpool2d_backward(g, layer.k)
        elif isinstance(layer, SynapticConv) and cfg.ablation.use_synaptic_block:
            prev = elig.traces[i]
            d = rec.decay.astype(model.dtype)
            x_f = d[:, None, None, None] * prev["x"] + rec.x
            beta = d * prev["beta"] + 1.0
            new[i] = {"x": x_f, "beta": beta}
            _, gw, _ = K.conv2d_backward(g, x_f, params[f"{i}.weight"], padding=layer.kernel // 2,
                                          need_input_grad=False)
            contrib[f"{i}.weight"] = gw
            contrib[f"{i}.bias"] = np.einsum("bchw,b->c", g, beta)
            # first layer by construction: nothing below to propagate into
        elif isinstance(layer, (Conv, SynapticConv)):
            gz = K.relu_backward(g, rec.z)
            gx, gw, gb = K.conv2d_backward(gz, rec.x, params[f"{i}.weight"], padding=layer.kernel // 2,
                                           need_input_grad=i > 0)
            contrib[f"{i}.weight"] = gw
            contrib[f"{i}.bias"] = gb
            g = gx
    return contrib, Eligibility(new)


def sample_gradients(model: Model, frames: np.ndarray, targets: np.ndarray, seeds=0, surrogate=None):
    """Forward plus backward over all steps for a batch.

    Returns ``(grads, losses, outputs)``: batch-SUMMED gradients, per-sample
    total loss ``sum_t L[t]`` and the ``[B, T, N_out]`` outputs.
    """
    frames = np.asarray(frames, dtype=model.dtype)
    trace, out = forward(model, frames, mode="train", seed=seeds)
    B = frames.shape[0]
    elig = Eligibility.zeros(model, B)
    grads = {n: np.zeros_like(p) for n, p in model.params.items()}
    losses = np.zeros(B)
    for t, step in enumerate(trace.steps):
        L, dL = loss_mse(out[:, t], targets)
        losses += L
        contrib, elig = backward_step(model, step, trace.masks, dL, elig, surrogate)
        for name, g in contrib.items():
            grads[name] += g
    return grads, losses, out


# --- optimiser ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(**d)


def adam_update(params: dict, grads: dict, state: AdamState, names=None):
    """Bias-corrected Adam step, in place on ``params``; returns ``(params, state)``."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name in (names if names is not None else grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# --- training loop --------------------------------------------------------

@dataclass
class FitConfig:
    lr: float = 2e-4
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    desired_count: int = 1
    threads: int = 1


def sample_seed(run_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, epoch, index]).generate_state(1)[0])


def _chunks(n: int, parts: int):
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(edges[k], edges[k + 1]) for k in range(parts) if edges[k + 1] > edges[k]]


def batch_gradients(model: Model, frames, targets, seeds, threads: int = 1):
    """Mean gradient over the batch. Chunks are reduced in a fixed order."""
    B = len(frames)

    def work(lo_hi):
        lo, hi = lo_hi
        return sample_gradients(model, frames[lo:hi], targets[lo:hi], seeds[lo:hi])

    chunks = _chunks(B, threads)
    if len(chunks) == 1:
        results = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(work, chunks))
    grads = {n: np.zeros_like(p) for n, p in model.params.items()}
    losses, outs = [], []
    for g, L, out in results:
        for n in grads:
            grads[n] += g[n]
        losses.append(L)
        outs.append(out)
    for n in grads:
        grads[n] /= B
    return grads, np.concatenate(losses), np.concatenate(outs)


def evaluate(model: Model, frames, labels, batch_size: int = 256, threads: int = 1):
    """Accuracy and confusion matrix (rows: true class, columns: predicted)."""
    from .network import predict

    labels = np.asarray(labels, dtype=np.int64)
    n_class = model.config.n_classes
    preds = []
    spans = [(lo, min(lo + batch_size, len(frames))) for lo in range(0, len(frames), batch_size)]

    def work(span):
        return predict(model, np.asarray(frames[span[0]:span[1]], dtype=model.dtype))

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(work, spans))
    else:
        preds = [work(s) for s in spans]
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    confusion = np.zeros((n_class, n_class), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    acc = float(np.mean(pred == labels)) if len(labels) else 0.0
    return acc, confusion


def fit(model: Model, train_x, train_y, test_x, test_y, cfg: FitConfig,
        adam: AdamState | None = None, start_epoch: int = 0, on_epoch=None):
    """Train in place for epochs ``start_epoch .. cfg.epochs - 1``.

    ``on_epoch(epoch, loss, train_acc, test_acc, seconds, adam)`` is called
    after every epoch. Returns the Adam state.
    """
    if adam is None:
        adam = AdamState(lr=cfg.lr)
    names = trainable(model)
    train_y = np.asarray(train_y, dtype=np.int64)
    targets = encode_targets(model, train_y, cfg.desired_count)
    n = len(train_x)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total_loss = 0.0
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            seeds = [sample_seed(cfg.seed, epoch, int(k)) for k in idx]
            grads, losses, out = batch_gradients(model, np.asarray(train_x[idx], dtype=model.dtype),
                                                 targets[idx], seeds, cfg.threads)
            if not (np.all(np.isfinite(losses)) and all(np.all(np.isfinite(g)) for g in grads.values())):
                raise NumericalError(f"non-finite loss or gradient in epoch {epoch}")
            adam_update(model.params, grads, adam, names)
            total_loss += float(losses.sum())
            pred = voting(out.sum(axis=1), model.group_map, model.config.n_classes)
            correct += int(np.sum(pred == train_y[idx]))
        train_loss = total_loss / max(n, 1)
        if not math.isfinite(train_loss):
            raise NumericalError(f"training loss became non-finite in epoch {epoch}")
        test_acc = evaluate(model, test_x, test_y, threads=cfg.threads)[0] if len(test_x) else float("nan")
        seconds = time.perf_counter() - t0
        log.info("epoch %d loss %.4f train %.4f test %.4f (%.1fs)", epoch, train_loss,
                 correct / max(n, 1), test_acc, seconds)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, correct / max(n, 1), test_acc, seconds, adam)
    return adam


def format_log_line(epoch, loss, train_acc, test_acc, seconds) -> str:
    return f"{epoch}\t{loss:.6f}\t{train_acc:.4f}\t{test_acc:.4f}\t{seconds:.3f}"
