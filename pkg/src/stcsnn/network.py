"""Network assembly: architecture strings, forward pass, voting, checkpoints.

Architecture strings use '-' separated tokens::

    128SC3   synaptic convolution block, 128 filters of 3x3
    128C3    convolution block (conv + ReLU), 128 filters of 3x3
    AP2      2x2 average pooling
    DP       dropout
    512FC    fully connected layer of 512 PMLIF neurons
    10Voting voting layer over 10 classes

Convolutions use stride 1 and "same" zero padding, so only pooling changes
the spatial size.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as K
from .errors import ConfigError, FormatError, ShapeError
from .neuron import NeuronParams, pmlif_update, sigmoid, synaptic_step


@dataclass(frozen=True)
class SynapticConv:
    channels: int
    kernel: int


@dataclass(frozen=True)
class Conv:
    channels: int
    kernel: int


@dataclass(frozen=True)
class AvgPool:
    k: int


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5


@dataclass(frozen=True)
class DensePMLIF:
    n: int


@dataclass(frozen=True)
class Voting:
    classes: int


Layer = Union[SynapticConv, Conv, AvgPool, Dropout, DensePMLIF, Voting]


@dataclass(frozen=True)
class Ablation:
    use_synaptic_block: bool = True
    use_learnable_wm: bool = True


# S0..S3 of the ablation study
STRATEGIES = {
    "S0": Ablation(True, True),
    "S1": Ablation(False, True),
    "S2": Ablation(True, False),
    "S3": Ablation(False, False),
}


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple
    T: int
    ablation: Ablation = Ablation()
    neuron: NeuronParams = NeuronParams()

    @property
    def n_classes(self) -> int:
        return self.layers[-1].classes

    @property
    def arch(self) -> str:
        return format_arch(self.layers)


_TOKENS = [
    (re.compile(r"(\d+)SC(\d+)", re.I), lambda m, r: SynapticConv(int(m[1]), int(m[2]))),
    (re.compile(r"(\d+)C(\d+)", re.I), lambda m, r: Conv(int(m[1]), int(m[2]))),
    (re.compile(r"AP(\d+)", re.I), lambda m, r: AvgPool(int(m[1]))),
    (re.compile(r"DP", re.I), lambda m, r: Dropout(r)),
    (re.compile(r"(\d+)FC", re.I), lambda m, r: DensePMLIF(int(m[1]))),
    (re.compile(r"(\d+)Voting", re.I), lambda m, r: Voting(int(m[1]))),
]


def parse_arch(text: str, T: int, *, use_synaptic_block: bool = True, use_learnable_wm: bool = True,
               dropout_rate: float = 0.5, neuron: NeuronParams | None = None) -> NetworkConfig:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 <= dropout_rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
    layers = []
    for pos, tok in enumerate(text.strip().split("-"), start=1):
        tok = tok.strip()
        for pattern, build in _TOKENS:
            m = pattern.fullmatch(tok)
            if m:
                layers.append(build(m, dropout_rate))
                break
        else:
            raise ConfigError(f"unknown token {tok!r} at position {pos} in {text!r}")
    _validate(layers)
    return NetworkConfig(tuple(layers), T, Ablation(use_synaptic_block, use_learnable_wm),
                         neuron or NeuronParams())


def _validate(layers) -> None:
    for i, layer in enumerate(layers):
        size = getattr(layer, "channels", None) or getattr(layer, "n", None) or getattr(layer, "classes", None)
        if size is not None and size < 1:
            raise ConfigError(f"layer {i} has non-positive size")
        if isinstance(layer, (SynapticConv, Conv)) and (layer.kernel < 1 or layer.kernel % 2 == 0):
            raise ConfigError(f"layer {i}: kernel size must be odd for 'same' padding, got {layer.kernel}")
        if isinstance(layer, AvgPool) and layer.k < 1:
            raise ConfigError(f"layer {i}: pool size must be >= 1")
    votes = [i for i, l in enumerate(layers) if isinstance(l, Voting)]
    if votes != [len(layers) - 1]:
        raise ConfigError("architecture needs exactly one Voting layer, placed last")
    syn = [i for i, l in enumerate(layers) if isinstance(l, SynapticConv)]
    if len(syn) > 1 or (syn and syn[0] != 0):
        raise ConfigError("at most one synaptic convolution block is allowed and it must come first")
    seen_dense = False
    for i, layer in enumerate(layers):
        if isinstance(layer, DensePMLIF):
            seen_dense = True
        elif seen_dense and isinstance(layer, (Conv, SynapticConv, AvgPool)):
            raise ConfigError(f"layer {i}: spatial layer after a dense block")
    dense = [l for l in layers if isinstance(l, DensePMLIF)]
    if dense and dense[-1].n < layers[-1].classes:
        raise ConfigError(
            f"last dense block has {dense[-1].n} neurons, fewer than {layers[-1].classes} classes"
        )


def format_arch(layers) -> str:
    parts = []
    for l in layers:
        if isinstance(l, SynapticConv):
            parts.append(f"{l.channels}SC{l.kernel}")
        elif isinstance(l, Conv):
            parts.append(f"{l.channels}C{l.kernel}")
        elif isinstance(l, AvgPool):
            parts.append(f"AP{l.k}")
        elif isinstance(l, Dropout):
            parts.append("DP")
        elif isinstance(l, DensePMLIF):
            parts.append(f"{l.n}FC")
        else:
            parts.append(f"{l.classes}Voting")
    return "-".join(parts)


def infer_shapes(config: NetworkConfig, input_shape) -> list[tuple[tuple, tuple]]:
    """Per-layer ``(in_shape, out_shape)`` for one sample (no batch axis)."""
    shape = tuple(input_shape)
    if len(shape) != 3:
        raise ShapeError(f"input shape must be (C, H, W), got {shape}")
    out = []
    for i, layer in enumerate(config.layers):
        in_shape = shape
        if isinstance(layer, (SynapticConv, Conv)):
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: convolution needs a spatial input")
            shape = (layer.channels, shape[1], shape[2])
        elif isinstance(layer, AvgPool):
            if shape[1] % layer.k or shape[2] % layer.k:
                raise ConfigError(f"layer {i}: spatial size {shape[1:]} not divisible by pool {layer.k}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
        elif isinstance(layer, DensePMLIF):
            shape = (layer.n,)
        elif isinstance(layer, Voting):
            n = int(np.prod(shape))
            if n < layer.classes:
                raise ConfigError(f"output size {n} is smaller than {layer.classes} classes")
            shape = (n,)
        out.append((in_shape, shape))
    return out


def param_shapes(config: NetworkConfig, input_shape) -> dict[str, tuple]:
    """Parameter names and shapes in declaration order."""
    shapes = {}
    for i, (layer, (in_shape, _)) in enumerate(zip(config.layers, infer_shapes(config, input_shape))):
        if isinstance(layer, (SynapticConv, Conv)):
            shapes[f"{i}.weight"] = (layer.channels, in_shape[0], layer.kernel, layer.kernel)
            shapes[f"{i}.bias"] = (layer.channels,)
        elif isinstance(layer, DensePMLIF):
            shapes[f"{i}.weight"] = (layer.n, int(np.prod(in_shape)))
            shapes[f"{i}.bias"] = (layer.n,)
            shapes[f"{i}.wm"] = (layer.n,)
    return shapes


def output_size(config: NetworkConfig, input_shape) -> int:
    return infer_shapes(config, input_shape)[-1][1][0]


@dataclass
class Model:
    """A configuration bound to an input geometry, parameters and voting groups."""

    config: NetworkConfig
    input_shape: tuple
    params: dict
    group_map: np.ndarray
    seed: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.float64


# --- forward pass ---------------------------------------------------------

@dataclass
class LayerTrace:
    x: np.ndarray | None = None        # layer input (flattened for dense blocks)
    z: np.ndarray | None = None        # convolution output before ReLU / synapse
    decay: np.ndarray | None = None    # synaptic decay factor per sample
    u_prev: np.ndarray | None = None   # membrane state carried in from t-1 (post reset)
    u_pre: np.ndarray | None = None    # membrane before reset at t
    s: np.ndarray | None = None        # spike counts at t


@dataclass
class ForwardTrace:
    steps: list = field(default_factory=list)    # steps[t][layer] -> LayerTrace
    masks: dict = field(default_factory=dict)    # layer index -> dropout mask [B, ...]


def _dropout_masks(config, input_shape, batch, seed, dtype):
    masks = {}
    shapes = infer_shapes(config, input_shape)
    seeds = [seed] * batch if np.ndim(seed) == 0 or seed is None else list(seed)
    if len(seeds) != batch:
        raise ShapeError(f"{len(seeds)} dropout seeds for a batch of {batch}")
    for i, layer in enumerate(config.layers):
        if isinstance(layer, Dropout):
            shape = shapes[i][0]
            if np.ndim(seed) == 0:
                masks[i] = K.dropout_mask((batch,) + shape, layer.rate, (seed, i), dtype)
            else:
                masks[i] = np.stack([K.dropout_mask(shape, layer.rate, (s, i), dtype) for s in seeds])
    return masks


def forward(model: Model, frames, mode: str = "eval", seed=0, keep_trace: bool = True,
            fixed_decay: dict | None = None):
    """Run all ``T`` steps. Returns ``(trace, outputs)``.

    ``frames`` is ``[T, 2, H, W]`` or batched ``[B, T, 2, H, W]``; ``outputs``
    is ``[T, N_out]`` or ``[B, T, N_out]`` accordingly. In train mode,
    ``seed`` is either one integer for the batch or one seed per sample;
    dropout masks are drawn once and reused at every step. The trace always
    keeps the batch axis. ``fixed_decay`` (layer -> ``[T, B]``) replaces the
    adaptive synaptic decay, which gradient checks use to hold it constant.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    config, params = model.config, model.params
    frames = getattr(frames, "data", frames)
    frames = np.asarray(frames, dtype=model.dtype)
    squeeze = frames.ndim == 4
    if squeeze:
        frames = frames[None]
    if frames.ndim != 5 or frames.shape[1] != config.T or tuple(frames.shape[2:]) != tuple(model.input_shape):
        raise ShapeError(
            f"frames {frames.shape} do not match T={config.T} and input shape {tuple(model.input_shape)}"
        )
    B = frames.shape[0]
    nrn = config.neuron
    abl = config.ablation
    shapes = infer_shapes(config, model.input_shape)
    masks = _dropout_masks(config, model.input_shape, B, seed, model.dtype) if mode == "train" else {}
    state = {}
    for i, layer in enumerate(config.layers):
        if isinstance(layer, SynapticConv) and abl.use_synaptic_block:
            state[i] = np.zeros((B,) + shapes[i][1], dtype=model.dtype)
        elif isinstance(layer, DensePMLIF):
            state[i] = np.zeros((B, layer.n), dtype=model.dtype)
    leaks = {i: sigmoid(params[f"{i}.wm"]) for i, l in enumerate(config.layers) if isinstance(l, DensePMLIF)}

    trace = ForwardTrace(masks=masks)
    outputs = []
    for t in range(config.T):
        a = frames[:, t]
        records = []
        for i, layer in enumerate(config.layers):
            rec = LayerTrace()
            try:
                if isinstance(layer, (SynapticConv, Conv)):
                    rec.x = a
                    z = K.conv2d(a, params[f"{i}.weight"], params[f"{i}.bias"], padding=layer.kernel // 2)
                    rec.z = z
                    if isinstance(layer, SynapticConv) and abl.use_synaptic_block:
                        if fixed_decay is not None and i in fixed_decay:
                            rec.decay = np.asarray(fixed_decay[i][t])
                            a = rec.decay.astype(z.dtype)[:, None, None, None] * state[i] + z
                        else:
                            a, rec.decay = synaptic_step(state[i], z)
                        state[i] = a
                    else:
                        a = K.relu(z)
                elif isinstance(layer, AvgPool):
                    a = K.avgpool2d(a, layer.k)
                elif isinstance(layer, Dropout):
                    if mode == "train":
                        a = a * masks[i]
                elif isinstance(layer, DensePMLIF):
                    x = a.reshape(B, -1)
                    rec.x = x
                    current = K.dense(x, params[f"{i}.weight"], params[f"{i}.bias"])
                    rec.u_prev = state[i]
                    s, u_new, u_pre = pmlif_update(state[i], current, leaks[i], nrn.v_th, nrn.s_max)
                    rec.u_pre, rec.s = u_pre, s
                    state[i] = u_new
                    a = s
                else:
                    a = a.reshape(B, -1)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({format_arch([layer])}): {exc}") from None
            records.append(rec)
        outputs.append(a)
        if keep_trace:
            trace.steps.append(records)
    out = np.stack(outputs, axis=1)  # [B, T, N_out]
    return trace, (out[0] if squeeze else out)


# --- voting ---------------------------------------------------------------

def group_bounds(n_out: int, n_class: int) -> list[tuple[int, int]]:
    """Slices of the group map owned by each class.

    When ``n_out`` is not a multiple of ``n_class`` the first
    ``n_out % n_class`` groups hold one extra neuron.
    """
    if n_class < 1 or n_out < n_class:
        raise ConfigError(f"{n_out} output neurons cannot form {n_class} non-empty groups")
    base, extra = divmod(n_out, n_class)
    edges = [0]
    for c in range(n_class):
        edges.append(edges[-1] + base + (c < extra))
    return list(zip(edges[:-1], edges[1:]))


def init_group_map(n_out: int, n_class: int, seed) -> np.ndarray:
    group_bounds(n_out, n_class)
    return np.random.default_rng(seed).permutation(n_out)


def class_scores(counts: np.ndarray, group_map: np.ndarray, n_class: int) -> np.ndarray:
    """Mean count of each class group; accepts ``[N]`` or ``[B, N]``."""
    counts = np.asarray(counts)
    n = counts.shape[-1]
    if len(group_map) != n:
        raise ConfigError(f"group map covers {len(group_map)} neurons, output has {n}")
    ordered = counts[..., group_map]
    scores = np.empty(counts.shape[:-1] + (n_class,), dtype=np.float64)
    for c, (lo, hi) in enumerate(group_bounds(n, n_class)):
        # sorting fixes the summation order, so permuting inside a group is exact
        scores[..., c] = np.sort(ordered[..., lo:hi], axis=-1).sum(axis=-1) / (hi - lo)
    return scores


def voting(spike_counts: np.ndarray, group_map: np.ndarray, n_class: int):
    """Class with the highest group mean; ties resolve to the lowest index."""
    return np.argmax(class_scores(spike_counts, group_map, n_class), axis=-1)


def predict(model: Model, frames) -> np.ndarray:
    _, out = forward(model, frames, mode="eval", keep_trace=False)
    return voting(out.sum(axis=-2), model.group_map, model.config.n_classes)


# --- checkpoints ----------------------------------------------------------

CHECKPOINT_MAGIC = b"STCSNNCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, train_state: dict | None = None) -> None:
    """Versioned header + JSON metadata + raw little-endian arrays.

    ``train_state`` may carry ``epoch``, ``run_seed`` and an ``adam`` entry
    (``step``, hyperparameters, ``m`` and ``v`` dicts keyed like params).
    """
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, train_state))


def checkpoint_bytes(model: Model, train_state: dict | None = None) -> bytes:
    cfg = model.config
    dtype = np.dtype(model.dtype).newbyteorder("<")
    names = list(model.params)
    header = {
        "arch": cfg.arch,
        "T": cfg.T,
        "input_shape": list(model.input_shape),
        "ablation": {"use_synaptic_block": cfg.ablation.use_synaptic_block,
                     "use_learnable_wm": cfg.ablation.use_learnable_wm},
        "dropout_rate": next((l.rate for l in cfg.layers if isinstance(l, Dropout)), 0.5),
        "neuron": {"v_th": cfg.neuron.v_th, "s_max": cfg.neuron.s_max,
                   "alpha_h": cfg.neuron.alpha_h, "alpha_w": cfg.neuron.alpha_w},
        "seed": model.seed,
        "group_map": [int(g) for g in model.group_map],
        "dtype": dtype.str,
        "params": [[n, list(model.params[n].shape)] for n in names],
        "train_state": None,
    }
    arrays = [model.params[n] for n in names]
    if train_state is not None:
        ts = {k: v for k, v in train_state.items() if k != "adam"}
        adam = train_state.get("adam")
        if adam is not None:
            moment_names = list(adam["m"])
            ts["adam"] = {k: v for k, v in adam.items() if k not in ("m", "v")}
            ts["adam"]["names"] = moment_names
            arrays += [adam["m"][n] for n in moment_names] + [adam["v"][n] for n in moment_names]
        header["train_state"] = ts
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(a, dtype=dtype).tobytes() for a in arrays]
    return b"".join(parts)


def load_checkpoint(path) -> tuple[Model, dict | None]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def checkpoint_from_bytes(data: bytes) -> tuple[Model, dict | None]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    dtype = np.dtype(header["dtype"])
    offset = 16 + hlen

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * dtype.itemsize
        if offset + n > len(data):
            raise FormatError("checkpoint truncated")
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += n
        return arr.astype(dtype.newbyteorder("="))

    params = {name: take(tuple(shape)) for name, shape in header["params"]}
    neuron = NeuronParams(**header["neuron"])
    config = parse_arch(header["arch"], header["T"], dropout_rate=header["dropout_rate"], neuron=neuron,
                        **header["ablation"])
    model = Model(config, tuple(header["input_shape"]), params,
                  np.asarray(header["group_map"], dtype=np.int64), header["seed"])
    expected = param_shapes(config, model.input_shape)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise FormatError("checkpoint parameters do not match its architecture")
    ts = header["train_state"]
    if ts is not None and ts.get("adam") is not None:
        adam = ts["adam"]
        names = adam.pop("names")
        adam["m"] = {n: take(params[n].shape) for n in names}
        adam["v"] = {n: take(params[n].shape) for n in names}
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return model, ts
