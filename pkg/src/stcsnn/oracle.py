"""Straight-line reference for the learning rule, written with scalar loops.

Shares no kernels with :mod:`stcsnn.tensor`, :mod:`stcsnn.neuron` or the
production backward pass; only the layer descriptions are reused. Intended for
tiny networks (a few hundred parameters) in 64-bit.

One deliberate difference in formulation: the synaptic convolution gradient
is summed explicitly over the input history with products of decay factors,
whereas production code carries a recursive filtered-input trace.
"""

from __future__ import annotations

import math

from .network import AvgPool, Conv, DensePMLIF, Dropout, SynapticConv, Voting


def _f1(u, v_th, s_max, a_h, a_w):
    total = 0.0
    for i in range(1, s_max + 1):
        total += a_h * math.exp(-((u - i * v_th) ** 2) / a_w)
    return total


def _spikes(u, v_th, s_max):
    if u < v_th:
        return 0
    if u >= s_max * v_th:
        return s_max
    n = math.floor(u / v_th)
    while n * v_th > u:
        n -= 1
    while (n + 1) * v_th <= u:
        n += 1
    return n


def _sig(w):
    if w >= 0:
        return 1.0 / (1.0 + math.exp(-w))
    e = math.exp(w)
    return e / (1.0 + e)


def _tolist(a):
    return a.tolist() if hasattr(a, "tolist") else a


def _zeros(*shape):
    if len(shape) == 1:
        return [0.0] * shape[0]
    return [_zeros(*shape[1:]) for _ in range(shape[0])]


def _flatten(a):
    if isinstance(a, list):
        out = []
        for item in a:
            out.extend(_flatten(item))
        return out
    return [a]


def _unflatten(flat, shape):
    if len(shape) == 1:
        return list(flat)
    step = len(flat) // shape[0]
    return [_unflatten(flat[k * step:(k + 1) * step], shape[1:]) for k in range(shape[0])]


def _conv(x, w, b, k):
    c_out, c_in = len(w), len(x)
    H, W = len(x[0]), len(x[0][0])
    p = k // 2
    out = _zeros(c_out, H, W)
    for co in range(c_out):
        for y in range(H):
            for xx in range(W):
                acc = b[co]
                for ci in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - p, xx + dx - p
                            if 0 <= yy < H and 0 <= xs < W:
                                acc += w[co][ci][dy][dx] * x[ci][yy][xs]
                out[co][y][xx] = acc
    return out


def _conv_weight_grad(g, x, k, gw, scale=1.0):
    c_out, c_in = len(g), len(x)
    H, W = len(x[0]), len(x[0][0])
    p = k // 2
    for co in range(c_out):
        for y in range(H):
            for xx in range(W):
                gv = g[co][y][xx] * scale
                if gv == 0.0:
                    continue
                for ci in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - p, xx + dx - p
                            if 0 <= yy < H and 0 <= xs < W:
                                gw[co][ci][dy][dx] += gv * x[ci][yy][xs]


def _conv_input_grad(g, w, k, c_in, H, W):
    p = k // 2
    gx = _zeros(c_in, H, W)
    for co in range(len(w)):
        for y in range(H):
            for xx in range(W):
                gv = g[co][y][xx]
                if gv == 0.0:
                    continue
                for ci in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            yy, xs = y + dy - p, xx + dx - p
                            if 0 <= yy < H and 0 <= xs < W:
                                gx[ci][yy][xs] += gv * w[co][ci][dy][dx]
    return gx


def _pool(x, k):
    C, H, W = len(x), len(x[0]), len(x[0][0])
    out = _zeros(C, H // k, W // k)
    for c in range(C):
        for y in range(H // k):
            for xx in range(W // k):
                s = 0.0
                for dy in range(k):
                    for dx in range(k):
                        s += x[c][y * k + dy][xx * k + dx]
                out[c][y][xx] = s / (k * k)
    return out


def _pool_grad(g, k):
    C, h, w = len(g), len(g[0]), len(g[0][0])
    out = _zeros(C, h * k, w * k)
    for c in range(C):
        for y in range(h * k):
            for xx in range(w * k):
                out[c][y][xx] = g[c][y // k][xx // k] / (k * k)
    return out


def _shape(a):
    s = []
    while isinstance(a, list):
        s.append(len(a))
        a = a[0] if a else None
    return tuple(s)


def oracle_gradients(model, frames, target, masks=None, learnable_wm=None):
    """Gradients of ``sum_t L[t]`` for ONE sample under the eligibility rule.

    ``frames`` is ``[T, 2, H, W]``, ``target`` the per-step desired output,
    ``masks`` maps dropout layer index to that sample's mask (omit for eval).
    Returns ``(grads, outputs, input_grads)`` where ``input_grads[t]`` is the
    error arriving at the first dense block's input at step ``t`` (or None).
    """
    cfg = model.config
    nrn = cfg.neuron
    v_th, s_max, a_h, a_w = nrn.v_th, nrn.s_max, nrn.alpha_h, nrn.alpha_w
    use_syn = cfg.ablation.use_synaptic_block
    if learnable_wm is None:
        learnable_wm = cfg.ablation.use_learnable_wm
    P = {k: _tolist(v) for k, v in model.params.items()}
    frames = _tolist(frames)
    target = _tolist(target)
    masks = {k: _tolist(v) for k, v in (masks or {}).items()}
    layers = cfg.layers
    T = len(frames)

    grads = {k: _zeros(*_shape(v)) if _shape(v) else 0.0 for k, v in P.items()}
    syn_state = {}
    syn_history = {}   # layer -> list of (input, decay) per step
    mem = {}
    trace_w, trace_b = {}, {}
    outputs = []
    input_grads = []
    first_dense = next((i for i, l in enumerate(layers) if isinstance(l, DensePMLIF)), None)

    for t in range(T):
        act = frames[t]
        rec = []
        for i, layer in enumerate(layers):
            r = {}
            if isinstance(layer, (SynapticConv, Conv)):
                r["x"] = act
                z = _conv(act, P[f"{i}.weight"], P[f"{i}.bias"], layer.kernel)
                r["z"] = z
                if isinstance(layer, SynapticConv) and use_syn:
                    C = len(z)
                    valid = sum(1 for c in range(C) if any(v != 0.0 for row in z[c] for v in row))
                    d = valid / C
                    prev = syn_state.get(i)
                    if prev is None:
                        prev = _zeros(*_shape(z))
                    act = [[[d * prev[c][y][x] + z[c][y][x] for x in range(len(z[0][0]))]
                            for y in range(len(z[0]))] for c in range(C)]
                    syn_state[i] = act
                    syn_history.setdefault(i, []).append((r["x"], d))
                else:
                    act = [[[v if v > 0 else 0.0 for v in row] for row in ch] for ch in z]
            elif isinstance(layer, AvgPool):
                r["in_shape"] = _shape(act)
                act = _pool(act, layer.k)
            elif isinstance(layer, Dropout):
                r["in_shape"] = _shape(act)
                if i in masks:
                    fa, fm = _flatten(act), _flatten(masks[i])
                    act = _unflatten([a * m for a, m in zip(fa, fm)], _shape(act))
            elif isinstance(layer, DensePMLIF):
                r["in_shape"] = _shape(act)
                x = _flatten(act)
                Wt, b, wm = P[f"{i}.weight"], P[f"{i}.bias"], P[f"{i}.wm"]
                u_prev = mem.get(i, [0.0] * layer.n)
                u_pre, s, u_new = [], [], []
                for n in range(layer.n):
                    cur = b[n]
                    for j in range(len(x)):
                        cur += Wt[n][j] * x[j]
                    u = _sig(wm[n]) * u_prev[n] + cur
                    sp = _spikes(u, v_th, s_max)
                    u_pre.append(u)
                    s.append(float(sp))
                    u_new.append(u - sp * v_th)
                mem[i] = u_new
                r.update(x=x, u_pre=u_pre, u_prev=u_prev)
                act = s
            elif isinstance(layer, Voting):
                r["in_shape"] = _shape(act)
                act = _flatten(act)
            rec.append(r)
        out = act
        outputs.append(out)

        # error at the output, then layer by layer downwards
        g = [o - y for o, y in zip(out, target)]
        for i in range(len(layers) - 1, -1, -1):
            layer, r = layers[i], rec[i]
            if isinstance(layer, Voting):
                g = _unflatten(g, r["in_shape"])
            elif isinstance(layer, DensePMLIF):
                n_out, x = layer.n, r["x"]
                Wt, wm = P[f"{i}.weight"], P[f"{i}.wm"]
                ew = trace_w.setdefault(i, _zeros(n_out, len(x)))
                eb = trace_b.setdefault(i, [0.0] * n_out)
                g_flat = _flatten(g)
                delta = []
                for n in range(n_out):
                    f = _f1(r["u_pre"][n], v_th, s_max, a_h, a_w)
                    denom = 1.0 + f * v_th
                    sg = _sig(wm[n])
                    for j in range(len(x)):
                        ew[n][j] = (sg * ew[n][j] + x[j]) / denom
                    eb[n] = (sg * eb[n] + 1.0) / denom
                    em = sg * (1.0 - sg) * r["u_prev"][n] / denom if learnable_wm else 0.0
                    dn = g_flat[n] * f
                    delta.append(dn)
                    for j in range(len(x)):
                        grads[f"{i}.weight"][n][j] += dn * ew[n][j]
                    grads[f"{i}.bias"][n] += dn * eb[n]
                    grads[f"{i}.wm"][n] += dn * em
                gin = [sum(delta[n] * Wt[n][j] for n in range(n_out)) for j in range(len(x))]
                if i == first_dense:
                    input_grads.append(list(gin))
                g = _unflatten(gin, r["in_shape"])
            elif isinstance(layer, Dropout):
                if i in masks:
                    fg, fm = _flatten(g), _flatten(masks[i])
                    g = _unflatten([a * m for a, m in zip(fg, fm)], r["in_shape"])
            elif isinstance(layer, AvgPool):
                g = _pool_grad(g, layer.k)
            elif isinstance(layer, SynapticConv) and use_syn:
                g = _as_shape(g, _shape(r["z"]))
                # dI_syn[t]/dW = sum over tau <= t of prod(decays after tau) * x[tau]
                hist = syn_history[i]
                coef = 1.0
                for tau in range(t, -1, -1):
                    x_tau, d_tau = hist[tau]
                    _conv_weight_grad(g, x_tau, layer.kernel, grads[f"{i}.weight"], coef)
                    for c in range(len(g)):
                        grads[f"{i}.bias"][c] += coef * sum(v for row in g[c] for v in row)
                    coef *= d_tau
            elif isinstance(layer, (Conv, SynapticConv)):
                g = _as_shape(g, _shape(r["z"]))
                gz = [[[gv if zv > 0 else 0.0 for gv, zv in zip(grow, zrow)]
                       for grow, zrow in zip(gc, zc)] for gc, zc in zip(g, r["z"])]
                _conv_weight_grad(gz, r["x"], layer.kernel, grads[f"{i}.weight"])
                for c in range(len(gz)):
                    grads[f"{i}.bias"][c] += sum(v for row in gz[c] for v in row)
                if i > 0:
                    C, H, W = _shape(r["x"])
                    g = _conv_input_grad(gz, P[f"{i}.weight"], layer.kernel, C, H, W)
        if first_dense is None:
            input_grads.append(None)
    return grads, outputs, input_grads


def _as_shape(g, shape):
    if _shape(g) == tuple(shape):
        return g
    return _unflatten(_flatten(g), tuple(shape))
