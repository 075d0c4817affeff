"""Small dense/conv/GRU network kit with hand-written backward passes.

Tensors are plain numpy arrays (row-major batches). float64 is used for
gradient checks, float32 for training loops. Parameters live outside the
specs so the same network description can be instantiated many times.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Input/parameter shape mismatch."""


class NonFiniteGradient(FloatingPointError):
    """Optimizer rejected an update because gradients were not finite."""


# ---------------------------------------------------------------------------
# activations


def _act_forward(name, x):
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise ShapeError(f"unknown activation {name!r}")


def _act_backward(name, y, dy):
    """Gradient through the activation given its output y."""
    if name == "linear":
        return dy
    if name == "relu":
        return dy * (y > 0)
    if name == "tanh":
        return dy * (1.0 - y * y)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    raise ShapeError(f"unknown activation {name!r}")


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    activation: str = "linear"
    gain: float | None = None


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"
    gain: float | None = None


@dataclass(frozen=True)
class GRULayer:
    in_dim: int
    hidden_dim: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    init: str = "orthogonal"

    def __post_init__(self):
        grus = [l for l in self.layers if isinstance(l, GRULayer)]
        if len(grus) > 1:
            raise ShapeError("at most one recurrent layer per spec")

    @property
    def has_gru(self) -> bool:
        return any(isinstance(l, GRULayer) for l in self.layers)

    @property
    def hidden_dim(self) -> int:
        for l in self.layers:
            if isinstance(l, GRULayer):
                return l.hidden_dim
        return 0


_LAYER_TYPES = {"Dense": Dense, "Conv2d": Conv2d, "GRULayer": GRULayer, "Flatten": Flatten}


def spec_to_dict(spec: NetSpec) -> dict:
    return {
        "init": spec.init,
        "layers": [
            {"type": type(l).__name__, **{k: getattr(l, k) for k in l.__dataclass_fields__}}
            for l in spec.layers
        ],
    }


def spec_from_dict(d: dict) -> NetSpec:
    layers = []
    for entry in d["layers"]:
        entry = dict(entry)
        cls = _LAYER_TYPES[entry.pop("type")]
        layers.append(cls(**entry))
    return NetSpec(layers=tuple(layers), init=d["init"])


# ---------------------------------------------------------------------------
# initialization


def orthogonal_init(shape, gain=1.0, rng=None) -> np.ndarray:
    """Seeded orthogonal matrix scaled by gain; shape may be any 2-D pair."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ShapeError(f"degenerate shape {shape}")
    big, small = max(rows, cols), min(rows, cols)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # uniqueness: make R's diagonal positive
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _default_gain(activation):
    return np.sqrt(2.0) if activation == "relu" else 1.0


def _init_matrix(spec_init, shape, gain, rng):
    if spec_init == "orthogonal":
        return orthogonal_init(shape, gain=gain, rng=rng)
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: NetSpec, rng, dtype=np.float32) -> list[dict]:
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    params = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            gain = layer.gain if layer.gain is not None else _default_gain(layer.activation)
            w = _init_matrix(spec.init, (layer.in_dim, layer.out_dim), gain, rng)
            params.append({"w": w.astype(dtype), "b": np.zeros(layer.out_dim, dtype=dtype)})
        elif isinstance(layer, Conv2d):
            gain = layer.gain if layer.gain is not None else _default_gain(layer.activation)
            k = layer.kernel
            w = _init_matrix(spec.init, (k * k * layer.in_ch, layer.out_ch), gain, rng)
            params.append(
                {
                    "w": w.reshape(k, k, layer.in_ch, layer.out_ch).astype(dtype),
                    "b": np.zeros(layer.out_ch, dtype=dtype),
                }
            )
        elif isinstance(layer, GRULayer):
            i, h = layer.in_dim, layer.hidden_dim
            p = {}
            for gate in ("r", "z", "c"):
                p["w" + gate] = _init_matrix(spec.init, (i, h), 1.0, rng).astype(dtype)
                p["u" + gate] = _init_matrix(spec.init, (h, h), 1.0, rng).astype(dtype)
                p["b" + gate] = np.zeros(h, dtype=dtype)
            params.append(p)
        elif isinstance(layer, Flatten):
            params.append({})
        else:
            raise ShapeError(f"unknown layer {layer!r}")
    return params


# ---------------------------------------------------------------------------
# per-layer forward/backward


def _im2col(x, k, stride):
    b, h, w, c = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, oh, ow, k, k, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return windows.reshape(b, oh * ow, k * k * c), oh, ow


def _col2im(dcols, x_shape, k, stride, oh, ow):
    b, h, w, c = x_shape
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    dcols = dcols.reshape(b, oh, ow, k, k, c)
    for ki in range(k):
        for kj in range(k):
            dx[:, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride, :] += dcols[
                :, :, :, ki, kj, :
            ]
    return dx


def _conv_forward(layer, p, x):
    if x.ndim != 4 or x.shape[3] != layer.in_ch:
        raise ShapeError(f"conv expects (B,H,W,{layer.in_ch}), got {x.shape}")
    k = layer.kernel
    cols, oh, ow = _im2col(x, k, layer.stride)
    wf = p["w"].reshape(k * k * layer.in_ch, layer.out_ch)
    y = cols @ wf + p["b"]
    y = _act_forward(layer.activation, y)
    return y.reshape(x.shape[0], oh, ow, layer.out_ch), (x.shape, cols, y, oh, ow)


def _conv_backward(layer, p, cache, dy):
    x_shape, cols, y, oh, ow = cache
    b = x_shape[0]
    k = layer.kernel
    dy = dy.reshape(b, oh * ow, layer.out_ch)
    dz = _act_backward(layer.activation, y, dy)
    wf = p["w"].reshape(k * k * layer.in_ch, layer.out_ch)
    dw = np.tensordot(cols, dz, axes=([0, 1], [0, 1]))
    db = dz.sum(axis=(0, 1))
    dcols = dz @ wf.T
    dx = _col2im(dcols, x_shape, k, layer.stride, oh, ow)
    return {"w": dw.reshape(p["w"].shape), "b": db}, dx


def _dense_forward(layer, p, x):
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"dense expects (B,{layer.in_dim}), got {x.shape}")
    y = _act_forward(layer.activation, x @ p["w"] + p["b"])
    return y, (x, y)


def _dense_backward(layer, p, cache, dy):
    x, y = cache
    dz = _act_backward(layer.activation, y, dy)
    return {"w": x.T @ dz, "b": dz.sum(axis=0)}, dz @ p["w"].T


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _gru_forward(layer, p, x, h):
    if h is None:
        raise ShapeError("recurrent layer needs a hidden state")
    if x.shape[1] != layer.in_dim or h.shape[1] != layer.hidden_dim:
        raise ShapeError(f"gru expects in {layer.in_dim}/hid {layer.hidden_dim}")
    r = _sigmoid(x @ p["wr"] + h @ p["ur"] + p["br"])
    z = _sigmoid(x @ p["wz"] + h @ p["uz"] + p["bz"])
    h_uc = h @ p["uc"]
    c = np.tanh(x @ p["wc"] + r * h_uc + p["bc"])
    h_new = z * h + (1.0 - z) * c
    return h_new, (x, h, r, z, c, h_uc)


def _gru_backward(layer, p, cache, dh_new):
    x, h, r, z, c, h_uc = cache
    dz = dh_new * (h - c)
    dc = dh_new * (1.0 - z)
    dh = dh_new * z
    dac = dc * (1.0 - c * c)
    dr = dac * h_uc
    d_huc = dac * r
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    grads = {
        "wc": x.T @ dac,
        "bc": dac.sum(axis=0),
        "uc": h.T @ d_huc,
        "wr": x.T @ dar,
        "ur": h.T @ dar,
        "br": dar.sum(axis=0),
        "wz": x.T @ daz,
        "uz": h.T @ daz,
        "bz": daz.sum(axis=0),
    }
    dx = dac @ p["wc"].T + dar @ p["wr"].T + daz @ p["wz"].T
    dh += d_huc @ p["uc"].T + dar @ p["ur"].T + daz @ p["uz"].T
    return grads, dx, dh


# ---------------------------------------------------------------------------
# network forward/backward


def forward(spec: NetSpec, params, x, hidden=None):
    """Run the stack; returns (output, new_hidden, cache). `hidden` is
    required iff the spec contains a recurrent layer."""
    if spec.has_gru and hidden is None:
        raise ShapeError("spec has a recurrent layer: pass hidden")
    if not spec.has_gru and hidden is not None:
        raise ShapeError("spec has no recurrent layer: hidden must be None")
    caches = []
    new_hidden = None
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Conv2d):
            x, cache = _conv_forward(layer, p, x)
        elif isinstance(layer, Dense):
            x, cache = _dense_forward(layer, p, x)
        elif isinstance(layer, GRULayer):
            x, cache = _gru_forward(layer, p, x, hidden)
            new_hidden = x
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        caches.append(cache)
    return x, new_hidden, caches


def backward(spec: NetSpec, params, caches, dy, dhidden=None):
    """Analytic gradients for a forward() call.

    dy is the loss gradient at the output; dhidden (optional) is extra
    gradient flowing into the recurrent layer's new hidden state from a
    later timestep. Returns (param grads, dx, dh_prev)."""
    if len(caches) != len(spec.layers):
        raise ShapeError("cache does not match spec")
    grads = [None] * len(spec.layers)
    dh_prev = None
    dx = dy
    for idx in reversed(range(len(spec.layers))):
        layer, p, cache = spec.layers[idx], params[idx], caches[idx]
        if isinstance(layer, Conv2d):
            grads[idx], dx = _conv_backward(layer, p, cache, dx)
        elif isinstance(layer, Dense):
            grads[idx], dx = _dense_backward(layer, p, cache, dx)
        elif isinstance(layer, GRULayer):
            if dhidden is not None:
                dx = dx + dhidden
                dhidden = None
            grads[idx], dx, dh_prev = _gru_backward(layer, p, cache, dx)
        elif isinstance(layer, Flatten):
            grads[idx] = {}
            dx = dx.reshape(cache)
    return grads, dx, dh_prev


def forward_sequence(spec: NetSpec, params, xs, h0, reset_mask=None):
    """Unroll over time: xs is (T, B, ...); h0 is (B, hid).

    reset_mask (T, B) zeroes the carried hidden state before the step where
    it is 1 (episode boundaries). Layers before/after the recurrent layer
    are applied to the whole (T*B) batch at once. Returns
    (ys (T,B,out), h_final, cache)."""
    if not spec.has_gru:
        raise ShapeError("forward_sequence requires a recurrent layer")
    T, B = xs.shape[0], xs.shape[1]
    gru_idx = next(i for i, l in enumerate(spec.layers) if isinstance(l, GRULayer))
    pre = NetSpec(spec.layers[:gru_idx], spec.init)
    post = NetSpec(spec.layers[gru_idx + 1 :], spec.init)
    layer = spec.layers[gru_idx]
    p = params[gru_idx]

    flat = xs.reshape((T * B,) + xs.shape[2:])
    if pre.layers:
        z, _, pre_cache = forward(pre, params[:gru_idx], flat)
    else:
        z, pre_cache = flat, None
    z = z.reshape(T, B, -1)

    h = h0
    hs = np.empty((T, B, layer.hidden_dim), dtype=z.dtype)
    step_caches = []
    keeps = []
    for t in range(T):
        if reset_mask is not None:
            keep = (1.0 - reset_mask[t]).astype(z.dtype)[:, None]
            h = h * keep
            keeps.append(keep)
        else:
            keeps.append(None)
        h, cache = _gru_forward(layer, p, z[t], h)
        hs[t] = h
        step_caches.append(cache)

    flat_h = hs.reshape(T * B, layer.hidden_dim)
    if post.layers:
        ys, _, post_cache = forward(post, params[gru_idx + 1 :], flat_h)
    else:
        ys, post_cache = flat_h, None
    ys = ys.reshape(T, B, -1)
    cache = (pre_cache, step_caches, post_cache, keeps, xs.shape, gru_idx)
    return ys, h, cache


def backward_sequence(spec: NetSpec, params, cache, dys, dh_final=None):
    """Backprop through time for forward_sequence. Returns
    (param grads, dxs, dh0)."""
    pre_cache, step_caches, post_cache, keeps, xs_shape, gru_idx = cache
    T, B = xs_shape[0], xs_shape[1]
    pre = NetSpec(spec.layers[:gru_idx], spec.init)
    post = NetSpec(spec.layers[gru_idx + 1 :], spec.init)
    layer = spec.layers[gru_idx]
    p = params[gru_idx]

    if post.layers:
        out_dim = dys.shape[-1]
        post_grads, dflat_h, _ = backward(
            post, params[gru_idx + 1 :], post_cache, dys.reshape(T * B, out_dim)
        )
        dhs = dflat_h.reshape(T, B, layer.hidden_dim)
    else:
        post_grads = []
        dhs = dys.reshape(T, B, layer.hidden_dim)

    gru_grads = {k: np.zeros_like(v) for k, v in p.items()}
    dz = np.empty((T, B, layer.in_dim), dtype=dys.dtype)
    dh_carry = dh_final if dh_final is not None else np.zeros_like(dhs[0])
    for t in reversed(range(T)):
        step_grads, dz_t, dh_prev = _gru_backward(layer, p, step_caches[t], dhs[t] + dh_carry)
        for k in gru_grads:
            gru_grads[k] += step_grads[k]
        dz[t] = dz_t
        dh_carry = dh_prev if keeps[t] is None else dh_prev * keeps[t]

    if pre.layers:
        pre_grads, dflat, _ = backward(
            pre, params[:gru_idx], pre_cache, dz.reshape(T * B, layer.in_dim)
        )
        dxs = dflat.reshape(xs_shape)
    else:
        pre_grads = []
        dxs = dz.reshape(xs_shape)

    grads = list(pre_grads) + [gru_grads] + list(post_grads)
    return grads, dxs, dh_carry


# ---------------------------------------------------------------------------
# parameter tree helpers


def tree_zeros_like(params):
    return [{k: np.zeros_like(v) for k, v in p.items()} for p in params]


def tree_add(a, b):
    return [{k: pa[k] + pb[k] for k in pa} for pa, pb in zip(a, b)]


def tree_scale(a, s):
    return [{k: v * s for k, v in p.items()} for p in a]


def global_norm(grads) -> float:
    total = 0.0
    for p in grads:
        for v in p.values():
            total += float(np.sum(np.asarray(v, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if norm > max_norm and norm > 0:
        return tree_scale(grads, max_norm / norm), norm
    return grads, norm


# ---------------------------------------------------------------------------
# Adam


def adam_init(params) -> dict:
    return {"m": tree_zeros_like(params), "v": tree_zeros_like(params), "t": 0}


def adam_step(params, grads, state, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; functional (returns new params and state)."""
    for p in grads:
        for k, g in p.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {k!r}")
    t = state["t"] + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        np_, nm, nv = {}, {}, {}
        for k in p:
            nm[k] = beta1 * m[k] + (1.0 - beta1) * g[k]
            nv[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k]
            step = lr * (nm[k] / bc1) / (np.sqrt(nv[k] / bc2) + eps)
            np_[k] = p[k] - step
        new_params.append(np_)
        new_m.append(nm)
        new_v.append(nv)
    return new_params, {"m": new_m, "v": new_v, "t": t}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, networks: dict, meta: dict | None = None) -> None:
    """networks: name -> (NetSpec, params). Bit-exact round trip at the
    stored dtype."""
    arrays = {}
    specs = {}
    for name, (spec, params) in networks.items():
        specs[name] = spec_to_dict(spec)
        for i, p in enumerate(params):
            for k, v in p.items():
                arrays[f"{name}/{i}/{k}"] = v
    header = json.dumps({"specs": specs, "meta": meta or {}})
    arrays["__header__"] = np.frombuffer(header.encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (networks dict name -> (spec, params), meta)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        networks = {}
        for name, spec_d in header["specs"].items():
            spec = spec_from_dict(spec_d)
            params = [{} for _ in spec.layers]
            for key in data.files:
                if key == "__header__" or not key.startswith(name + "/"):
                    continue
                _, idx, pname = key.rsplit("/", 2)
                params[int(idx)][pname] = data[key]
            networks[name] = (spec, params)
    return networks, header["meta"]
