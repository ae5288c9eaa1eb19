"""Minimal recurrent Q-network with exact backprop.

The network maps a detection state (a window of feature vectors plus a
window of prior action bits) to one Q-value per action.  The feature window
runs through a single LSTM layer; the action bits are concatenated onto the
final hidden state and fed through tanh dense layers to a linear output.

Everything is plain numpy.  Parameters live in one flat float64 vector so
that cloning, checkpointing and finite-difference checks are trivial.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_FORMAT = "collabmds-qnet"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Raised when a forward/backward pass produces non-finite values."""


@dataclass(frozen=True)
class NetworkSpec:
    window: int = 8
    n_features: int = 4
    hidden: int = 32
    dense: tuple[int, ...] = (32,)
    n_actions: int = 2

    def __post_init__(self):
        object.__setattr__(self, "dense", tuple(int(v) for v in self.dense))
        if self.n_actions != 2:
            raise ValueError("n_actions must be 2 (genuine / misbehavior)")
        sizes = (self.window, self.n_features, self.hidden, *self.dense)
        if min(sizes) < 1:
            raise ValueError(f"all layer sizes must be >= 1, got {self}")

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return list(_layout(self))

    @property
    def n_params(self) -> int:
        return _n_params(self)

    def _shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        d, h, n = self.n_features, self.hidden, self.window
        shapes = [("lstm_w", (d + h, 4 * h)), ("lstm_b", (4 * h,))]
        fan_in = h + n
        for k, width in enumerate(self.dense):
            shapes.append((f"dense{k}_w", (fan_in, width)))
            shapes.append((f"dense{k}_b", (width,)))
            fan_in = width
        shapes.append(("out_w", (fan_in, self.n_actions)))
        shapes.append(("out_b", (self.n_actions,)))
        return tuple(shapes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense"] = list(self.dense)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(**{**d, "dense": tuple(d.get("dense", (32,)))})


@functools.lru_cache(maxsize=None)
def _layout(spec: NetworkSpec):
    return spec._shapes()


@functools.lru_cache(maxsize=None)
def _n_params(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for _, s in _layout(spec))


@dataclass
class NetworkParams:
    """Flat weight vector plus the spec that gives it structure."""

    spec: NetworkSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ValueError(
                f"expected {self.spec.n_params} parameters, got {self.flat.shape}"
            )

    def clone(self) -> NetworkParams:
        return NetworkParams(self.spec, self.flat.copy())

    def views(self) -> dict[str, np.ndarray]:
        # reshaped slices share memory with ``flat``, so they stay valid
        # across in-place optimizer steps; rebuilt only if ``flat`` is rebound
        cached = self.__dict__.get("_views")
        if cached is None or cached[0] is not self.flat:
            cached = (self.flat, unflatten(self.spec, self.flat))
            self.__dict__["_views"] = cached
        return cached[1]

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator) -> NetworkParams:
        """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
        chunks = []
        fan_in = None
        for name, shape in spec.layout:
            if name.endswith("_w"):
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        return cls(spec, np.concatenate(chunks))

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> NetworkParams:
        return cls(spec, np.zeros(spec.n_params))


def unflatten(spec: NetworkSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    i = 0
    for name, shape in spec.layout:
        size = int(np.prod(shape))
        out[name] = flat[i : i + size].reshape(shape)
        i += size
    return out


@dataclass
class GradientBundle:
    params: np.ndarray
    seq: np.ndarray
    actions: np.ndarray
    loss: float = 0.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(spec, seq, acts):
    seq = np.asarray(seq, dtype=np.float64)
    acts = np.asarray(acts, dtype=np.float64)
    single = seq.ndim == 2
    if single:
        seq = seq[None]
        acts = acts[None]
    n, d = spec.window, spec.n_features
    if seq.ndim != 3 or seq.shape[1:] != (n, d):
        raise ValueError(f"feature window must have shape (..., {n}, {d}), got {seq.shape}")
    if acts.shape != (seq.shape[0], n):
        raise ValueError(f"action window must have shape (..., {n}), got {acts.shape}")
    return seq, acts, single


@dataclass
class _Cache:
    seq: np.ndarray
    acts: np.ndarray
    steps: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    q: np.ndarray | None = None


def _forward(params: NetworkParams, seq, acts, keep_cache):
    spec = params.spec
    p = params.views()
    H, d = spec.hidden, spec.n_features
    B = seq.shape[0]
    W, b = p["lstm_w"], p["lstm_b"]
    Wx, Wh = W[:d], W[d:]
    # input projections for every time step in one product
    zx = seq @ Wx + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = _Cache(seq, acts) if keep_cache else None
    for t in range(spec.window):
        z = zx[:, t] + h @ Wh
        ifo = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        if keep_cache:
            cache.steps.append((h_prev, ifo, g, c_prev, tc))
    a = np.concatenate([h, acts], axis=1)
    for k in range(len(spec.dense)):
        if keep_cache:
            cache.layers.append(a)
        a = np.tanh(a @ p[f"dense{k}_w"] + p[f"dense{k}_b"])
    if keep_cache:
        cache.layers.append(a)
    q = a @ p["out_w"] + p["out_b"]
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite Q-values in forward pass")
    if keep_cache:
        cache.q = q
    return q, cache


def forward(params: NetworkParams, seq, acts) -> np.ndarray:
    """Q-values for one state ``(n, d), (n,)`` or a batch ``(B, n, d), (B, n)``."""
    seq, acts, single = _as_batch(params.spec, seq, acts)
    q, _ = _forward(params, seq, acts, keep_cache=False)
    return q[0] if single else q


def forward_with_cache(params: NetworkParams, seq, acts):
    seq, acts, _ = _as_batch(params.spec, seq, acts)
    return _forward(params, seq, acts, keep_cache=True)


def backprop(params: NetworkParams, cache: _Cache, dq: np.ndarray) -> GradientBundle:
    """Propagate ``dL/dQ`` of shape (B, 2) back to parameters and inputs.

    Parameter gradients are summed over the batch; input gradients stay
    per-sample.
    """
    spec = params.spec
    p = params.views()
    grads = {name: np.zeros(shape) for name, shape in spec.layout}
    H, d = spec.hidden, spec.n_features
    dq = np.asarray(dq, dtype=np.float64)

    a = cache.layers[-1]
    grads["out_w"][...] = a.T @ dq
    grads["out_b"][...] = dq.sum(axis=0)
    da = dq @ p["out_w"].T
    for k in reversed(range(len(spec.dense))):
        a_out = cache.layers[k + 1]
        a_in = cache.layers[k]
        dz = da * (1.0 - a_out * a_out)
        grads[f"dense{k}_w"][...] = a_in.T @ dz
        grads[f"dense{k}_b"][...] = dz.sum(axis=0)
        da = dz @ p[f"dense{k}_w"].T
    dh = da[:, :H]
    d_acts = da[:, H:].copy()

    W = p["lstm_w"]
    Wx, Wh = W[:d], W[d:]
    B, n = cache.seq.shape[0], spec.window
    dz_all = np.empty((B, n, 4 * H))
    h_prev_all = np.empty((B, n, H))
    dc = np.zeros_like(dh)
    for t in reversed(range(n)):
        h_prev, ifo, g, c_prev, tc = cache.steps[t]
        i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :H] = dc * g * i * (1 - i)
        dz[:, H : 2 * H] = dc * c_prev * f * (1 - f)
        dz[:, 2 * H : 3 * H] = do * o * (1 - o)
        dz[:, 3 * H :] = dc * i * (1 - g * g)
        h_prev_all[:, t] = h_prev
        dh = dz @ Wh.T
        dc = dc * f
    dz_flat = dz_all.reshape(B * n, 4 * H)
    grads["lstm_w"][:d] = cache.seq.reshape(B * n, d).T @ dz_flat
    grads["lstm_w"][d:] = h_prev_all.reshape(B * n, H).T @ dz_flat
    grads["lstm_b"][...] = dz_flat.sum(axis=0)
    d_seq = dz_all @ Wx.T

    flat = np.concatenate([grads[name].ravel() for name, _ in spec.layout])
    if not (np.all(np.isfinite(flat)) and np.all(np.isfinite(d_seq))):
        raise NumericError("non-finite gradient")
    return GradientBundle(flat, d_seq, d_acts)


def td_loss_and_grad(params: NetworkParams, seq, acts, actions, targets, q_cache=None):
    """Mean of 1/2 (Q(s,a) - y)^2 over a batch.

    Returns a ``GradientBundle`` whose parameter gradient is that of the
    batch mean, and whose input gradients are per-sample (each sample's own
    loss, unscaled).
    """
    if q_cache is None:
        q, cache = forward_with_cache(params, seq, acts)
    else:
        q, cache = q_cache
    B = q.shape[0]
    actions = np.asarray(actions, dtype=np.intp).reshape(B)
    targets = np.asarray(targets, dtype=np.float64).reshape(B)
    if not np.all(np.isfinite(targets)):
        raise NumericError("non-finite TD target")
    err = q[np.arange(B), actions] - targets
    dq = np.zeros_like(q)
    dq[np.arange(B), actions] = err
    bundle = backprop(params, cache, dq)
    bundle.params /= B
    bundle.loss = float(0.5 * np.mean(err * err))
    return bundle


def backward(params: NetworkParams, seq, acts, action: int, td_target: float) -> GradientBundle:
    """Gradient of 1/2 (Q(s,a) - y)^2 for a single state."""
    seq, acts, _ = _as_batch(params.spec, seq, acts)
    bundle = td_loss_and_grad(params, seq, acts, [action], [td_target])
    bundle.seq = bundle.seq[0]
    bundle.actions = bundle.actions[0]
    return bundle


def forward_many(spec: NetworkSpec, flats: np.ndarray, seq, acts) -> np.ndarray:
    """Evaluate P parameter vectors on the same single state; returns (P, 2).

    Used by the finite-difference checker, where every perturbed parameter
    vector is a separate network.
    """
    flats = np.atleast_2d(flats)
    P = flats.shape[0]
    H = spec.hidden
    seq = np.asarray(seq, dtype=np.float64)
    acts = np.asarray(acts, dtype=np.float64)
    views = {}
    i = 0
    for name, shape in spec.layout:
        size = int(np.prod(shape))
        views[name] = flats[:, i : i + size].reshape((P, *shape))
        i += size
    h = np.zeros((P, H))
    c = np.zeros((P, H))
    for t in range(spec.window):
        xh = np.concatenate([np.broadcast_to(seq[t], (P, spec.n_features)), h], axis=1)
        z = np.einsum("pi,pij->pj", xh, views["lstm_w"]) + views["lstm_b"]
        ifo = _sigmoid(z[:, : 3 * H])
        g = np.tanh(z[:, 3 * H :])
        c = ifo[:, H : 2 * H] * c + ifo[:, :H] * g
        h = ifo[:, 2 * H :] * np.tanh(c)
    a = np.concatenate([h, np.broadcast_to(acts, (P, spec.window))], axis=1)
    for k in range(len(spec.dense)):
        a = np.tanh(np.einsum("pi,pij->pj", a, views[f"dense{k}_w"]) + views[f"dense{k}_b"])
    return np.einsum("pi,pij->pj", a, views["out_w"]) + views["out_b"]


def numeric_gradient(f, x: np.ndarray, step: float) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (evaluated one slot at a time)."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        hi = f(x)
        flat[k] = old - step
        lo = f(x)
        flat[k] = old
        g[k] = (hi - lo) / (2 * step)
    return out


def max_rel_error(analytic, numeric, f_scale=1.0, step=1e-5) -> float:
    """Worst ``|analytic - numeric| / |numeric|`` over all slots.

    The denominator is floored at the rounding noise of a central difference
    (``~eps * |f| / step``, with a safety factor) so slots whose true
    derivative is ~0 do not dominate.
    """
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    floor = 1e5 * np.finfo(float).eps * max(1.0, abs(f_scale)) / step
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(params, seq, acts, action, td_target, step=1e-5, chunk=512, analytic=None):
    """Worst relative error between ``backward`` and central differences.

    Covers every parameter and every input slot (feature window and action
    bits).  ``analytic`` may be supplied to check an externally produced
    gradient bundle instead of ``backward``'s.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    spec = params.spec
    seq = np.asarray(seq, dtype=np.float64)
    acts = np.asarray(acts, dtype=np.float64)
    if analytic is None:
        analytic = backward(params, seq, acts, action, td_target)

    def loss_of(q):
        return 0.5 * (q[..., action] - td_target) ** 2

    f0 = float(loss_of(forward(params, seq, acts)))

    # one perturbed network per parameter slot, evaluated in chunks
    numeric = np.empty(spec.n_params)
    for start in range(0, spec.n_params, chunk):
        idx = np.arange(start, min(start + chunk, spec.n_params))
        plus = np.repeat(params.flat[None], len(idx), axis=0)
        minus = plus.copy()
        plus[np.arange(len(idx)), idx] += step
        minus[np.arange(len(idx)), idx] -= step
        numeric[idx] = (
            loss_of(forward_many(spec, plus, seq, acts))
            - loss_of(forward_many(spec, minus, seq, acts))
        ) / (2 * step)
    worst = max_rel_error(analytic.params, numeric, f0, step)

    # input slots: all perturbed encodings go through one batched forward
    flat_in = np.concatenate([seq.ravel(), acts.ravel()])
    m = flat_in.size
    pert = np.repeat(flat_in[None], 2 * m, axis=0)
    pert[np.arange(m), np.arange(m)] += step
    pert[m + np.arange(m), np.arange(m)] -= step
    nd = seq.size
    losses = loss_of(forward(params, pert[:, :nd].reshape(2 * m, *seq.shape), pert[:, nd:]))
    numeric_in = (losses[:m] - losses[m:]) / (2 * step)
    analytic_in = np.concatenate([analytic.seq.ravel(), analytic.actions.ravel()])
    return max(worst, max_rel_error(analytic_in, numeric_in, f0, step))


def clip_by_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


class SGD:
    def __init__(self, lr=1e-3, clip_norm=5.0):
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self, params: NetworkParams, grad: np.ndarray) -> None:
        params.flat -= self.lr * clip_by_norm(grad, self.clip_norm)

    def state_dict(self):
        return {"kind": "sgd", "lr": self.lr, "clip_norm": self.clip_norm}


class Adam:
    def __init__(self, lr=1e-3, clip_norm=5.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.clip_norm = clip_norm
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: NetworkParams, grad: np.ndarray) -> None:
        grad = clip_by_norm(grad, self.clip_norm)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params.flat -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"kind": "adam", "lr": self.lr, "clip_norm": self.clip_norm, "t": self.t}


def make_optimizer(kind: str, lr: float, clip_norm: float | None):
    if kind == "sgd":
        return SGD(lr, clip_norm)
    if kind == "adam":
        return Adam(lr, clip_norm)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- checkpoints ---------------------------------------------------------


def _format_float(x: float) -> str:
    return format(float(x), ".17g")


def dumps_checkpoint(params: NetworkParams, rng_state: dict | None = None, extra: dict | None = None) -> str:
    """Serialize to versioned JSON with 17-significant-digit weights."""
    if not np.all(np.isfinite(params.flat)):
        raise NumericError("refusing to checkpoint non-finite weights")
    head = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": params.spec.to_dict(),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    body = json.dumps(head, sort_keys=True)
    weights = "[" + ",".join(_format_float(w) for w in params.flat) + "]"
    return body[:-1] + ', "weights": ' + weights + "}"


def loads_checkpoint(text: str) -> tuple[NetworkParams, dict | None, dict]:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a Q-network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    spec = NetworkSpec.from_dict(doc["spec"])
    params = NetworkParams(spec, np.array(doc["weights"], dtype=np.float64))
    return params, doc.get("rng_state"), doc.get("extra", {})
