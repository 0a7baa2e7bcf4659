"""Small numpy networks with hand-written backward passes.

Every layer works on arrays with arbitrary leading batch axes. ``forward``
returns ``(output, cache)``; ``backward(grad_output, cache)`` accumulates
parameter gradients into the owning :class:`ParamStore` and returns the
gradient with respect to the layer input(s).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 tensors with same-shaped gradient accumulators."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> str:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=float)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return name

    def add_uniform(self, name: str, shape: Tuple[int, ...], fan_in: int, rng) -> str:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k, v in self.params.items():
            other.add(k, v.copy())
        return other

    def load_from(self, other: "ParamStore") -> None:
        """Copy values in place from a store with identical names and shapes."""
        if set(other.params) != set(self.params):
            raise KeyError("parameter name sets differ")
        for k, v in other.params.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k][...] = v

    def equals(self, other: "ParamStore") -> bool:
        return set(other.params) == set(self.params) and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values in parameter {k!r}")

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grads[k].ravel() for k in self.params]) if self.params else np.zeros(0)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "linear":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if name == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    if name == "linear":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0).astype(float)
    if name == "tanh":
        return 1.0 - out * out
    if name == "elu":
        return np.where(pre > 0, 1.0, out + 1.0)
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def affine(x: np.ndarray, M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ M.T + b`` whose rows do not depend on the batch they sit in.

    BLAS picks different kernels for different batch shapes, so the same input
    row can round differently. A stack of row-vector products runs the same
    kernel for every row and gives bitwise-identical results, which recurrent
    replay relies on.
    """
    return (x[..., None, :] @ M.T)[..., 0, :] + b


def _check_width(x: np.ndarray, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise ValueError(f"{what}: expected last dimension {n}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# layers


class Dense:
    """``y = act(x @ M.T + b)`` with ``M`` shaped ``(n_out, n_in)``."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 activation: str = "linear", rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store, self.n_in, self.n_out, self.activation = store, n_in, n_out, activation
        self.w = store.add_uniform(f"{name}.w", (n_out, n_in), n_in, rng)
        self.b = store.add_uniform(f"{name}.b", (n_out,), n_in, rng)

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        _check_width(x, self.n_in, "dense input")
        pre = affine(x, self.store[self.w], self.store[self.b])
        out = _act(self.activation, pre)
        return out, (x, pre, out)

    def backward(self, dy, cache):
        x, pre, out = cache
        dpre = dy * _act_grad(self.activation, pre, out)
        x2 = x.reshape(-1, self.n_in)
        d2 = dpre.reshape(-1, self.n_out)
        self.store.accumulate(self.w, d2.T @ x2)
        self.store.accumulate(self.b, d2.sum(axis=0))
        return dpre @ self.store[self.w]


def dense_forward(x, M, b, activation: str = "linear"):
    """Stateless dense layer: ``act(M @ x + b)``."""
    x = np.asarray(x, dtype=float)
    M = np.asarray(M, dtype=float)
    _check_width(x, M.shape[1], "dense input")
    pre = x @ M.T + b
    return _act(activation, pre)


def dense_backward(dy, x, M, b, activation: str = "linear"):
    """Gradients ``(dx, dM, db)`` of the stateless dense layer."""
    x = np.asarray(x, dtype=float)
    M = np.asarray(M, dtype=float)
    pre = x @ M.T + b
    out = _act(activation, pre)
    dpre = dy * _act_grad(activation, pre, out)
    x2 = x.reshape(-1, M.shape[1])
    d2 = dpre.reshape(-1, M.shape[0])
    return dpre @ M, d2.T @ x2, d2.sum(axis=0)


class GRUCell:
    """Gated recurrent unit (reset gate applied to the recurrent candidate term).

    r = sig(Wx_r x + bx_r + Wh_r h + bh_r)
    z = sig(Wx_z x + bx_z + Wh_z h + bh_z)
    n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
    h' = (1 - z) * n + z * h
    """

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store, self.n_in, self.n_hidden = store, n_in, n_hidden
        H = n_hidden
        self.wx = store.add_uniform(f"{name}.wx", (3 * H, n_in), n_in, rng)
        self.wh = store.add_uniform(f"{name}.wh", (3 * H, H), H, rng)
        self.bx = store.add_uniform(f"{name}.bx", (3 * H,), n_in, rng)
        self.bh = store.add_uniform(f"{name}.bh", (3 * H,), H, rng)

    def forward(self, x, h):
        x = np.asarray(x, dtype=float)
        h = np.asarray(h, dtype=float)
        _check_width(x, self.n_in, "gru input")
        _check_width(h, self.n_hidden, "gru hidden")
        H = self.n_hidden
        gx = affine(x, self.store[self.wx], self.store[self.bx])
        gh = affine(h, self.store[self.wh], self.store[self.bh])
        r = sigmoid(gx[..., :H] + gh[..., :H])
        z = sigmoid(gx[..., H:2 * H] + gh[..., H:2 * H])
        hn = gh[..., 2 * H:]
        n = np.tanh(gx[..., 2 * H:] + r * hn)
        h_new = (1.0 - z) * n + z * h
        return h_new, (x, h, r, z, n, hn)

    def backward(self, dh_new, cache):
        """Returns ``(dx, dh)``."""
        x, h, r, z, n, hn = cache
        H = self.n_hidden
        dn = dh_new * (1.0 - z)
        dz = dh_new * (h - n)
        dh = dh_new * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hn
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dgx = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
        x2 = x.reshape(-1, self.n_in)
        h2 = h.reshape(-1, H)
        gx2 = dgx.reshape(-1, 3 * H)
        gh2 = dgh.reshape(-1, 3 * H)
        self.store.accumulate(self.wx, gx2.T @ x2)
        self.store.accumulate(self.bx, gx2.sum(axis=0))
        self.store.accumulate(self.wh, gh2.T @ h2)
        self.store.accumulate(self.bh, gh2.sum(axis=0))
        dx = dgx @ self.store[self.wx]
        dh = dh + dgh @ self.store[self.wh]
        return dx, dh


def gru_step(x, h, params: ParamStore, name: str = "gru"):
    """Stateless GRU update using tensors ``{name}.wx/.wh/.bx/.bh`` of ``params``."""
    cell = GRUCell.__new__(GRUCell)
    cell.store = params
    cell.wx, cell.wh, cell.bx, cell.bh = (f"{name}.{s}" for s in ("wx", "wh", "bx", "bh"))
    cell.n_hidden = params[cell.wh].shape[1]
    cell.n_in = params[cell.wx].shape[1]
    return cell.forward(x, h)[0]


def attention_coefficients(H, proj) -> np.ndarray:
    """Scaled dot-product coefficients over the other agents.

    ``a[i, j] = softmax_{j != i}((h_i P) . (h_j P) / sqrt(latent))``;
    the diagonal is zero and each row sums to one. ``H`` may carry leading
    batch axes.
    """
    H = np.asarray(H, dtype=float)
    proj = np.asarray(proj, dtype=float)
    d = H.shape[-2]
    if d < 2:
        raise ValueError("attention needs at least two agents")
    _check_width(H, proj.shape[0], "attention features")
    Q = H @ proj
    S = Q @ np.swapaxes(Q, -1, -2) / np.sqrt(proj.shape[1])
    S = np.where(np.eye(d, dtype=bool), -np.inf, S)
    return softmax(S, axis=-1)


def multi_head_aggregate(H, coeffs, weights, activation: str = "elu") -> np.ndarray:
    """``act(mean_m sum_{j != i} a_m[i, j] * (h_j @ V_m))``.

    ``coeffs`` is ``(..., M, d, d)`` and ``weights`` is ``(M, n_in, n_out)``.
    """
    H = np.asarray(H, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 3 or coeffs.shape[-3] != weights.shape[0]:
        raise ValueError("coefficient and weight head counts differ")
    _check_width(H, weights.shape[1], "aggregation features")
    Z = np.einsum("...di,mio->...mdo", H, weights)
    agg = (coeffs @ Z).mean(axis=-3)
    return _act(activation, agg)


def _per_head(H, W):
    """``H (..., d, i)`` times per-head ``W (m, i, o)`` -> ``(..., m, d, o)``."""
    m, i, o = W.shape
    Y = H @ W.transpose(1, 0, 2).reshape(i, m * o)
    return np.moveaxis(Y.reshape(H.shape[:-1] + (m, o)), -2, -3)


class GATLayer:
    """Multi-head attention layer over agents (self excluded), ELU output."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 heads: int = 8, attn_dim: int = 16, rng=None):
        if heads < 1:
            raise ValueError("need at least one attention head")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store, self.n_in, self.n_out, self.heads, self.attn_dim = store, n_in, n_out, heads, attn_dim
        self.proj = store.add_uniform(f"{name}.proj", (heads, n_in, attn_dim), n_in, rng)
        self.value = store.add_uniform(f"{name}.value", (heads, n_in, n_out), n_in, rng)

    def forward(self, H):
        H = np.asarray(H, dtype=float)
        _check_width(H, self.n_in, "gat input")
        d = H.shape[-2]
        if d < 2:
            raise ValueError("attention needs at least two agents")
        Q = _per_head(H, self.store[self.proj])
        S = Q @ np.swapaxes(Q, -1, -2) / np.sqrt(self.attn_dim)
        S = np.where(np.eye(d, dtype=bool), -np.inf, S)
        a = softmax(S, axis=-1)
        Z = _per_head(H, self.store[self.value])
        agg = (a @ Z).mean(axis=-3)
        out = _act("elu", agg)
        return out, (H, Q, a, Z, agg, out)

    def backward(self, dy, cache):
        H, Q, a, Z, agg, out = cache
        M = self.heads
        P, V = self.store[self.proj], self.store[self.value]
        dagg = dy * _act_grad("elu", agg, out)
        dAZ = dagg[..., None, :, :] / M  # shared by every head
        da = dAZ @ np.swapaxes(Z, -1, -2)
        dZ = np.swapaxes(a, -1, -2) @ dAZ
        dS = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        dQ = (dS + np.swapaxes(dS, -1, -2)) @ Q / np.sqrt(self.attn_dim)
        dH = np.zeros_like(H)
        for name, W, dY in ((self.proj, P, dQ), (self.value, V, dZ)):
            m, i, o = W.shape
            # (..., m, d, o) -> rows (..., d) by columns (m, o)
            dY2 = np.moveaxis(dY, -3, -2).reshape(-1, m * o)
            gW = H.reshape(-1, i).T @ dY2
            self.store.accumulate(name, gW.reshape(i, m, o).transpose(1, 0, 2))
            dH += (dY2 @ W.transpose(1, 0, 2).reshape(i, m * o).T).reshape(H.shape)
        return dH


def pairwise_decoder_score(h_l, h_r, W_l, W_r, u) -> float:
    """``sigmoid(u . tanh(W_l h_l + W_r h_r))``."""
    h_l, h_r = np.asarray(h_l, float), np.asarray(h_r, float)
    W_l, W_r, u = np.asarray(W_l, float), np.asarray(W_r, float), np.asarray(u, float)
    if W_l.shape[1] != h_l.shape[-1] or W_r.shape[1] != h_r.shape[-1] or W_l.shape[0] != u.shape[0]:
        raise ValueError("decoder shape mismatch")
    return sigmoid(np.tanh(W_l @ h_l + W_r @ h_r) @ u)


class PairDecoder:
    """Edge logits ``logit[i, j] = u . tanh(W_l h_l[i] + W_r h_r[j])``."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_hidden: int, rng=None,
                 zero_output: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store, self.n_in, self.n_hidden = store, n_in, n_hidden
        self.wl = store.add_uniform(f"{name}.wl", (n_hidden, n_in), n_in, rng)
        self.wr = store.add_uniform(f"{name}.wr", (n_hidden, n_in), n_in, rng)
        self.u = store.add_uniform(f"{name}.u", (n_hidden,), n_hidden, rng)
        if zero_output:
            store.params[self.u][...] = 0.0

    def forward(self, hl, hr):
        _check_width(hl, self.n_in, "decoder left input")
        _check_width(hr, self.n_in, "decoder right input")
        zl = hl @ self.store[self.wl].T
        zr = hr @ self.store[self.wr].T
        t = np.tanh(zl[..., :, None, :] + zr[..., None, :, :])
        logits = t @ self.store[self.u]
        return logits, (hl, hr, t)

    def backward(self, dlogits, cache):
        """Returns ``(dhl, dhr)``."""
        hl, hr, t = cache
        self.store.accumulate(self.u, dlogits.reshape(-1) @ t.reshape(-1, self.n_hidden))
        dpre = dlogits[..., None] * self.store[self.u] * (1.0 - t * t)
        dzl = dpre.sum(axis=-2)
        dzr = dpre.sum(axis=-3)
        self.store.accumulate(self.wl, dzl.reshape(-1, self.n_hidden).T @ hl.reshape(-1, self.n_in))
        self.store.accumulate(self.wr, dzr.reshape(-1, self.n_hidden).T @ hr.reshape(-1, self.n_in))
        return dzl @ self.store[self.wl], dzr @ self.store[self.wr]


class MLP:
    """Stack of :class:`Dense` layers; hidden layers share one activation."""

    def __init__(self, store: ParamStore, name: str, sizes: Iterable[int],
                 activation: str = "relu", out_activation: str = "linear", rng=None):
        sizes = list(sizes)
        self.layers = []
        for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_activation if n == len(sizes) - 2 else activation
            self.layers.append(Dense(store, f"{name}.{n}", a, b, act, rng))

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, caches):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(dy, c)
        return dy


# ---------------------------------------------------------------------------
# distributions


class CategoricalDist:
    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probabilities must be a nonempty vector")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        self.probs = probs

    def __len__(self) -> int:
        return self.probs.size

    def sample(self, rng: np.random.Generator) -> int:
        return categorical_sample(self.probs, rng)

    def log_prob(self, a: int) -> float:
        p = self.probs[a]
        if p <= 0:
            raise ValueError(f"action {a} has zero probability")
        return float(np.log(p))


def categorical_sample(probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from one probability vector."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class RMSProp:
    learning_rate: float = 5e-4
    alpha: float = 0.99
    eps: float = 1e-8
    square_avg: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, store: ParamStore, names: Optional[Iterable[str]] = None) -> None:
        """Apply one update to ``names`` (default all) and zero their grads."""
        names = list(store.params) if names is None else list(names)
        for k in names:
            if not np.all(np.isfinite(store.grads[k])):
                raise FloatingPointError(f"non-finite gradient for {k!r}")
        for k in names:
            g = store.grads[k]
            v = self.square_avg.get(k)
            if v is None:
                v = self.square_avg[k] = np.zeros_like(g)
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            store.params[k] -= self.learning_rate * g / (np.sqrt(v) + self.eps)
            g.fill(0.0)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in store.grads.values())))
    if norm > max_norm > 0:
        for g in store.grads.values():
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# checkpoint tensors

MAGIC = b"ACGM"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def write_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write ``magic, version, {name_len, name, rank, dims, f32 data}*`` little-endian."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_tensors(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    if len(data) < 8:
        raise CheckpointFormatError("truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointFormatError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(float)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated record: {exc}") from None
    return out
