"""NeuralEQ: a feed-forward network wired like the forward-backward trellis.

Stage ``s`` consumes input sample ``x[s]``.  Stages ``0..D-1`` form the forward
chain (run left to right from the learned vector ``a0``), stages ``D..T-1`` the
backward chain (run right to left from ``b0``).  Each stage is

    M      = tanh(wp * x + bp) * u
    hidden = tanh(W1 @ state + M * v + c1)
    state  = tanh(W2 @ hidden + c2)

and the head maps ``[a; b]`` through ``tanh(Wg1 @ . + cg1)`` and a linear layer
to softmax class probabilities.  All stage tensors are stacked along a leading
stage axis ordered by input position, i.e. left to right.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_model import Modulation, ObservedStream, SymbolStream, _samples, make_rng, window_matrix

STAGE_KEYS = ("wp", "bp", "u", "W1", "v", "c1", "W2", "c2")
HEAD_KEYS = ("Wg1", "cg1", "Wg2", "cg2")
# tensors exempt from pruning: biases, init vectors, perceptron scalars
PRUNABLE = ("W1", "v", "W2", "Wg1", "Wg2")


@dataclass(frozen=True)
class NeuralEqConfig:
    T: int = 12
    D: int = 4
    N: int = 32
    mod_order: int = 4

    def __post_init__(self):
        if not 1 <= self.D <= self.T:
            raise ValueError(f"need 1 <= D <= T (D={self.D}, T={self.T})")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.mod_order not in (2, 4):
            raise ValueError("mod_order must be 2 or 4")


@dataclass(frozen=True)
class MlpBaselineConfig:
    hidden: tuple = (216, 376)
    T: int = 12
    mod_order: int = 4
    D: int = 4  # decoded position inside the window, same convention as NeuralEQ

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) != 2 or min(self.hidden) < 1:
            raise ValueError("need two hidden sizes >= 1")
        if not 1 <= self.D <= self.T:
            raise ValueError("need 1 <= D <= T")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class _Model:
    """Parameter/mask bookkeeping shared by NeuralEQ and the MLP baseline."""

    prunable: tuple = ()
    params: dict
    mask: dict

    def _init_mask(self):
        self.mask = {k: np.ones(v.shape, dtype=bool) for k, v in self.params.items()}

    def apply_mask(self):
        for k in self.prunable:
            self.params[k] *= self.mask[k]

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def n_active(self) -> int:
        return sum(int(m.sum()) for m in self.mask.values())

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        new.mask = {k: v.copy() for k, v in self.mask.items()}
        return new

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[0]

    def loss_and_grads(self, X: np.ndarray, labels: np.ndarray):
        probs, cache = self.forward(X)
        B = len(labels)
        picked = probs[np.arange(B), labels]
        loss = float(np.mean(-np.log(np.maximum(picked, 1e-30))))
        dlogits = probs.copy()
        dlogits[np.arange(B), labels] -= 1.0
        dlogits /= B
        grads = self.backward(cache, dlogits)
        for k in self.prunable:
            grads[k] *= self.mask[k]
        return loss, grads


class NeuralEqParams(_Model):
    prunable = PRUNABLE

    def __init__(self, cfg: NeuralEqConfig, params: dict, mask: dict | None = None):
        self.cfg = cfg
        self.params = params
        if mask is None:
            self._init_mask()
        else:
            self.mask = mask

    @property
    def T(self):
        return self.cfg.T

    @property
    def D(self):
        return self.cfg.D

    def _stage(self, s, x, state):
        p = self.params
        tm = np.tanh(p["wp"][s] * x + p["bp"][s])
        M = tm * p["u"][s]
        h1 = np.multiply.outer(M, p["v"][s])
        # the chain's first stage sees the shared initial vector (1-D)
        h1 += state @ p["W1"][s].T
        h1 += p["c1"][s]
        np.tanh(h1, out=h1)
        out = h1 @ p["W2"][s].T
        out += p["c2"][s]
        np.tanh(out, out=out)
        return out, (x, state, tm, M, h1, out)

    def forward(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.T:
            raise ValueError(f"window length {X.shape[1]} != T={self.T}")
        p = self.params
        caches = [None] * self.T
        a = p["a0"]
        for s in range(self.D):
            a, caches[s] = self._stage(s, X[:, s], a)
        b = p["b0"]
        for s in range(self.T - 1, self.D - 1, -1):
            b, caches[s] = self._stage(s, X[:, s], b)
        # an empty chain leaves its 1-D initial vector
        B = len(X)
        hc = np.concatenate([np.broadcast_to(a, (B, len(a.T))), np.broadcast_to(b, (B, len(b.T)))],
                            axis=1)
        g = np.tanh(hc @ p["Wg1"].T + p["cg1"])
        probs = _softmax(g @ p["Wg2"].T + p["cg2"])
        return probs, (caches, hc, g)

    def _stage_back(self, s, cache, dout, grads):
        p = self.params
        x, state, tm, M, h1, out = cache
        dz2 = np.square(out)
        np.subtract(1.0, dz2, out=dz2)
        dz2 *= dout
        grads["W2"][s] = dz2.T @ h1
        grads["c2"][s] = dz2.sum(0)
        dz1 = dz2 @ p["W2"][s]
        d = np.square(h1, out=dz2)
        np.subtract(1.0, d, out=d)
        dz1 *= d
        grads["c1"][s] = dz1.sum(0)
        if state.ndim == 1:
            grads["W1"][s] = np.outer(grads["c1"][s], state)
        else:
            grads["W1"][s] = dz1.T @ state
        grads["v"][s] = M @ dz1
        dM = dz1 @ p["v"][s]
        grads["u"][s] = np.dot(dM, tm)
        dmp = dM * p["u"][s] * (1.0 - tm * tm)
        grads["wp"][s] = np.dot(dmp, x)
        grads["bp"][s] = dmp.sum()
        return dz1 @ p["W1"][s]

    def backward(self, cache, dlogits: np.ndarray) -> dict:
        caches, hc, g = cache
        p = self.params
        N = self.cfg.N
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["Wg2"] = dlogits.T @ g
        grads["cg2"] = dlogits.sum(0)
        dzg = (dlogits @ p["Wg2"]) * (1.0 - g * g)
        grads["Wg1"] = dzg.T @ hc
        grads["cg1"] = dzg.sum(0)
        dh = dzg @ p["Wg1"]
        da, db = dh[:, :N], dh[:, N:]
        for s in range(self.D - 1, -1, -1):
            da = self._stage_back(s, caches[s], da, grads)
        grads["a0"] = da.sum(0)
        for s in range(self.D, self.T):
            db = self._stage_back(s, caches[s], db, grads)
        grads["b0"] = db.sum(0)
        return grads

    def prune_groups(self):
        """(label, [(tensor key, index or None)]) per layer, left to right."""
        groups = []
        for s in range(self.T):
            label = f"fwd{s + 1}" if s < self.D else f"bwd{s + 1}"
            groups.append((label, [(k, s) for k in ("W1", "v", "W2")]))
        groups.append(("head", [("Wg1", None), ("Wg2", None)]))
        return groups


def init_params(cfg: NeuralEqConfig, seed: int) -> NeuralEqParams:
    rng = make_rng(seed, "init")
    T, N, M = cfg.T, cfg.N, cfg.mod_order
    p = {
        "wp": _glorot(rng, (T,), 1, 1),
        "bp": np.zeros(T),
        "u": _glorot(rng, (T,), 1, 1),
        "W1": _glorot(rng, (T, N, N), N, N),
        "v": _glorot(rng, (T, N), 1, N),
        "c1": np.zeros((T, N)),
        "W2": _glorot(rng, (T, N, N), N, N),
        "c2": np.zeros((T, N)),
        "a0": np.zeros(N),
        "b0": np.zeros(N),
        "Wg1": _glorot(rng, (N, 2 * N), 2 * N, N),
        "cg1": np.zeros(N),
        "Wg2": _glorot(rng, (M, N), N, M),
        "cg2": np.zeros(M),
    }
    return NeuralEqParams(cfg, p)


def forward_infer(p: NeuralEqParams, window) -> np.ndarray:
    w = np.asarray(window, dtype=float)
    if w.ndim != 1 or len(w) != p.T:
        raise ValueError(f"expected a window of {p.T} samples")
    return p.predict_proba(w[None, :])[0]


def _decide_windows(model, wins: np.ndarray, chunk: int = 65536) -> np.ndarray:
    out = np.empty(len(wins), dtype=np.int64)
    for i in range(0, len(wins), chunk):
        out[i: i + chunk] = np.argmax(model.predict_proba(wins[i: i + chunk]), axis=1)
    return out


def predict_windows(model, x, T: int, D: int, pre: int, mod: Modulation):
    """Decisions for every symbol of the stream plus a mask of window-decided ones.

    Symbols without a full window get a plain slicer decision on their main
    cursor sample and are marked invalid.
    """
    xs = _samples(x)
    n = len(xs)
    if n < T:
        raise ValueError(f"stream of {n} samples shorter than window T={T}")
    off = D - 1 - pre
    dec = mod.slice(np.concatenate([xs[pre:], np.zeros(pre)]))
    valid = np.zeros(n, dtype=bool)
    wins = window_matrix(xs, T)
    k = np.arange(len(wins))
    j = k + off
    ok = (j >= 0) & (j < n)
    dec[j[ok]] = _decide_windows(model, wins[ok])
    valid[j[ok]] = True
    return dec, valid


def predict_stream(p, cfg: NeuralEqConfig, x, pre: int, mod: Modulation | None = None) -> SymbolStream:
    mod = mod or Modulation(cfg.mod_order)
    dec, _ = predict_windows(p, x, cfg.T, cfg.D, pre, mod)
    return SymbolStream(dec)


def param_count(cfg: NeuralEqConfig) -> int:
    T, N, M = cfg.T, cfg.N, cfg.mod_order
    return T * (2 * N * N + 3 * N + 3) + 2 * N + (2 * N * N + N) + (M * N + M)


def op_count(cfg_or_n) -> dict:
    """Per two-layer stage: multiplies, adds and tanh evaluations.

    The two perceptron multiplies are reported separately.
    """
    N = cfg_or_n.N if isinstance(cfg_or_n, NeuralEqConfig) else int(cfg_or_n)
    return {
        "multiplies": 2 * N * N + N,
        "adds": 2 * N * N + N,
        "tanhs": 3 * N,
        "perceptron_multiplies": 2,
    }


# -- MLP baseline ----------------------------------------------------------

class MlpParams(_Model):
    prunable = ("W1", "W2", "W3")

    def __init__(self, cfg: MlpBaselineConfig, params: dict, mask: dict | None = None):
        self.cfg = cfg
        self.params = params
        if mask is None:
            self._init_mask()
        else:
            self.mask = mask

    @property
    def T(self):
        return self.cfg.T

    def forward(self, X: np.ndarray):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.cfg.T:
            raise ValueError(f"input length {X.shape[1]} != {self.cfg.T}")
        p = self.params
        h1 = np.tanh(X @ p["W1"].T + p["c1"])
        h2 = np.tanh(h1 @ p["W2"].T + p["c2"])
        probs = _softmax(h2 @ p["W3"].T + p["c3"])
        return probs, (X, h1, h2)

    def backward(self, cache, dlogits):
        X, h1, h2 = cache
        p = self.params
        g = {"W3": dlogits.T @ h2, "c3": dlogits.sum(0)}
        d2 = (dlogits @ p["W3"]) * (1 - h2 * h2)
        g["W2"] = d2.T @ h1
        g["c2"] = d2.sum(0)
        d1 = (d2 @ p["W2"]) * (1 - h1 * h1)
        g["W1"] = d1.T @ X
        g["c1"] = d1.sum(0)
        return g


def init_mlp(cfg: MlpBaselineConfig, seed: int) -> MlpParams:
    rng = make_rng(seed, "init-mlp")
    h1, h2 = cfg.hidden
    p = {
        "W1": _glorot(rng, (h1, cfg.T), cfg.T, h1), "c1": np.zeros(h1),
        "W2": _glorot(rng, (h2, h1), h1, h2), "c2": np.zeros(h2),
        "W3": _glorot(rng, (cfg.mod_order, h2), h2, cfg.mod_order),
        "c3": np.zeros(cfg.mod_order),
    }
    return MlpParams(cfg, p)


def mlp_param_count(cfg: MlpBaselineConfig) -> int:
    h1, h2 = cfg.hidden
    return cfg.T * h1 + h1 + h1 * h2 + h2 + h2 * cfg.mod_order + cfg.mod_order


def mlp_forward(cfg: MlpBaselineConfig, params, window) -> np.ndarray:
    model = params if isinstance(params, MlpParams) else MlpParams(cfg, params)
    w = np.asarray(window, dtype=float)
    if w.ndim != 1 or len(w) != cfg.T:
        raise ValueError(f"expected a window of {cfg.T} samples")
    return model.predict_proba(w[None, :])[0]


# -- checkpoint file -------------------------------------------------------

MAGIC = b"NEQ1"
VERSION = 1


def _tensor_order(cfg: NeuralEqConfig):
    stages = list(range(cfg.D)) + list(range(cfg.T - 1, cfg.D - 1, -1))
    for s in stages:
        for k in STAGE_KEYS:
            yield k, s
    yield "a0", None
    yield "b0", None
    for k in HEAD_KEYS:
        yield k, None


def _tensor_shape(cfg: NeuralEqConfig, key: str):
    N, M = cfg.N, cfg.mod_order
    return {"wp": (), "bp": (), "u": (), "W1": (N, N), "v": (N,), "c1": (N,),
            "W2": (N, N), "c2": (N,), "a0": (N,), "b0": (N,), "Wg1": (N, 2 * N),
            "cg1": (N,), "Wg2": (M, N), "cg2": (M,)}[key]


def checkpoint_bytes(p: NeuralEqParams) -> bytes:
    cfg = p.cfg
    head = MAGIC + struct.pack("<5I", VERSION, cfg.T, cfg.D, cfg.N, cfg.mod_order)
    vals, bits = [], []
    for k, s in _tensor_order(cfg):
        t = p.params[k] if s is None else p.params[k][s]
        m = p.mask[k] if s is None else p.mask[k][s]
        vals.append(np.asarray(t, dtype="<f8").ravel())
        bits.append(np.asarray(m, dtype=bool).ravel())
    body = np.concatenate(vals).tobytes()
    packed = np.packbits(np.concatenate(bits), bitorder="little").tobytes()
    return head + body + packed


def checkpoint_from_bytes(data: bytes) -> NeuralEqParams:
    if data[:4] != MAGIC:
        raise ValueError("not a NEQ1 checkpoint")
    version, T, D, N, M = struct.unpack_from("<5I", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = NeuralEqConfig(T, D, N, M)
    order = list(_tensor_order(cfg))
    sizes = [int(np.prod(_tensor_shape(cfg, k))) for k, _ in order]
    total = sum(sizes)
    offset = 4 + 20
    need = offset + 8 * total + (total + 7) // 8
    if len(data) != need:
        raise ValueError(f"checkpoint size {len(data)} != expected {need}")
    flat = np.frombuffer(data, dtype="<f8", count=total, offset=offset).astype(float)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=offset + 8 * total),
                         bitorder="little")[:total].astype(bool)
    model = init_params(cfg, 0)
    pos = 0
    for (k, s), n in zip(order, sizes):
        shape = _tensor_shape(cfg, k)
        if s is None:
            model.params[k] = flat[pos: pos + n].reshape(shape).copy()
            model.mask[k] = bits[pos: pos + n].reshape(shape).copy()
        else:
            model.params[k][s] = flat[pos: pos + n].reshape(shape)
            model.mask[k][s] = bits[pos: pos + n].reshape(shape)
        pos += n
    return model


def save_checkpoint(p: NeuralEqParams, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(p))
    tmp.replace(path)


def load_checkpoint(path) -> NeuralEqParams:
    return checkpoint_from_bytes(Path(path).read_bytes())
