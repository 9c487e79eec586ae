"""Encoder, embedding head, classification head and class anchor vectors.

Everything is plain numpy in float64 with hand-written reverse mode.  A
forward pass that should be differentiated records its intermediate values
in a :class:`ForwardCache`; :meth:`Network.backward` walks that record in
reverse and returns a dict of parameter gradients keyed like
``Network.params``.

Layout::

    encoder   [Linear -> ReLU] x len(hidden)          input -> H = hidden[-1]
    emb head  Linear -> BatchNorm -> ReLU -> Linear -> L2 normalize   H -> d
    cls head  Linear -> BatchNorm -> ReLU -> Linear                   H -> N_c

Parameter count::

    sum(n_in * n_out + n_out over encoder layers)
    + sum over both heads of (H * h + h + 2 * h + h * n_out + n_out)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DegenerateEmbeddingError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12
CHECKPOINT_MAGIC = b"IGCLCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class AnchorVectors:
    a: np.ndarray
    seed: int

    @property
    def n_classes(self) -> int:
        return self.a.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.a).tobytes()).hexdigest()


def init_anchor_vectors(n_classes: int, d: int, seed: int) -> AnchorVectors:
    """One L2-normalized standard Gaussian vector per class."""
    if d < 2:
        raise ValueError("anchor dimension must be at least 2")
    rng = np.random.default_rng([seed, 9001])
    a = rng.standard_normal((n_classes, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return AnchorVectors(a, seed)


def l2_normalize(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(Y, axis=1, keepdims=True)
    if np.any(norms < NORM_EPS):
        raise DegenerateEmbeddingError("cannot normalize an embedding with zero norm")
    return Y / norms, norms


def l2_normalize_backward(dZ: np.ndarray, Z: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # Jacobian of y/|y| is (I - z z^T)/|y|
    return (dZ - np.sum(dZ * Z, axis=1, keepdims=True) * Z) / norms


class ForwardCache:
    """Activations recorded by one differentiable forward pass."""

    def __init__(self):
        self.ops: list[tuple] = []

    def __len__(self):
        return len(self.ops)


class Network:
    def __init__(self, n_features: int, hidden=(512, 512), head_hidden: int = 512, embed_dim: int = 128, n_classes: int = 3, seed: int = 0):
        if not hidden:
            raise ValueError("encoder needs at least one layer")
        self.n_features = int(n_features)
        self.hidden = tuple(int(h) for h in hidden)
        self.head_hidden = int(head_hidden)
        self.embed_dim = int(embed_dim)
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng([seed, 9002])
        widths = (self.n_features,) + self.hidden
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            self._linear(f"enc.{i}", n_in, n_out, rng)
        for name, n_out in (("emb", self.embed_dim), ("cls", self.n_classes)):
            self._head(name, n_out, rng)

    @property
    def rep_dim(self) -> int:
        return self.hidden[-1]

    def _linear(self, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(n_in)
        self.params[f"{name}.W"] = rng.uniform(-bound, bound, (n_in, n_out))
        self.params[f"{name}.b"] = rng.uniform(-bound, bound, n_out)

    def _head(self, name: str, n_out: int, rng: np.random.Generator) -> None:
        h = self.head_hidden
        self._linear(f"{name}.fc1", self.rep_dim, h, rng)
        self.params[f"{name}.bn.gamma"] = np.ones(h)
        self.params[f"{name}.bn.beta"] = np.zeros(h)
        self.buffers[f"{name}.bn.mean"] = np.zeros(h)
        self.buffers[f"{name}.bn.var"] = np.ones(h)
        self._linear(f"{name}.fc2", h, n_out, rng)

    def reset_head(self, name: str, seed: int) -> None:
        """Fresh random initialization of one head (``"emb"`` or ``"cls"``)."""
        n_out = self.embed_dim if name == "emb" else self.n_classes
        self._head(name, n_out, np.random.default_rng([seed, 9003]))

    # -- parameter groups ------------------------------------------------

    def names(self, *prefixes: str) -> list[str]:
        return [k for k in self.params if not prefixes or k.startswith(prefixes)]

    @property
    def encoder_names(self) -> list[str]:
        return self.names("enc.")

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @staticmethod
    def expected_n_params(n_features, hidden, head_hidden, embed_dim, n_classes) -> int:
        widths = (n_features,) + tuple(hidden)
        enc = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        H, h = widths[-1], head_hidden
        return enc + sum(H * h + h + 2 * h + h * o + o for o in (embed_dim, n_classes))

    def digest(self, *prefixes: str) -> str:
        m = hashlib.sha256()
        for k in self.names(*prefixes):
            m.update(k.encode())
            m.update(np.ascontiguousarray(self.params[k]).tobytes())
        return m.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            target = self.params if k in self.params else self.buffers
            if target[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {target[k].shape} vs {v.shape}")
            target[k] = v.copy()

    # -- forward ---------------------------------------------------------

    def encode(self, X: np.ndarray, cache: ForwardCache | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"encoder expects (n, {self.n_features}) input, got {X.shape}")
        h = X
        for i in range(len(self.hidden)):
            h = self._affine(f"enc.{i}", h, cache)
            h = self._relu(h, cache)
        return h

    def head_embed(self, R: np.ndarray, cache: ForwardCache | None = None, training: bool = True) -> np.ndarray:
        Y = self._head_forward("emb", R, cache, training)
        Z, norms = l2_normalize(Y)
        if cache is not None:
            cache.ops.append(("l2", Z, norms))
        return Z

    def head_classify(self, R: np.ndarray, cache: ForwardCache | None = None, training: bool = True) -> np.ndarray:
        return self._head_forward("cls", R, cache, training)

    def embed(self, X, cache=None, training=True) -> np.ndarray:
        return self.head_embed(self.encode(X, cache), cache, training)

    def classify(self, X, cache=None, training=True) -> np.ndarray:
        return self.head_classify(self.encode(X, cache), cache, training)

    def _head_forward(self, name, R, cache, training) -> np.ndarray:
        R = np.asarray(R, dtype=np.float64)
        if R.ndim != 2 or R.shape[1] != self.rep_dim:
            raise ValueError(f"head expects (n, {self.rep_dim}) input, got {R.shape}")
        h = self._affine(f"{name}.fc1", R, cache)
        h = self._batchnorm(f"{name}.bn", h, cache, training)
        h = self._relu(h, cache)
        return self._affine(f"{name}.fc2", h, cache)

    def _affine(self, name, x, cache):
        if cache is not None:
            cache.ops.append(("affine", name, x))
        return x @ self.params[f"{name}.W"] + self.params[f"{name}.b"]

    def _relu(self, x, cache):
        if cache is not None:
            cache.ops.append(("relu", x > 0))
        return np.maximum(x, 0.0)

    def _batchnorm(self, name, x, cache, training):
        gamma, beta = self.params[f"{name}.gamma"], self.params[f"{name}.beta"]
        if training:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            n = x.shape[0]
            rm, rv = self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mu
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * (var * n / (n - 1) if n > 1 else var)
        else:
            mu, var = self.buffers[f"{name}.mean"], self.buffers[f"{name}.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv_std
        if cache is not None:
            cache.ops.append(("bn", name, xhat, inv_std, training))
        return gamma * xhat + beta

    # -- backward --------------------------------------------------------

    def backward(self, cache: ForwardCache, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(upstream * output)`` for every recorded layer.

        Only parameters touched by the recorded pass appear in the result.
        """
        if cache is None or not cache.ops:
            raise UsageError("backward called without a recorded forward pass")
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(upstream, dtype=np.float64)
        for op in reversed(cache.ops):
            kind = op[0]
            if kind == "affine":
                _, name, x = op
                grads[f"{name}.W"] = x.T @ g
                grads[f"{name}.b"] = g.sum(axis=0)
                g = g @ self.params[f"{name}.W"].T
            elif kind == "relu":
                g = g * op[1]
            elif kind == "bn":
                _, name, xhat, inv_std, training = op
                gamma = self.params[f"{name}.gamma"]
                grads[f"{name}.gamma"] = np.sum(g * xhat, axis=0)
                grads[f"{name}.beta"] = g.sum(axis=0)
                dxhat = g * gamma
                if training:
                    n = g.shape[0]
                    g = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
                else:
                    g = dxhat * inv_std
            elif kind == "l2":
                _, Z, norms = op
                g = l2_normalize_backward(g, Z, norms)
        return grads

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path) -> Path:
        """Binary checkpoint.

        ``IGCLCKPT`` magic, u32 version, u32 header length, a JSON header with
        the architecture and an ordered list of (name, shape), then every
        array in that order as little-endian float64.
        """
        path = Path(path)
        state = self.state()
        header = {
            "n_features": self.n_features,
            "hidden": list(self.hidden),
            "head_hidden": self.head_hidden,
            "embed_dim": self.embed_dim,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "arrays": [[k, list(v.shape)] for k, v in state.items()],
        }
        raw = json.dumps(header).encode()
        with path.open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
            fh.write(raw)
            for v in state.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, n = struct.unpack("<II", data[8:16])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16 : 16 + n])
        net = cls(header["n_features"], header["hidden"], header["head_hidden"], header["embed_dim"], header["n_classes"], header["seed"])
        offset = 16 + n
        state = {}
        for name, shape in header["arrays"]:
            expected = net.params.get(name, net.buffers.get(name))
            if expected is None or list(expected.shape) != shape:
                raise ValueError(f"checkpoint array {name} with shape {shape} does not fit the architecture")
            size = int(np.prod(shape)) * 8
            state[name] = np.frombuffer(data[offset : offset + size], dtype="<f8").reshape(shape).astype(np.float64)
            offset += size
        if offset != len(data):
            raise ValueError("trailing bytes in checkpoint")
        missing = (set(net.params) | set(net.buffers)) - set(state)
        if missing:
            raise ValueError(f"checkpoint lacks arrays {sorted(missing)}")
        net.load_state(state)
        return net
