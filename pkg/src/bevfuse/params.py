"""Named parameter store, AdamW, checkpoint IO, and gradient checking.

Checkpoints are a single binary file: a magic line, a u64 little-endian
length, a JSON index mapping each parameter name to its shape and byte
offset, then the raw little-endian float64 blocks in index order. Round
trips are bit-exact because the bytes are written and read verbatim.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterator

import numpy as np

from .autodiff import NonFiniteError, Tensor

CHECKPOINT_MAGIC = b"BEVFUSE-CKPT-V1\n"


class CheckpointError(ValueError):
    """Checkpoint file is truncated, mislabeled, or inconsistent."""


class ParamStore:
    """Flat map of unique names to trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def add_linear(store: ParamStore, prefix: str, cin: int, cout: int, rng: np.random.Generator,
               zero: bool = False, bias: bool = True) -> tuple[Tensor, Tensor | None]:
    """Register weight (and optional bias) for a linear layer.

    Default init is fan-in scaled uniform; ``zero`` gives exact zeros,
    used where the attention design calls for neutral-at-start behavior.
    """
    if zero:
        w = store.add(prefix + ".w", np.zeros((cin, cout)))
    else:
        bound = 1.0 / np.sqrt(cin)
        w = store.add(prefix + ".w", rng.uniform(-bound, bound, size=(cin, cout)))
    b = store.add(prefix + ".b", np.zeros(cout)) if bias else None
    return w, b


def add_layer_norm(store: ParamStore, prefix: str, c: int) -> tuple[Tensor, Tensor]:
    gamma = store.add(prefix + ".g", np.ones(c))
    beta = store.add(prefix + ".b", np.zeros(c))
    return gamma, beta


def add_conv3x3(store: ParamStore, prefix: str, cin: int, cout: int,
                rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(9 * cin)
    k = store.add(prefix + ".k", rng.uniform(-bound, bound, size=(3, 3, cin, cout)))
    b = store.add(prefix + ".b", np.zeros(cout))
    return k, b


# ---------------------------------------------------------------------------
# checkpoint IO


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Write all parameters plus an optional JSON-serializable meta dict."""
    names = store.names()
    index = []
    offset = 0
    for name in names:
        t = store[name]
        index.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        offset += t.data.size * 8
    header = json.dumps({"params": index, "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(store[name].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw = f.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<Q", raw)
        header = f.read(hlen)
        if len(header) != hlen:
            raise CheckpointError(f"{path}: truncated JSON index")
        try:
            obj = json.loads(header)
            index = obj["params"]
        except (ValueError, KeyError) as e:
            raise CheckpointError(f"{path}: unreadable index ({e})") from e
        blob = f.read()
    out: dict[str, np.ndarray] = {}
    for entry in index:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated data for parameter {name}")
        out[name] = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
    return out, obj.get("meta", {})


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """AdamW with decoupled weight decay; parameters with no grad are skipped."""

    def __init__(self, store: ParamStore, lr: float = 2e-4, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per parameter entry is |analytic - fd| / max(1, |fd|);
    the max over all entries of all parameters is returned. ``f`` must be
    a deterministic scalar function of the store's current values.
    """
    store.zero_grad()
    out = f(store)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued f")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("grad_check: f(theta) is not finite")
    out.backward()
    worst = 0.0
    for name, p in store.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(store).item()
            flat[i] = orig - eps
            lo = f(store).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(f"grad_check: f not finite near {name}[{i}]")
            fd = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
