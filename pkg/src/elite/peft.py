"""Low-rank adapters over frozen weights.

Convention: a weight ``W`` is ``d1 x d2`` (out x in) and layers compute
``x @ W.T`` for row-major batches ``x`` of shape ``n x d2``.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError

IMPORTANCE_DECAY = 0.85


def _check_rank(d1, d2, r):
    limit = max(1, min(d1, d2) // 4)
    if not 1 <= r <= limit:
        raise ContractError(f"rank {r} outside [1, {limit}] for a {d1}x{d2} weight")


def _as_node(x):
    return x if isinstance(x, ad.Node) else ad.const(x)


class LoraAdapter:
    """``W = W0 + scaling * B @ A`` with ``B`` starting at zero."""

    kind = "lora"

    def __init__(self, W0, rank: int, alpha: float | None = None, rng=None):
        W0 = np.asarray(W0, dtype=np.float64)
        d1, d2 = W0.shape
        _check_rank(d1, d2, rank)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W0 = W0
        self._W0T = ad.const(W0.T)
        self.A = ad.param(rng.uniform(-0.02, 0.02, size=(rank, d2)))
        self.B = ad.param(np.zeros((d1, rank)))
        self.scaling = float(rank if alpha is None else alpha) / rank

    @property
    def shape(self):
        return self.W0.shape

    @property
    def rank(self):
        return self.A.shape[0]

    def forward(self, x) -> ad.Node:
        x = _as_node(x)
        if x.shape[1] != self.W0.shape[1]:
            raise DimensionError(f"input has {x.shape[1]} columns, weight expects {self.W0.shape[1]}")
        base = ad.matmul(x, self._W0T)
        low = ad.matmul(ad.matmul(x, ad.transpose(self.A)), ad.transpose(self.B))
        return ad.add(base, ad.scale(low, self.scaling))

    def merge(self) -> np.ndarray:
        return self.W0 + self.scaling * (self.B.value @ self.A.value)

    def parameters(self):
        return [self.A, self.B]

    def frozen(self):
        return [self.W0]

    def after_backward(self):
        pass


class AdaLoraAdapter:
    """SVD-shaped adapter ``W = W0 + P @ diag(lam) @ Q`` with prunable ranks."""

    kind = "adalora"

    def __init__(self, W0, rank: int, rng=None):
        W0 = np.asarray(W0, dtype=np.float64)
        d1, d2 = W0.shape
        _check_rank(d1, d2, rank)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.W0 = W0
        self._W0T = ad.const(W0.T)
        # orthonormal start: the regulariser begins at zero
        p, _ = np.linalg.qr(rng.standard_normal((d1, rank)))
        q, _ = np.linalg.qr(rng.standard_normal((d2, rank)))
        self.P = ad.param(p)
        self.lam = ad.param(np.zeros((1, rank)))
        self.Q = ad.param(q.T.copy())
        self.active = np.ones(rank, dtype=bool)
        self.importance_ema = np.zeros(rank)

    @property
    def shape(self):
        return self.W0.shape

    @property
    def rank(self):
        return self.lam.shape[1]

    def forward(self, x) -> ad.Node:
        x = _as_node(x)
        if x.shape[1] != self.W0.shape[1]:
            raise DimensionError(f"input has {x.shape[1]} columns, weight expects {self.W0.shape[1]}")
        base = ad.matmul(x, self._W0T)
        low = ad.scale_cols(ad.matmul(x, ad.transpose(self.Q)), self.lam)
        return ad.add(base, ad.matmul(low, ad.transpose(self.P)))

    def merge(self) -> np.ndarray:
        lam = np.where(self.active, self.lam.value[0], 0.0)
        return self.W0 + (self.P.value * lam) @ self.Q.value

    def parameters(self):
        return [self.P, self.lam, self.Q]

    def frozen(self):
        return [self.W0]

    def after_backward(self):
        """Mask pruned ranks out of the update and refresh importance."""
        off = ~self.active
        self.lam.grad[0, off] = 0.0
        self.P.grad[:, off] = 0.0
        self.Q.grad[off, :] = 0.0
        current = np.abs(self.lam.value[0] * self.lam.grad[0])
        on = self.active
        self.importance_ema[on] = IMPORTANCE_DECAY * self.importance_ema[on] + (1 - IMPORTANCE_DECAY) * current[on]


def lora_forward(x, adapter) -> ad.Node:
    return adapter.forward(x)


def lora_merge(adapter) -> np.ndarray:
    return adapter.merge()


def orth_reg(adapter: AdaLoraAdapter) -> ad.Node:
    """``||P^T P - I||_F^2 + ||Q Q^T - I||_F^2`` over the active ranks."""
    idx = np.flatnonzero(adapter.active)
    if idx.size == 0:
        return ad.const([[0.0]])
    select = np.zeros((adapter.rank, idx.size))
    select[idx, np.arange(idx.size)] = 1.0
    S = ad.const(select)
    eye = ad.const(np.eye(idx.size))
    P = ad.matmul(adapter.P, S)
    Q = ad.matmul(ad.transpose(S), adapter.Q)
    dp = ad.sub(ad.matmul(ad.transpose(P), P), eye)
    dq = ad.sub(ad.matmul(Q, ad.transpose(Q)), eye)
    return ad.add(ad.sum_all(ad.mul(dp, dp)), ad.sum_all(ad.mul(dq, dq)))


def importance_scores(adapter: AdaLoraAdapter) -> np.ndarray:
    return np.where(adapter.active, adapter.importance_ema, 0.0)


def reallocate_budget(adapters: Sequence[AdaLoraAdapter], total_budget: int) -> None:
    """Keep the ``total_budget`` most important ranks across all adapters.

    Ranking uses the stored importance of every rank, pruned or not, so a
    pruned rank comes back only if its frozen score beats a live one.
    """
    total = sum(a.rank for a in adapters)
    if not 0 <= total_budget <= total:
        raise ContractError(f"budget {total_budget} outside [0, {total}]")
    pairs = [(-a.importance_ema[k], i, k) for i, a in enumerate(adapters) for k in range(a.rank)]
    pairs.sort()
    keep = {(i, k) for _, i, k in pairs[:total_budget]}
    for i, a in enumerate(adapters):
        for k in range(a.rank):
            on = (i, k) in keep
            if a.active[k] and not on:
                a.lam.value[0, k] = 0.0
            a.active[k] = on


def trainable_count(adapter) -> int:
    return sum(p.value.size for p in adapter.parameters())


# --------------------------------------------------------------------------
# binary records: header (d1, d2, r) as uint32 LE, then float64 LE payload

_HEADER = struct.Struct("<3I")


def write_record(fh: BinaryIO, d1: int, d2: int, r: int, payload) -> None:
    fh.write(_HEADER.pack(d1, d2, r))
    fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def read_record(fh: BinaryIO, payload_len):
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated record header")
    d1, d2, r = _HEADER.unpack(head)
    n = payload_len(d1, d2, r)
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise FormatError("truncated record payload")
    return d1, d2, r, np.frombuffer(raw, dtype="<f8").astype(np.float64)


def write_matrix(fh: BinaryIO, m) -> None:
    m = np.asarray(m, dtype=np.float64)
    write_record(fh, m.shape[0], m.shape[1], 0, m.ravel())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    d1, d2, r, data = read_record(fh, lambda d1, d2, r: d1 * d2)
    if r != 0:
        raise FormatError("expected a dense matrix record")
    return data.reshape(d1, d2)


def write_adapter(fh: BinaryIO, adapter) -> None:
    d1, d2 = adapter.shape
    r = adapter.rank
    if adapter.kind == "lora":
        payload = [adapter.B.value.ravel(), adapter.A.value.ravel(), [adapter.scaling]]
    else:
        payload = [
            adapter.P.value.ravel(),
            adapter.lam.value.ravel(),
            adapter.Q.value.ravel(),
            adapter.active.astype(np.float64),
            adapter.importance_ema,
        ]
    write_record(fh, d1, d2, r, np.concatenate(payload))


def read_adapter(fh: BinaryIO, W0, kind: str):
    """Rebuild an adapter of ``kind`` on top of the frozen ``W0``."""
    W0 = np.asarray(W0, dtype=np.float64)
    if kind == "lora":
        d1, d2, r, data = read_record(fh, lambda d1, d2, r: r * (d1 + d2) + 1)
        if (d1, d2) != W0.shape:
            raise FormatError("adapter shape does not match its base weight")
        a = LoraAdapter(W0, r)
        a.B.value[...] = data[: d1 * r].reshape(d1, r)
        a.A.value[...] = data[d1 * r : d1 * r + r * d2].reshape(r, d2)
        a.scaling = float(data[-1])
        return a
    if kind == "adalora":
        d1, d2, r, data = read_record(fh, lambda d1, d2, r: r * (d1 + d2 + 3))
        if (d1, d2) != W0.shape:
            raise FormatError("adapter shape does not match its base weight")
        a = AdaLoraAdapter(W0, r)
        cuts = np.cumsum([d1 * r, r, r * d2, r])
        a.P.value[...] = data[: cuts[0]].reshape(d1, r)
        a.lam.value[...] = data[cuts[0] : cuts[1]].reshape(1, r)
        a.Q.value[...] = data[cuts[1] : cuts[2]].reshape(r, d2)
        a.active = data[cuts[2] : cuts[3]] > 0.5
        a.importance_ema = data[cuts[3] :].copy()
        return a
    raise ValueError(f"unknown adapter kind {kind!r}")
