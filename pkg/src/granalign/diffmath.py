"""Differentiable numerical primitives with a finite-difference contract.

Every primitive accepts plain numpy arrays (returns arrays) or tape
tensors (returns tensors on the graph); both paths share one
implementation. Analytic gradients of any composition are verified
against central finite differences via :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import DataError, NumericError
from .tape import Tensor, as_tensor, backward, constant, leaf


@dataclass
class AffineParams:
    """weight (d_out, d_in) and bias (d_out,) of one linear layer."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros(cls, d_out: int, d_in: int) -> "AffineParams":
        return cls(np.zeros((d_out, d_in), dtype=np.float32), np.zeros(d_out, dtype=np.float32))

    @classmethod
    def random(cls, d_out: int, d_in: int, rng: np.random.Generator, std: float = 0.02) -> "AffineParams":
        return cls(
            (std * rng.normal(size=(d_out, d_in))).astype(np.float32),
            np.zeros(d_out, dtype=np.float32),
        )


@dataclass
class AttentionParams:
    """Single-head residual self-attention block parameters.

    ``pos`` is a learned positional embedding added before the layer
    norm; the output projection is zero-initialized so the block is an
    exact identity at init.
    """

    pos: np.ndarray  # (N, C)
    ln_gamma: np.ndarray  # (C,)
    ln_beta: np.ndarray  # (C,)
    wq: np.ndarray  # (C, C)
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    @classmethod
    def zeros(cls, n: int, c: int) -> "AttentionParams":
        z = lambda *s: np.zeros(s, dtype=np.float32)
        return cls(
            pos=z(n, c), ln_gamma=np.ones(c, dtype=np.float32), ln_beta=z(c),
            wq=z(c, c), bq=z(c), wk=z(c, c), bk=z(c), wv=z(c, c), bv=z(c), wo=z(c, c), bo=z(c),
        )

    @classmethod
    def init(cls, n: int, c: int, rng: np.random.Generator) -> "AttentionParams":
        p = cls.zeros(n, c)
        # query/key/value start small but nonzero so the zero output
        # projection still receives gradient signal
        for name in ("wq", "wk", "wv"):
            setattr(p, name, (0.02 * rng.normal(size=(c, c))).astype(np.float32))
        return p


def _plain(out: Tensor, *inputs):
    if any(isinstance(i, Tensor) for i in inputs):
        return out
    return out.data


def softmax(x, mask=None):
    """Max-stabilized softmax; mask entries (True) come out exactly 0."""
    out = tape.softmax(as_tensor(x), pad_mask=mask, axis=-1)
    return _plain(out, x)


def cosine(a, b):
    """Cosine similarity of two nonzero vectors."""
    return _plain(tape.cosine(as_tensor(a), as_tensor(b)), a, b)


def affine(x, params: AffineParams):
    """weight @ x + bias for a vector, or row-wise for a matrix."""
    out = tape.affine_rows(as_tensor(x), as_tensor(params.weight), as_tensor(params.bias))
    return _plain(out, x, params.weight, params.bias)


def attention_block(x, params: AttentionParams):
    """Residual single-head self-attention: X' + Attn(LN(X')), X' = X + pos.

    With all attention weights zero-initialized the block is the
    identity map.
    """
    xt = as_tensor(x)
    n, c = xt.data.shape
    pos = as_tensor(params.pos)
    if pos.data.shape != (n, c):
        raise DataError(f"attention_block: pos shape {pos.data.shape} != input {xt.data.shape}")
    xp = tape.add(xt, pos)
    y = tape.layernorm_rows(xp, as_tensor(params.ln_gamma), as_tensor(params.ln_beta))
    q = tape.affine_rows(y, as_tensor(params.wq), as_tensor(params.bq))
    k = tape.affine_rows(y, as_tensor(params.wk), as_tensor(params.bk))
    v = tape.affine_rows(y, as_tensor(params.wv), as_tensor(params.bv))
    logits = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / np.sqrt(c))
    weights = tape.softmax(logits, axis=1)
    attended = tape.matmul(weights, v)
    out = tape.affine_rows(attended, as_tensor(params.wo), as_tensor(params.bo))
    res = tape.add(xp, out)
    return _plain(res, x)


def grad_check(scalar_fn, inputs, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``scalar_fn`` receives one tape tensor per input array and must
    return a scalar tensor. Error metric per coordinate:
    |analytic - fd| / max(1, |fd|).
    """
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [leaf(a) for a in arrays]
    out = scalar_fn(*leaves)
    if not isinstance(out, Tensor):
        out = constant(out)
    backward(out)
    analytic = []
    for lf, a in zip(leaves, arrays):
        g = lf.grad if lf.grad is not None else np.zeros_like(a)
        if not np.all(np.isfinite(g)):
            raise NumericError("grad_check: non-finite analytic gradient")
        analytic.append(np.asarray(g, dtype=np.float64))

    def evaluate(args) -> float:
        r = scalar_fn(*[constant(a) for a in args])
        return float(r.data if isinstance(r, Tensor) else r)

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            plus = [x.copy() for x in arrays]
            plus[i].reshape(-1)[j] = orig + eps
            minus = [x.copy() for x in arrays]
            minus[i].reshape(-1)[j] = orig - eps
            fd = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            if not np.isfinite(fd):
                raise NumericError("grad_check: non-finite finite difference")
            err = abs(analytic[i].reshape(-1)[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
