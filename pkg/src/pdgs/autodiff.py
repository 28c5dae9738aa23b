"""Minimal reverse-mode autodiff over dense 2D float64 tensors.

A Tape records each operation's backward closure in execution order;
``Tape.backward`` replays them in exact reverse, so gradients are
deterministic.  Every op output is finite-checked.  There is no
double-backward: differentiating the solution field itself is carried by the
FE basis functions, not by this tape.
"""

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} {self.shape}{' grad' if self.requires_grad else ''}>"


def accumulate_grad(t, g, own=False):
    """Add g into t.grad; ``own=True`` promises g is a fresh private array."""
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


class Tape:
    """Records ops for one forward pass; single-owner, single-use backward."""

    def __init__(self, record=True):
        self.record = record
        self._ops = []
        self._consumed = False

    def _push(self, bwd):
        if self.record:
            self._ops.append(bwd)

    def tensor(self, data, requires_grad=False, name=""):
        return Tensor(data, requires_grad, name)

    # -- primitives ---------------------------------------------------------

    def matmul(self, a, b):
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        out = Tensor(_finite(a.data @ b.data, "matmul"))

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, out.grad @ b.data.T, own=True)
            accumulate_grad(b, a.data.T @ out.grad, own=True)

        self._push(bwd)
        return out

    def add(self, a, b):
        """Elementwise add; b may also be a 1-row bias broadcast over a."""
        bias = b.shape[0] == 1 and a.shape[0] != 1 and a.shape[1] == b.shape[1]
        if not bias and a.shape != b.shape:
            raise ValueError(f"add shape mismatch {a.shape} + {b.shape}")
        out = Tensor(_finite(a.data + b.data, "add"))

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, out.grad)
            if bias:
                accumulate_grad(b, out.grad.sum(axis=0, keepdims=True), own=True)
            else:
                accumulate_grad(b, out.grad)

        self._push(bwd)
        return out

    def concat_cols(self, a, b):
        if a.shape[0] != b.shape[0]:
            raise ValueError("concat_cols row mismatch")
        out = Tensor(np.concatenate([a.data, b.data], axis=1))
        split = a.shape[1]

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, out.grad[:, :split])
            accumulate_grad(b, out.grad[:, split:])

        self._push(bwd)
        return out

    def scale(self, a, c):
        c = float(c)
        out = Tensor(_finite(a.data * c, "scale"))

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, out.grad * c, own=True)

        self._push(bwd)
        return out

    def sin(self, a):
        out = Tensor(np.sin(a.data))

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, out.grad * np.cos(a.data), own=True)

        self._push(bwd)
        return out

    def cos(self, a):
        out = Tensor(np.cos(a.data))

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, -out.grad * np.sin(a.data), own=True)

        self._push(bwd)
        return out

    def row_select(self, a, idx):
        idx = np.asarray(idx, dtype=np.int64)
        out = Tensor(a.data[idx])

        def bwd():
            if out.grad is None:
                return
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            accumulate_grad(a, g, own=True)

        self._push(bwd)
        return out

    def sum_all(self, a):
        out = Tensor(np.array([[a.data.sum()]]))

        def bwd():
            if out.grad is None:
                return
            accumulate_grad(a, np.full_like(a.data, out.grad[0, 0]), own=True)

        self._push(bwd)
        return out

    # -- graph + normalization ops ------------------------------------------

    def aggregate_mean(self, feats, topo, weights, batch=1):
        """Per-node weighted neighbor mean; block-diagonal over ``batch``
        stacked graphs sharing one topology."""
        n = topo.num_nodes
        if feats.shape[0] != batch * n:
            raise ValueError(
                f"aggregate_mean: {feats.shape[0]} rows != batch {batch} x {n}"
            )
        out_data = np.empty_like(feats.data)
        for k in range(batch):
            block = slice(k * n, (k + 1) * n)
            _kernels.aggregate_fwd_into(
                topo.neighbor_offsets,
                topo.neighbor_indices,
                weights,
                feats.data[block],
                out_data[block],
            )
        out = Tensor(_finite(out_data, "aggregate_mean"))

        def bwd():
            if out.grad is None:
                return
            g = np.empty_like(feats.data)
            for k in range(batch):
                block = slice(k * n, (k + 1) * n)
                _kernels.aggregate_bwd_into(
                    topo.neighbor_offsets,
                    topo.neighbor_indices,
                    weights,
                    out.grad[block],
                    g[block],
                )
            accumulate_grad(feats, g, own=True)

        self._push(bwd)
        return out

    def batchnorm(self, x, bn, training):
        """Column-wise batch normalization with learnable scale/shift.

        ``bn`` is a BatchNorm holding parameters and running statistics;
        running stats are updated (momentum 0.1) only in training mode.
        """
        gamma, beta = bn.gamma, bn.beta
        if training:
            m = x.shape[0]
            if m < 2:
                raise ValueError("batchnorm needs >= 2 rows in training mode")
            mu = x.data.mean(axis=0, keepdims=True)
            xc = x.data - mu
            var = (xc**2).mean(axis=0, keepdims=True)
            bn.running_mean[:] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
            bn.running_var[:] = (1 - bn.momentum) * bn.running_var + bn.momentum * var
        else:
            mu = bn.running_mean
            var = bn.running_var
            xc = x.data - mu
        std = np.sqrt(var + bn.eps)
        xhat = xc / std
        out = Tensor(_finite(xhat * gamma.data + beta.data, "batchnorm"))

        def bwd():
            if out.grad is None:
                return
            g = out.grad
            accumulate_grad(gamma, (g * xhat).sum(axis=0, keepdims=True), own=True)
            accumulate_grad(beta, g.sum(axis=0, keepdims=True), own=True)
            dxhat = g * gamma.data
            if training:
                m = x.shape[0]
                dvar = (dxhat * xc).sum(axis=0, keepdims=True) * (-0.5) / std**3
                dmu = -dxhat.sum(axis=0, keepdims=True) / std + dvar * (
                    -2.0 * xc.mean(axis=0, keepdims=True)
                )
                dx = dxhat / std + (2.0 / m) * xc * dvar + dmu / m
            else:
                dx = dxhat / std
            accumulate_grad(x, dx, own=True)

        self._push(bwd)
        return out

    # -- escape hatch for precomputed-operator losses -------------------------

    def custom(self, value, bwd):
        """Record a Tensor whose backward rule the caller supplies.

        ``bwd(out)`` must route out.grad into its inputs via accumulate_grad.
        """
        out = Tensor(_finite(np.atleast_2d(value), "custom"))
        self._push(lambda: bwd(out))
        return out

    # -- reverse pass ---------------------------------------------------------

    def backward(self, loss):
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if self._consumed:
            raise RuntimeError("tape already consumed; build a new forward pass")
        if loss.shape != (1, 1):
            raise ValueError(f"backward needs a 1x1 loss, got {loss.shape}")
        self._consumed = True
        loss.grad = np.ones((1, 1))
        for bwd in reversed(self._ops):
            bwd()


class BatchNorm:
    """State for one batchnorm site: learnable gamma/beta + running stats."""

    def __init__(self, width, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones((1, width)), requires_grad=True, name="bn.gamma")
        self.beta = Tensor(np.zeros((1, width)), requires_grad=True, name="bn.beta")
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.momentum = momentum
        self.eps = eps
