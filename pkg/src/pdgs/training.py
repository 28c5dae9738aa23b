"""Adam training loops: single-instance physics, parametric surrogate,
supervised baseline, and evaluation.

An "epoch" is one optimizer step throughout (for batch training, one
mini-batch step; passes over the shuffled training set stream seamlessly
across steps).  Runs are bit-deterministic for a fixed (seed, config,
dataset) on one platform.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tape
from .model import forward
from .physics import assemble_full_solution, physics_loss, relative_l2


class TrainingDiverged(RuntimeError):
    """The loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 1000
    batch_size: int = 1
    val_every: int = 100
    val_threshold: float = 3e-3
    patience: int = 2000  # epochs without validation improvement
    seed: int = 0
    mode: str = "physics"  # physics | supervised

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class AdamState:
    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params):
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(params, grads, state, lr):
    """In-place Adam update; grads may contain None for untouched params."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)  # (epoch, loss, val, seconds)

    def append(self, epoch, loss, val, seconds):
        if self.records and epoch <= self.records[-1][0]:
            raise ValueError("epochs must be strictly increasing")
        self.records.append((epoch, loss, val, seconds))

    def best_val(self):
        vals = [r[2] for r in self.records if r[2] is not None]
        return min(vals) if vals else None

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss,val_rel_l2,seconds\n")
            for epoch, loss, val, seconds in self.records:
                val_s = "" if val is None else repr(float(val))
                fh.write(f"{epoch},{float(loss)!r},{val_s},{seconds:.3f}\n")


def _snapshot(model):
    params = [t.data.copy() for _, t in model.parameters()]
    buffers = [
        (bn.running_mean.copy(), bn.running_var.copy()) for bn in model.batchnorms
    ]
    return params, buffers


def _restore(model, snap):
    params, buffers = snap
    for (_, t), p in zip(model.parameters(), params):
        t.data[:] = p
    for bn, (rm, rv) in zip(model.batchnorms, buffers):
        bn.running_mean[:] = rm
        bn.running_var[:] = rv


class _EarlyStop:
    def __init__(self, cfg):
        self.threshold = cfg.val_threshold
        self.patience = cfg.patience
        self.best = np.inf
        self.best_epoch = 0

    def update(self, epoch, val):
        improved = val < self.best
        if improved:
            self.best = val
            self.best_epoch = epoch
        hit_threshold = val <= self.threshold
        out_of_patience = epoch - self.best_epoch >= self.patience
        return improved, (hit_threshold or out_of_patience)


def train_nonparametric(model, topo, edge_feats, system, reference, cfg,
                        log_every=0):
    """Minimize ||R(f_out)||_2 for one PDE instance.

    ``reference`` is the full nodal oracle vector used for validation; the
    best-validation parameters are restored before returning.
    """
    params = [t for _, t in model.parameters()]
    adam = AdamState([t.data for t in params])
    history = TrainHistory()
    stopper = _EarlyStop(cfg)
    best = _snapshot(model)
    feats = topo.node_coords_std
    interior = system.interior
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        tape = Tape()
        try:
            out = forward(model, topo, feats, tape, edge_feats, training=True)
            f_int = tape.row_select(out, interior)
            loss = physics_loss(tape, [system], [f_int])
            tape.backward(loss)
        except NonFiniteError as exc:
            scales = [float(np.abs(t.data).max()) for t in params]
            raise TrainingDiverged(
                f"epoch {epoch}: {exc}; max |param| per tensor: {scales}"
            ) from exc
        adam_step(
            [t.data for t in params],
            [t.grad for t in params],
            adam,
            cfg.learning_rate,
        )
        model.zero_grads()

        if epoch % cfg.val_every == 0 or epoch == cfg.max_epochs:
            u = assemble_full_solution(system, f_int.data[:, 0])
            val = relative_l2(u, reference)
            history.append(
                epoch, loss.data[0, 0], val, time.perf_counter() - start
            )
            improved, stop = stopper.update(epoch, val)
            if improved:
                best = _snapshot(model)
            if log_every and epoch % log_every == 0:
                print(
                    f"  epoch {epoch}: loss {loss.data[0, 0]:.4e} "
                    f"val {val:.4e}"
                )
            if stop:
                break

    _restore(model, best)
    return model, history


def _stacked_features(topo, mus, idx):
    n = topo.num_nodes
    feats = np.empty((len(idx) * n, 3))
    for row, k in enumerate(idx):
        feats[row * n : (row + 1) * n, :2] = topo.node_coords_std
        feats[row * n : (row + 1) * n, 2] = mus[k]
    return feats


def validate_parametric(model, topo, edge_feats, systems, mus, references):
    """Mean relative L2 over validation samples, eval-mode forward."""
    n = topo.num_nodes
    idx = list(range(len(mus)))
    feats = _stacked_features(topo, mus, idx)
    tape = Tape(record=False)
    out = forward(
        model, topo, feats, tape, edge_feats, training=False, batch=len(idx)
    )
    errs = []
    for k, system in enumerate(systems):
        f_int = out.data[k * n : (k + 1) * n][system.interior, 0]
        u = assemble_full_solution(system, f_int)
        errs.append(relative_l2(u, references[k]))
    return float(np.mean(errs)), errs


def train_parametric(model, topo, edge_feats, train_systems, train_mus,
                     val_systems, val_mus, val_references, cfg, log_every=0):
    """Surrogate training over a family of sources sharing one mesh.

    Each epoch is one mini-batch Adam step; batches stream over seeded
    reshuffles of the training set.
    """
    params = [t for _, t in model.parameters()]
    adam = AdamState([t.data for t in params])
    history = TrainHistory()
    stopper = _EarlyStop(cfg)
    best = _snapshot(model)
    rng = np.random.default_rng(cfg.seed)
    n = topo.num_nodes
    order = []
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        if len(order) < cfg.batch_size:
            fresh = rng.permutation(len(train_mus)).tolist()
            order.extend(fresh)
        batch = [order.pop(0) for _ in range(cfg.batch_size)]

        feats = _stacked_features(topo, train_mus, batch)
        tape = Tape()
        try:
            out = forward(
                model, topo, feats, tape, edge_feats,
                training=True, batch=len(batch),
            )
            f_ints = [
                tape.row_select(out, train_systems[k].interior + j * n)
                for j, k in enumerate(batch)
            ]
            loss = physics_loss(tape, [train_systems[k] for k in batch], f_ints)
            tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        adam_step(
            [t.data for t in params],
            [t.grad for t in params],
            adam,
            cfg.learning_rate,
        )
        model.zero_grads()

        if epoch % cfg.val_every == 0 or epoch == cfg.max_epochs:
            val, _ = validate_parametric(
                model, topo, edge_feats, val_systems, val_mus, val_references
            )
            history.append(
                epoch, loss.data[0, 0], val, time.perf_counter() - start
            )
            improved, stop = stopper.update(epoch, val)
            if improved:
                best = _snapshot(model)
            if log_every and epoch % log_every == 0:
                print(f"  epoch {epoch}: loss {loss.data[0,0]:.4e} val {val:.4e}")
            if stop:
                break

    _restore(model, best)
    return model, history


def supervised_loss(tape, systems, f_outs, labels):
    """Flat MSE between assembled solutions and oracle labels over a batch."""
    from .autodiff import accumulate_grad

    batch = len(systems)
    n_total = sum(s.num_nodes for s in systems)
    total = None
    for system, f_out, label in zip(systems, f_outs, labels):
        u = assemble_full_solution(system, f_out.data[:, 0])
        diff = u - label
        value = float(diff @ diff) / n_total

        def bwd(out, system=system, f_out=f_out, diff=diff):
            if out.grad is None:
                return
            g = (2.0 * system.delta / n_total) * diff[system.interior]
            accumulate_grad(f_out, out.grad[0, 0] * g[:, None], own=True)

        term = tape.custom(np.array([[value]]), bwd)
        total = term if total is None else tape.add(total, term)
    return total


def train_supervised(model, topo, edge_feats, train_systems, train_mus,
                     train_labels, val_systems, val_mus, val_references, cfg,
                     log_every=0):
    """Data-driven baseline: identical architecture and optimizer, MSE loss
    against precomputed FEM labels."""
    params = [t for _, t in model.parameters()]
    adam = AdamState([t.data for t in params])
    history = TrainHistory()
    stopper = _EarlyStop(cfg)
    best = _snapshot(model)
    rng = np.random.default_rng(cfg.seed)
    n = topo.num_nodes
    order = []
    start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(train_mus)).tolist())
        batch = [order.pop(0) for _ in range(cfg.batch_size)]

        feats = _stacked_features(topo, train_mus, batch)
        tape = Tape()
        try:
            out = forward(
                model, topo, feats, tape, edge_feats,
                training=True, batch=len(batch),
            )
            f_ints = [
                tape.row_select(out, train_systems[k].interior + j * n)
                for j, k in enumerate(batch)
            ]
            loss = supervised_loss(
                tape,
                [train_systems[k] for k in batch],
                f_ints,
                [train_labels[k] for k in batch],
            )
            tape.backward(loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        adam_step(
            [t.data for t in params],
            [t.grad for t in params],
            adam,
            cfg.learning_rate,
        )
        model.zero_grads()

        if epoch % cfg.val_every == 0 or epoch == cfg.max_epochs:
            val, _ = validate_parametric(
                model, topo, edge_feats, val_systems, val_mus, val_references
            )
            history.append(
                epoch, loss.data[0, 0], val, time.perf_counter() - start
            )
            improved, stop = stopper.update(epoch, val)
            if improved:
                best = _snapshot(model)
            if log_every and epoch % log_every == 0:
                print(f"  epoch {epoch}: loss {loss.data[0,0]:.4e} val {val:.4e}")
            if stop:
                break

    _restore(model, best)
    return model, history


def evaluate(model, topo, edge_feats, systems, mus, references):
    """Per-sample relative L2 of single-sample inference, plus timing."""
    if len(mus) == 0:
        raise ValueError("nothing to evaluate")
    n = topo.num_nodes
    errs = []
    times = []
    for k, system in enumerate(systems):
        feats = _stacked_features(topo, mus, [k])
        t0 = time.perf_counter()
        tape = Tape(record=False)
        out = forward(model, topo, feats, tape, edge_feats, training=False)
        f_int = out.data[system.interior, 0]
        u = assemble_full_solution(system, f_int)
        times.append(time.perf_counter() - t0)
        errs.append(relative_l2(u, references[k]))
    return {
        "mean": float(np.mean(errs)),
        "min": float(np.min(errs)),
        "max": float(np.max(errs)),
        "per_sample": errs,
        "inference_seconds_mean": float(np.mean(times)),
    }
