"""The PD-GraphSAGE network.

Architecture strings follow the experiment-table convention, e.g.
``2+128x5+1`` (input width, hidden widths, readout) or ``2+40+256x5+1`` when a
frozen sinusoidal feature mapping lifts the input to the second width.  Each
hidden layer is a GraphSAGE update ``sin(concat(h, mean_N(h)) @ W + b)``; the
readout is per-node linear.  Distance edge weights, when configured, are used
only in the first hidden layer; later layers aggregate uniformly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BatchNorm, Tensor

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file does not match the expected schema."""


@dataclass
class ModelConfig:
    layers: str = "2+128x5+1"
    mapping: str = "none"  # none | gamma1 | gamma2
    sigma: float = 1.0
    batchnorm: bool = False
    delta: float = 1.0
    seed: int = 0
    two_sided_update: bool = False
    use_distance_edge: bool = False

    def to_dict(self):
        return {
            "layers": self.layers,
            "mapping": self.mapping,
            "sigma": self.sigma,
            "batchnorm": self.batchnorm,
            "delta": self.delta,
            "seed": self.seed,
            "two_sided_update": self.two_sided_update,
            "use_distance_edge": self.use_distance_edge,
        }


def parse_architecture(spec):
    """Expand e.g. '2+40+256x5+1' to a width list."""
    widths = []
    for token in spec.replace("×", "x").split("+"):
        token = token.strip()
        if "x" in token:
            w, n = token.split("x")
            widths += [int(w)] * int(n)
        else:
            widths.append(int(token))
    if len(widths) < 3:
        raise ValueError(f"architecture {spec!r} needs input, hidden, output")
    if widths[-1] != 1:
        raise ValueError(f"architecture {spec!r} must end in width 1")
    if any(w <= 0 for w in widths):
        raise ValueError(f"architecture {spec!r} has a non-positive width")
    return widths


@dataclass
class FeatureMapping:
    kind: str
    matrix: np.ndarray | None  # B (q, m1) for gamma1, C (1, m2) for gamma2
    sigma: float

    def output_width(self, q):
        if self.kind == "none":
            return q
        if self.kind == "gamma1":
            return 2 * self.matrix.shape[1]
        return 2 * self.matrix.shape[1] * q


def apply_mapping(mapping, feats):
    """Frozen sinusoidal lift of the (n, q) feature array; plain numpy."""
    if mapping.kind == "none":
        return feats
    if mapping.kind == "gamma1":
        z = 2.0 * np.pi * feats @ mapping.matrix
        return np.concatenate([np.cos(z), np.sin(z)], axis=1)
    if mapping.kind == "gamma2":
        c = mapping.matrix[0]
        n, q = feats.shape
        z = np.einsum("a,nb->nab", c, feats).reshape(n, len(c) * q)
        return np.concatenate([np.cos(z), np.sin(z)], axis=1)
    raise ValueError(f"unknown mapping kind {mapping.kind!r}")


@dataclass
class SageLayer:
    w: Tensor  # (2 d_in, d_out)
    b: Tensor  # (1, d_out)
    w2: Tensor | None = None  # optional square right factor


@dataclass
class Model:
    config: ModelConfig
    q: int
    mapping: FeatureMapping
    layers: list
    readout_w: Tensor
    readout_b: Tensor
    batchnorms: list = field(default_factory=list)

    def parameters(self):
        params = []
        for i, layer in enumerate(self.layers):
            params.append((f"sage{i}.w", layer.w))
            if layer.w2 is not None:
                params.append((f"sage{i}.w2", layer.w2))
            params.append((f"sage{i}.b", layer.b))
            if self.batchnorms:
                bn = self.batchnorms[i]
                params.append((f"bn{i}.gamma", bn.gamma))
                params.append((f"bn{i}.beta", bn.beta))
        params.append(("readout.w", self.readout_w))
        params.append(("readout.b", self.readout_b))
        return params

    def num_parameters(self):
        return sum(t.data.size for _, t in self.parameters())

    def zero_grads(self):
        for _, t in self.parameters():
            t.grad = None


def _glorot(rng, rows, cols):
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, (rows, cols))


def init_model(config):
    """Build a model with Glorot-uniform weights, zero biases, and a frozen
    mapping matrix, all drawn in a fixed order from one seeded generator."""
    widths = parse_architecture(config.layers)
    q = widths[0]
    rng = np.random.default_rng(config.seed)

    if config.mapping == "none":
        mapping = FeatureMapping("none", None, 0.0)
        sage_widths = widths[:-1]
    else:
        lifted = widths[1]
        if config.mapping == "gamma1":
            if lifted % 2:
                raise ValueError("gamma1 width must be even")
            m1 = lifted // 2
            mapping = FeatureMapping(
                "gamma1", rng.normal(0.0, config.sigma, (q, m1)), config.sigma
            )
        elif config.mapping == "gamma2":
            if lifted % (2 * q):
                raise ValueError("gamma2 width must be a multiple of 2q")
            m2 = lifted // (2 * q)
            mapping = FeatureMapping(
                "gamma2", rng.normal(0.0, config.sigma, (1, m2)), config.sigma
            )
        else:
            raise ValueError(f"unknown mapping {config.mapping!r}")
        sage_widths = widths[1:-1]

    layers = []
    for d_in, d_out in zip(sage_widths[:-1], sage_widths[1:]):
        w = Tensor(_glorot(rng, 2 * d_in, d_out), requires_grad=True)
        w2 = None
        if config.two_sided_update:
            w2 = Tensor(_glorot(rng, d_out, d_out), requires_grad=True)
        b = Tensor(np.zeros((1, d_out)), requires_grad=True)
        layers.append(SageLayer(w, b, w2))

    readout_w = Tensor(_glorot(rng, sage_widths[-1], 1), requires_grad=True)
    readout_b = Tensor(np.zeros((1, 1)), requires_grad=True)

    batchnorms = (
        [BatchNorm(d) for d in sage_widths[1:]] if config.batchnorm else []
    )
    return Model(config, q, mapping, layers, readout_w, readout_b, batchnorms)


def forward(model, topo, node_features, tape, edge_feats=None, training=False,
            batch=1):
    """Run the network on (batch * N, q) features; returns an (batch*N, 1)
    Tensor of raw outputs (unscaled by delta)."""
    feats = np.asarray(node_features, dtype=np.float64)
    if feats.shape != (batch * topo.num_nodes, model.q):
        raise ValueError(
            f"features {feats.shape} != ({batch}*{topo.num_nodes}, {model.q})"
        )
    h = Tensor(apply_mapping(model.mapping, feats))

    uniform = np.ones(topo.num_edges)
    for i, layer in enumerate(model.layers):
        if i == 0 and model.config.use_distance_edge and edge_feats is not None:
            weights = edge_feats.values
        else:
            weights = uniform
        hn = tape.aggregate_mean(h, topo, weights, batch=batch)
        z = tape.matmul(tape.concat_cols(h, hn), layer.w)
        if layer.w2 is not None:
            z = tape.matmul(z, layer.w2)
        z = tape.add(z, layer.b)
        if model.batchnorms:
            z = tape.batchnorm(z, model.batchnorms[i], training)
        h = tape.sin(z)
    return tape.add(tape.matmul(h, model.readout_w), model.readout_b)


# ---------------------------------------------------------------------------
# checkpointing

def _buffers(model):
    out = []
    for i, bn in enumerate(model.batchnorms):
        out.append((f"bn{i}.running_mean", bn.running_mean))
        out.append((f"bn{i}.running_var", bn.running_var))
    return out


def save_checkpoint(model, path, extra_config=None):
    config = model.config.to_dict()
    if extra_config:
        config.update(extra_config)
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "params": [
            {"name": name, "shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in model.parameters()
        ],
        "buffers": [
            {"name": name, "shape": list(a.shape), "data": a.ravel().tolist()}
            for name, a in _buffers(model)
        ],
        "mapping": {
            "kind": model.mapping.kind,
            "sigma": model.mapping.sigma,
            "shape": (
                list(model.mapping.matrix.shape)
                if model.mapping.matrix is not None
                else None
            ),
            "data": (
                model.mapping.matrix.ravel().tolist()
                if model.mapping.matrix is not None
                else None
            ),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, config dict)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}"
        )
    cfg_dict = doc["config"]
    config = ModelConfig(
        **{k: cfg_dict[k] for k in ModelConfig().to_dict() if k in cfg_dict}
    )
    model = init_model(config)

    def fill(name, target, entry):
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if shape != target.shape or data.size != target.size:
            raise CheckpointError(
                f"parameter {name!r}: stored shape {shape} != model {target.shape}"
            )
        target[:] = data.reshape(shape)

    params = {name: t for name, t in model.parameters()}
    seen = set()
    for entry in doc["params"]:
        name = entry["name"]
        if name not in params:
            raise CheckpointError(f"unexpected parameter {name!r}")
        fill(name, params[name].data, entry)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"missing parameters: {sorted(missing)}")

    buffers = {name: a for name, a in _buffers(model)}
    for entry in doc.get("buffers", []):
        name = entry["name"]
        if name not in buffers:
            raise CheckpointError(f"unexpected buffer {name!r}")
        fill(name, buffers[name], entry)

    mp = doc["mapping"]
    if mp["kind"] != model.mapping.kind:
        raise CheckpointError("mapping kind mismatch")
    if mp["data"] is not None:
        model.mapping.matrix[:] = np.asarray(mp["data"]).reshape(mp["shape"])
    return model, cfg_dict
