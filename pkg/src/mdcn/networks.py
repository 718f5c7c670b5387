"""Embedder, outcome heads and critics, plus checkpoint I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter

CHECKPOINT_MAGIC = "MDCN-CHECKPOINT 1"
SUPPORTED_ACTIVATIONS = ("elu", "tanh", "linear")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple = (50, 50)
    output_dim: int = 1
    activation: str = "elu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all layer sizes must be positive, got {dims}")
        if self.activation not in SUPPORTED_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    def n_params(self) -> int:
        d = self.layer_dims
        return int(sum(a * b + b for a, b in zip(d[:-1], d[1:])))


def _activate(x: Node, name: str) -> Node:
    if name == "elu":
        return ad.elu(x)
    if name == "tanh":
        return ad.tanh(x)
    return x


class Mlp:
    """Fully connected net: hidden layers use ``spec.activation``, output is affine."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.params: list[Parameter] = []
        dims = spec.layer_dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = ad.xavier_uniform(rng, fan_in, fan_out) if rng is not None else np.zeros((fan_in, fan_out))
            self.params.append(Parameter(w))
            self.params.append(Parameter(np.zeros(fan_out)))

    @property
    def weights(self):
        return self.params[0::2]

    @property
    def biases(self):
        return self.params[1::2]

    def _layers(self, frozen):
        if frozen:
            return [(ad.constant(w.value), ad.constant(b.value)) for w, b in zip(self.weights, self.biases)]
        return list(zip(self.weights, self.biases))

    def forward(self, x, frozen: bool = False) -> Node:
        """Graph forward pass; ``frozen`` treats parameters as constants."""
        x = ad.as_node(x)
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"expected {self.spec.input_dim} input features, got shape {x.shape}")
        layers = self._layers(frozen)
        h = x
        for i, (w, b) in enumerate(layers):
            h = ad.add(ad.matmul(h, w), b)
            if i < len(layers) - 1:
                h = _activate(h, self.spec.activation)
        return h

    def __call__(self, x) -> np.ndarray:
        """Plain numpy forward pass (no graph)."""
        h = np.asarray(x, dtype=np.float64)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i < n - 1:
                if self.spec.activation == "elu":
                    h = np.maximum(h, 0.0) + np.exp(np.minimum(h, 0.0)) - 1.0
                elif self.spec.activation == "tanh":
                    h = np.tanh(h)
        return h

    def input_gradient(self, z, heads=None, frozen: bool = False, rows: slice | None = None):
        """Closed-form d out[:, head] / d z per row, differentiable in the parameters.

        ``heads`` gives the output column per row (default 0). With ``rows``
        the forward pass covers all of ``z`` but the gradient only that slice,
        so one pass can serve both a loss and a penalty. Returns the graph
        nodes ``(outputs, gradient)``.
        """
        if self.spec.activation != "elu" and len(self.spec.hidden) > 0:
            raise NotImplementedError(
                f"input_gradient: op {self.spec.activation!r} is not supported on the second-order path")
        z = ad.as_node(z)
        rows = slice(None) if rows is None else rows
        n = len(range(*rows.indices(z.shape[0])))
        if heads is None:
            heads = np.zeros(n, dtype=int)
        heads = np.asarray(heads)
        if len(heads) != n:
            raise ValueError(f"{len(heads)} head indices for {n} gradient rows")
        layers = self._layers(frozen)
        pre = []
        h = z
        for i, (w, b) in enumerate(layers):
            a = ad.add(ad.matmul(h, w), b)
            if i < len(layers) - 1:
                pre.append(a)
                h = ad.elu(a)
            else:
                h = a
        seed = np.zeros((n, self.spec.output_dim))
        seed[np.arange(n), heads] = 1.0
        g = ad.matmul(ad.constant(seed), ad.transpose(layers[-1][0]))
        whole = rows == slice(None)
        for i in range(len(layers) - 2, -1, -1):
            p = pre[i] if whole else ad.take(pre[i], rows)
            g = ad.mul(g, ad.elu_derivative(p))
            g = ad.matmul(g, ad.transpose(layers[i][0]))
        return h, g

    def copy_values(self):
        return [p.value.copy() for p in self.params]


@dataclass
class Standardizer:
    """Per-feature z-scoring with pooled source statistics."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        return cls(X.mean(axis=0), sd)

    @classmethod
    def identity(cls, p):
        return cls(np.zeros(p), np.ones(p))

    def __call__(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


@dataclass
class ModelBundle:
    """All networks of one model.

    ``domains`` lists domain ids in cross-domain critic head order and
    ``bt_groups`` lists the source domain ids per between-treatment head
    (a single pooled head holds every source id).
    """

    embedder: Mlp
    h0: Mlp
    h1: Mlp
    f_bt: Mlp | None
    f_cd: Mlp | None
    standardizer: Standardizer
    domains: tuple
    target: int | None
    bt_groups: tuple
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def n_domains(self):
        return len(self.domains)

    @property
    def sources(self):
        return tuple(d for d in self.domains if d != self.target)

    def networks(self):
        out = [("embedder", self.embedder), ("h0", self.h0), ("h1", self.h1)]
        if self.f_bt is not None:
            out.append(("f_bt", self.f_bt))
        if self.f_cd is not None:
            out.append(("f_cd", self.f_cd))
        return out

    def outcome_params(self):
        return self.embedder.params + self.h0.params + self.h1.params

    def critic_params(self):
        out = []
        for net in (self.f_bt, self.f_cd):
            if net is not None:
                out += net.params
        return out


def build(input_dim: int, domains, *, target=None, q: int = 10, hidden=(50, 50), seed: int = 0,
          bt_heads: str = "per-domain", with_cd: bool = True, with_bt: bool = True,
          standardizer: Standardizer | None = None) -> ModelBundle:
    """Create a bundle with Xavier-initialized weights.

    The embedder and outcome heads draw from one seeded stream and the critics
    from another, so every variant built with the same seed shares the
    embedder and head initialization.
    """
    domains = tuple(int(d) for d in domains)
    if len(domains) < 2:
        raise ValueError(f"need at least 2 domains, got {len(domains)}")
    if len(set(domains)) != len(domains):
        raise ValueError(f"duplicate domain ids in {domains}")
    if q <= 0:
        raise ValueError(f"embedding dimension q must be positive, got {q}")
    if target is not None and target not in domains:
        raise ValueError(f"target domain {target} not among {domains}")
    if bt_heads not in ("per-domain", "pooled"):
        raise ValueError(f"bt_heads must be 'per-domain' or 'pooled', got {bt_heads!r}")
    sources = tuple(d for d in domains if d != target)
    main = np.random.default_rng([seed, 0])
    crit = np.random.default_rng([seed, 1])
    embedder = Mlp(MlpSpec(input_dim, hidden, q), main)
    h0 = Mlp(MlpSpec(q, hidden, 1), main)
    h1 = Mlp(MlpSpec(q, hidden, 1), main)
    if bt_heads == "pooled":
        groups = (sources,)
    else:
        groups = tuple((s,) for s in sources)
    f_bt = Mlp(MlpSpec(q, hidden, len(groups)), crit) if with_bt else None
    f_cd = Mlp(MlpSpec(q, hidden, len(domains)), crit) if with_cd else None
    return ModelBundle(embedder, h0, h1, f_bt, f_cd,
                       standardizer or Standardizer.identity(input_dim),
                       domains, target, groups, int(seed))


def embed(bundle: ModelBundle, X) -> np.ndarray:
    return bundle.embedder(bundle.standardizer(X))


def predict(bundle: ModelBundle, Phi, arm: int) -> np.ndarray:
    if arm not in (0, 1):
        raise ValueError(f"arm must be 0 or 1, got {arm!r}")
    head = bundle.h1 if arm == 1 else bundle.h0
    return head(Phi)[:, 0]


def critic_eval(bundle: ModelBundle, Phi, which: str) -> np.ndarray:
    if which not in ("bt", "cd"):
        raise ValueError(f"critic must be 'bt' or 'cd', got {which!r}")
    net = bundle.f_bt if which == "bt" else bundle.f_cd
    if net is None:
        raise ValueError(f"this model has no {which} critic")
    return net(Phi)


# -- checkpoint ----------------------------------------------------------------
#
# Text format, UTF-8, LF:
#   line 1: "MDCN-CHECKPOINT 1"
#   line 2: JSON header (dims, domains, target, bt_groups, seed, meta)
#   then one line per array in declaration order:
#     <name>\t<comma-separated shape>\t<space-separated %.17g values>

def _fmt(a: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(a).reshape(-1))


def save_checkpoint(bundle: ModelBundle, path) -> None:
    nets = bundle.networks()
    header = {
        "kind": "model",
        "domains": list(bundle.domains),
        "target": bundle.target,
        "bt_groups": [list(g) for g in bundle.bt_groups],
        "seed": bundle.seed,
        "networks": {name: {"input_dim": net.spec.input_dim, "hidden": list(net.spec.hidden),
                            "output_dim": net.spec.output_dim, "activation": net.spec.activation}
                     for name, net in nets},
        "meta": bundle.meta,
    }
    lines = [CHECKPOINT_MAGIC, json.dumps(header, sort_keys=True)]
    arrays = [("standardizer.mean", bundle.standardizer.mean), ("standardizer.scale", bundle.standardizer.scale)]
    for name, net in nets:
        for i, p in enumerate(net.params):
            arrays.append((f"{name}.{i}", p.value))
    for name, arr in arrays:
        shape = ",".join(str(s) for s in np.shape(arr))
        lines.append(f"{name}\t{shape}\t{_fmt(arr)}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def _read_arrays(lines, path):
    arrays = {}
    for lineno, line in enumerate(lines, start=3):
        if not line:
            continue
        try:
            name, shape, values = line.split("\t")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            vals = np.array([float(v) for v in values.split()], dtype=np.float64) if values else np.zeros(0)
            arrays[name] = vals.reshape(dims)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed array line ({exc})") from None
    return arrays


def load_checkpoint(path):
    """Load a model bundle (or an :class:`OracleModel`) written by this module."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (missing {CHECKPOINT_MAGIC!r})")
    header = json.loads(lines[1])
    arrays = _read_arrays(lines[2:], path)
    if header.get("kind") == "oracle":
        return OracleModel(arrays["X"], arrays["tau"])
    nets = {}
    for name, cfg in header["networks"].items():
        net = Mlp(MlpSpec(cfg["input_dim"], tuple(cfg["hidden"]), cfg["output_dim"], cfg["activation"]))
        for i, p in enumerate(net.params):
            key = f"{name}.{i}"
            if arrays[key].shape != p.shape:
                raise ValueError(f"{path}: {key} has shape {arrays[key].shape}, expected {p.shape}")
            p.value = arrays[key]
        nets[name] = net
    return ModelBundle(
        nets["embedder"], nets["h0"], nets["h1"], nets.get("f_bt"), nets.get("f_cd"),
        Standardizer(arrays["standardizer.mean"], arrays["standardizer.scale"]),
        tuple(header["domains"]), header["target"],
        tuple(tuple(g) for g in header["bt_groups"]), header["seed"], header.get("meta", {}))


class OracleModel:
    """Returns stored true CATE values for exactly matching feature rows."""

    def __init__(self, X, tau):
        self.X = np.asarray(X, dtype=np.float64)
        self.tau = np.asarray(tau, dtype=np.float64)
        self._lookup = {row.tobytes(): v for row, v in zip(self.X, self.tau)}

    def cate(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        try:
            return np.array([self._lookup[row.tobytes()] for row in X])
        except KeyError:
            raise KeyError("oracle model has no stored CATE for a requested feature row") from None

    def save(self, path):
        header = {"kind": "oracle"}
        lines = [CHECKPOINT_MAGIC, json.dumps(header),
                 f"X\t{self.X.shape[0]},{self.X.shape[1]}\t{_fmt(self.X)}",
                 f"tau\t{self.tau.shape[0]}\t{_fmt(self.tau)}"]
        _atomic_write(path, "\n".join(lines) + "\n")
