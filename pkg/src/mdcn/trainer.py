"""Alternating adversarial training for MDCN and its ablation variants."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .datagen import Dataset
from .networks import ModelBundle, Standardizer, build

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ActiveLosses:
    """Which adversarial terms a variant uses.

    ``bt`` is ``None`` (no between-treatment term), ``"pooled"`` (one critic
    head over all source samples) or ``"per-domain"`` (one head per source).
    """

    bt: str | None
    cd: bool
    outcome: bool = True


VARIANTS = {
    "MLP": ActiveLosses(None, False),
    "CFR": ActiveLosses("pooled", False),
    "DCFR": ActiveLosses("per-domain", False),
    "MDMN": ActiveLosses(None, True),
    "MDMNCFR": ActiveLosses("pooled", True),
    "MDCN": ActiveLosses("per-domain", True),
}


def configure_variant(variant: str) -> ActiveLosses:
    key = str(variant).upper()
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; valid names: {', '.join(VARIANTS)}")
    return VARIANTS[key]


LIPSCHITZ_MODES = ("gradient-penalty", "weight-clipping")
CLIP_VALUE = 0.01


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "MDCN"
    alpha: float = L.DEFAULT_ALPHA
    beta: float = L.DEFAULT_BETA
    n_iter: int = 3000
    n1: int = 1
    n2: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    lipschitz_mode: str = "gradient-penalty"
    gp_coef: float = L.DEFAULT_GP_COEF
    q: int = 10
    hidden: tuple = (50, 50)
    ema: float = L.DEFAULT_EMA

    def __post_init__(self):
        configure_variant(self.variant)
        object.__setattr__(self, "variant", str(self.variant).upper())
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError(f"n1 and n2 must be >= 1, got n1={self.n1}, n2={self.n2}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.n_iter < 0:
            raise ValueError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be nonnegative, got {self.alpha}, {self.beta}")
        if self.lipschitz_mode not in LIPSCHITZ_MODES:
            raise ValueError(f"lipschitz_mode must be one of {LIPSCHITZ_MODES}, got {self.lipschitz_mode!r}")
        if self.q <= 0:
            raise ValueError(f"q must be positive, got {self.q}")

    @property
    def active(self) -> ActiveLosses:
        return configure_variant(self.variant)

    def to_items(self):
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append((f.name, str(v)))
        return out


def _coerce(name, raw: str):
    f = {f.name: f for f in dataclasses.fields(TrainConfig)}.get(name)
    if f is None:
        valid = ", ".join(x.name for x in dataclasses.fields(TrainConfig))
        raise KeyError(f"unknown config key {name!r}; valid keys: {valid}")
    default = f.default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"config key {name!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def load_config(path=None, overrides=None, required=()) -> TrainConfig:
    """Read a key=value file, apply ``overrides`` (e.g. CLI flags) and build a config.

    Keys in ``required`` must appear in the file or the overrides.
    """
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v) if isinstance(v, str) else v
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    for key in required:
        if key not in values:
            raise KeyError(f"missing config key {key!r} (default would be {defaults[key]!r})")
    return TrainConfig(**values)


def write_config(config: TrainConfig, path) -> None:
    text = "".join(f"{k}={v}\n" for k, v in config.to_items())
    Path(path).write_text(text, encoding="utf-8")


# -- sampling ----------------------------------------------------------------------------

class _Pools:
    """Row indices per (domain, arm) and standardized features for fast stratified draws."""

    def __init__(self, dataset: Dataset, target, standardizer: Standardizer, domains):
        self.domains = tuple(domains)
        self.target = target
        self.X = standardizer(dataset.X)
        self.groups = []   # (domain position, arm, rows)
        self.target_pos = None
        self.target_rows = None
        labeled_rows = []
        for k, d in enumerate(self.domains):
            rows = dataset.rows(d)
            if d == target:
                self.target_pos = k
                self.target_rows = rows
                continue
            for arm in (0, 1):
                r = rows[dataset.t[rows] == arm]
                if len(r) == 0:
                    raise ValueError(f"source domain {d} has no samples with t={arm}")
                self.groups.append((k, arm, r))
            labeled_rows.append(rows)
        # outcomes are read once, and only for source domains
        self.y = np.full(len(dataset), np.nan)
        if labeled_rows:
            lab = np.concatenate(labeled_rows)
            self.y[lab] = dataset.observed_outcomes(lab)
        if target is not None and self.target_rows is None:
            raise ValueError(f"target domain {target} has no samples")
        self.layout_cache = {}


def sample_minibatch(pools: _Pools, batch_size: int, rng: np.random.Generator) -> L.Batch:
    """Draw ``batch_size`` rows per (source domain, arm) plus ``batch_size`` target rows.

    Rows are drawn with replacement within each stratum.
    """
    idx, didx, t = [], [], []
    for k, arm, rows in pools.groups:
        idx.append(rows[rng.integers(0, len(rows), size=batch_size)])
        didx.append(np.full(batch_size, k))
        t.append(np.full(batch_size, arm))
    if pools.target_rows is not None:
        rows = pools.target_rows
        idx.append(rows[rng.integers(0, len(rows), size=batch_size)])
        didx.append(np.full(batch_size, pools.target_pos))
        t.append(np.full(batch_size, -1))
    idx = np.concatenate(idx)
    t = np.concatenate(t)
    y = np.where(t >= 0, pools.y[idx], np.nan)
    return L.Batch(pools.X[idx], np.concatenate(didx), t, y, len(pools.domains),
                   pools.layout_cache.setdefault(batch_size, {}))


# -- training ------------------------------------------------------------------------------

TRACE_COLUMNS = ("iter", "outcome", "l_bt", "l_cd", "gp", "total")


@dataclass
class TrainedModel:
    bundle: ModelBundle
    state: L.DomainWeightState | None
    trace: list = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)

    def write_trace(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.trace:
                w.writerow([row[0]] + [format(v, ".17g") for v in row[1:]])


def _interpolate(rng, za, zb):
    u = rng.uniform(size=(len(za), 1))
    return u * za + (1.0 - u) * zb


def _bt_groups_rows(bundle, batch):
    pos = {d: k for k, d in enumerate(bundle.domains)}
    out = []
    for group in bundle.bt_groups:
        in_group = np.isin(batch.didx, [pos[d] for d in group])
        out.append((np.flatnonzero(in_group & (batch.t == 0)), np.flatnonzero(in_group & (batch.t == 1))))
    return out


def _bt_interpolants(bundle, batch, Phi, rng):
    """Random control/treated pairs within each head's group, one point per pair."""
    groups = batch.cached(("bt_rows", bundle.bt_groups), lambda: _bt_groups_rows(bundle, batch))
    a_idx, b_idx, heads = [], [], []
    for h, (c, tr) in enumerate(groups):
        m = min(len(c), len(tr))
        a_idx.append(rng.permutation(c)[:m])
        b_idx.append(rng.permutation(tr)[:m])
        heads.append(np.full(m, h))
    a, b = np.concatenate(a_idx), np.concatenate(b_idx)
    return _interpolate(rng, Phi[a], Phi[b]), np.concatenate(heads)


def _cd_interpolants(batch, Phi, state, rng):
    """Each row of D_s paired with a row from D_i, i drawn with probability w[s, i]."""
    S = batch.n_domains
    members = batch.cached("members", lambda: [batch.domain_rows(k) for k in range(S)])
    full = state.full_weights()
    a = np.concatenate(members)
    heads = batch.didx[a]
    cdf = np.cumsum(full[heads], axis=1)
    u = rng.uniform(size=len(a)) * cdf[:, -1]
    picks = np.minimum((cdf < u[:, None]).sum(axis=1), S - 1)
    sizes = np.array([len(m) for m in members])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = np.concatenate(members)
    b = flat[offsets[picks] + rng.integers(0, sizes[picks])]
    return _interpolate(rng, Phi[a], Phi[b]), heads


def _check_finite(it, **values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDivergedError(f"iteration {it}: {name} loss is {v}")


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), target=None,
          callback: Callable | None = None) -> TrainedModel:
    """Fit the networks of ``config.variant`` on ``dataset`` with ``target`` held out.

    The target domain contributes features only (cross-domain terms); its
    outcome columns are never read. ``callback(it, trained_model)`` runs after
    every outer iteration.
    """
    active = config.active
    domains = dataset.domains
    if target is not None and target not in domains:
        raise ValueError(f"target domain {target} not present in dataset domains {domains}")
    dataset.validate(unlabeled=() if target is None else (target,))
    use_bt = active.bt is not None
    use_cd = active.cd
    alpha = config.alpha if use_bt else 0.0
    beta = config.beta if use_cd else 0.0

    sources = [d for d in domains if d != target]
    source_rows = np.flatnonzero(np.isin(dataset.domain, sources))
    standardizer = Standardizer.fit(dataset.X[source_rows])
    bundle = build(dataset.n_features, domains, target=target, q=config.q, hidden=config.hidden,
                   seed=config.seed, bt_heads=active.bt or "per-domain", with_bt=use_bt,
                   with_cd=use_cd, standardizer=standardizer)
    bundle.meta = {"variant": config.variant}
    pools = _Pools(dataset, target, standardizer, domains)

    state = L.DomainWeightState.initial(len(domains), config.ema) if use_cd else None
    opt_main = ad.Adam(bundle.outcome_params(), lr=config.learning_rate)
    critic_params = bundle.critic_params()
    opt_critic = ad.Adam(critic_params, lr=config.learning_rate) if critic_params else None
    rng_main = np.random.default_rng([config.seed, 2])
    rng_critic = np.random.default_rng([config.seed, 3])
    rng_weights = np.random.default_rng([config.seed, 4])
    clip = config.lipschitz_mode == "weight-clipping"

    model = TrainedModel(bundle, state, [], config)
    for it in range(1, config.n_iter + 1):
        if use_cd:
            batch = sample_minibatch(pools, config.batch_size, rng_weights)
            state = L.update_domain_weights(state, bundle, batch)
            model.state = state

        for _ in range(config.n1):
            batch = sample_minibatch(pools, config.batch_size, rng_main)
            total, parts = L.full_loss(bundle, batch, state, alpha, beta, use_bt, use_cd)
            _check_finite(it, outcome=parts.outcome, l_bt=parts.l_bt, l_cd=parts.l_cd, total=parts.total)
            opt_main.zero_grad()
            ad.backward(total)
            opt_main.step()

        gp_value = 0.0
        if opt_critic is not None:
            for _ in range(config.n2):
                batch = sample_minibatch(pools, config.batch_size, rng_critic)
                gp_value = _critic_step(bundle, batch, state, config, opt_critic, rng_critic, clip, it)

        model.trace.append((it, parts.outcome, parts.l_bt, parts.l_cd, gp_value, parts.total))
        if callback is not None:
            callback(it, model)
    model.state = state
    return model


def _critic_step(bundle, batch, state, config, opt, rng, clip, it):
    """One ascent step on both critics (their parameters are disjoint)."""
    Phi = bundle.embedder(batch.X)
    grads = []
    objective = 0.0
    gp_total = 0.0
    if bundle.f_bt is not None:
        lab, A = L.bt_rows_and_coefficients(bundle, batch)
        z, heads = (None, None) if clip else _bt_interpolants(bundle, batch, Phi, rng)
        bt, gp, g = L.critic_ascent_gradients(bundle.f_bt, Phi[lab], A, z, heads, config.gp_coef)
        grads += g
        objective -= bt
        if gp is not None:
            gp_total += gp
            objective += config.gp_coef * gp
    if bundle.f_cd is not None:
        B = L.cd_coefficients(batch, state.w)
        z, heads = (None, None) if clip else _cd_interpolants(batch, Phi, state, rng)
        cd, gp, g = L.critic_ascent_gradients(bundle.f_cd, Phi, B, z, heads, config.gp_coef)
        grads += g
        objective -= cd
        if gp is not None:
            gp_total += gp
            objective += config.gp_coef * gp
    _check_finite(it, critic=objective, gp=gp_total)
    ad.adam_step(opt.params, grads, opt.state)
    if clip:
        for p in opt.params:
            np.clip(p.value, -CLIP_VALUE, CLIP_VALUE, out=p.value)
    return gp_total
