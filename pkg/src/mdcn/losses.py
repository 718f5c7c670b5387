"""Outcome, between-treatment and cross-domain losses, domain weights, gradient penalty.

Every group mean is expressed as a fixed per-row coefficient matrix, so each
adversarial term is ``sum(critic_outputs * coefficients)``: one product and
one reduction on the graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .networks import ModelBundle, Mlp

DEFAULT_ALPHA = 5e-4
DEFAULT_BETA = 1e-3
DEFAULT_GP_COEF = 10.0
DEFAULT_EMA = 0.9


@dataclass
class Batch:
    """A stratified minibatch in standardized feature space.

    ``didx`` indexes ``bundle.domains``; ``t`` is -1 and ``y`` is NaN on
    unlabeled (target) rows.
    """

    X: np.ndarray
    didx: np.ndarray
    t: np.ndarray
    y: np.ndarray
    n_domains: int
    cache: dict = field(default_factory=dict, repr=False)
    labeled: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.labeled = self.t >= 0

    def cached(self, key, fn):
        """Memoize layout-derived arrays; batches sharing a row layout share ``cache``."""
        if key not in self.cache:
            self.cache[key] = fn()
        return self.cache[key]

    def __len__(self):
        return len(self.didx)

    def domain_rows(self, k):
        return np.flatnonzero(self.didx == k)

    def group_rows(self, k, arm):
        return np.flatnonzero((self.didx == k) & (self.t == arm))


def _domain_positions(bundle: ModelBundle):
    return {d: k for k, d in enumerate(bundle.domains)}


def _bt_coefficients(bundle: ModelBundle, batch: Batch) -> np.ndarray:
    """(n, heads): +1/n0 on a head's control rows, -1/n1 on its treated rows."""
    pos = _domain_positions(bundle)
    A = np.zeros((len(batch), len(bundle.bt_groups)))
    for h, group in enumerate(bundle.bt_groups):
        ks = [pos[d] for d in group]
        in_group = np.isin(batch.didx, ks)
        c = np.flatnonzero(in_group & (batch.t == 0))
        tr = np.flatnonzero(in_group & (batch.t == 1))
        if len(c) == 0 or len(tr) == 0:
            raise ValueError(f"between-treatment head {h} (domains {group}) needs both arms in the batch; "
                             f"got {len(c)} control and {len(tr)} treated rows")
        A[c, h] = 1.0 / len(c)
        A[tr, h] = -1.0 / len(tr)
    return A


def bt_rows_and_coefficients(bundle, batch):
    """Labeled row indices and their between-treatment coefficient matrix."""
    def compute():
        lab = np.flatnonzero(batch.labeled)
        return lab, _bt_coefficients(bundle, batch)[lab]
    return batch.cached(("bt", bundle.domains, bundle.bt_groups), compute)


def cd_coefficients(batch: Batch, weights: np.ndarray) -> np.ndarray:
    _check_weights(weights)
    return _cd_coefficients(batch, weights)


def _domain_mean_matrix(batch: Batch) -> np.ndarray:
    return batch.cached("domain_means", lambda: _domain_mean_matrix_uncached(batch))


def _domain_mean_matrix_uncached(batch: Batch) -> np.ndarray:
    """(S, n) averaging matrix over rows of each domain."""
    P = np.zeros((batch.n_domains, len(batch)))
    for k in range(batch.n_domains):
        rows = batch.domain_rows(k)
        if len(rows) == 0:
            raise ValueError(f"domain index {k} is absent from the batch")
        P[k, rows] = 1.0 / len(rows)
    return P


def _check_weights(w):
    rowsum = w.sum(axis=1)
    bad = np.flatnonzero(np.abs(rowsum - 1.0) > 1e-6)
    if len(bad):
        raise ValueError(f"domain weight row {int(bad[0])} sums to {rowsum[bad[0]]:.12g}, not 1")
    if (w < 0).any():
        raise ValueError("domain weights must be nonnegative")


def _cd_coefficients(batch: Batch, weights: np.ndarray) -> np.ndarray:
    """(n, S): +1/n_s on rows of D_s, -w[s, i]/n_i on rows of D_i, i != s."""
    P = _domain_mean_matrix(batch)
    full = off_diagonal_to_full(weights)
    # column s of B: P[s] - sum_i full[s, i] * P[i]
    return (P - full @ P).T


def off_diagonal_to_full(w: np.ndarray) -> np.ndarray:
    """Expand an S x (S-1) matrix (row s omits column s) to S x S with a zero diagonal."""
    S = w.shape[0]
    full = np.zeros((S, S))
    for s in range(S):
        full[s, np.arange(S) != s] = w[s]
    return full


def full_to_off_diagonal(m: np.ndarray) -> np.ndarray:
    S = m.shape[0]
    return np.stack([m[s, np.arange(S) != s] for s in range(S)])


# -- losses ------------------------------------------------------------------------

def outcome_loss(bundle: ModelBundle, batch: Batch, Phi=None, frozen=False) -> ad.Node:
    """Sum over labeled domains of the control-arm and treated-arm mean squared errors."""
    if Phi is None:
        Phi = bundle.embedder.forward(batch.X, frozen=frozen)
    total = None
    for arm, head in ((0, bundle.h0), (1, bundle.h1)):
        rows, coef = batch.cached(("outcome", arm), lambda: _outcome_coefficients(batch, arm))
        pred = head.forward(ad.take(Phi, rows, unique=True), frozen=frozen)
        resid = ad.sub(pred, batch.y[rows][:, None])
        term = ad.sum(ad.mul(ad.square(resid), coef[:, None]))
        total = term if total is None else ad.add(total, term)
    return total


def _outcome_coefficients(batch, arm):
    rows = np.flatnonzero(batch.t == arm)
    coef = np.zeros(len(rows))
    for k in np.unique(batch.didx[batch.labeled]):
        sel = batch.didx[rows] == k
        if not sel.any():
            raise ValueError(f"domain index {int(k)} has no rows with t={arm} in the batch")
        coef[sel] = 1.0 / sel.sum()
    return rows, coef


def between_treatment_loss(bundle: ModelBundle, batch: Batch, Phi=None, frozen=False) -> ad.Node:
    """Sum over heads of mean critic output on control minus mean on treated."""
    if bundle.f_bt is None:
        raise ValueError("model has no between-treatment critic")
    if Phi is None:
        Phi = bundle.embedder.forward(batch.X)
    lab, A = bt_rows_and_coefficients(bundle, batch)
    F = bundle.f_bt.forward(ad.take(Phi, lab, unique=True), frozen=frozen)
    return ad.sum(ad.mul(F, A))


def cross_domain_loss(bundle: ModelBundle, batch: Batch, state: "DomainWeightState", Phi=None,
                      frozen=False) -> ad.Node:
    """Sum over domains s of mean f_s on D_s minus the w_s-weighted means on the other domains."""
    if bundle.f_cd is None:
        raise ValueError("model has no cross-domain critic")
    _check_weights(state.w)
    if Phi is None:
        Phi = bundle.embedder.forward(batch.X)
    B = _cd_coefficients(batch, state.w)
    F = bundle.f_cd.forward(Phi, frozen=frozen)
    return ad.sum(ad.mul(F, B))


def gradient_penalty(critic: Mlp, points, heads=None) -> ad.Node:
    """Mean over points of (||d critic_head / dz|| - 1)^2, summed over heads.

    With a single head this is the plain mean over all points.
    """
    points = np.asarray(points, dtype=np.float64)
    if heads is None:
        heads = np.zeros(len(points), dtype=int)
    _, g = critic.input_gradient(points, heads)
    return penalty_from_gradient(g, heads)


def penalty_from_gradient(g: ad.Node, heads) -> ad.Node:
    heads = np.asarray(heads)
    norm = ad.sqrt(ad.sum(ad.square(g), axis=1), eps=1e-12)
    dev = ad.square(ad.sub(norm, 1.0))
    coef = np.zeros(len(heads))
    for h in np.unique(heads):
        sel = heads == h
        coef[sel] = 1.0 / sel.sum()
    return ad.sum(ad.mul(dev, coef))


def critic_objective(critic: Mlp, Phi_rows: np.ndarray, coef: np.ndarray, points=None, heads=None):
    """One pass giving ``sum(critic(Phi_rows) * coef)`` and, if ``points`` is
    given, the gradient penalty at ``points``."""
    n = len(Phi_rows)
    if points is None:
        out = critic.forward(ad.constant(Phi_rows))
        return ad.sum(ad.mul(out, coef)), None
    z = np.concatenate([Phi_rows, points])
    out, g = critic.input_gradient(z, heads, rows=slice(n, None))
    term = ad.sum(ad.mul(ad.take(out, slice(0, n)), coef))
    return term, penalty_from_gradient(g, heads)


def _head_coefficients(heads):
    coef = np.zeros(len(heads))
    for h in np.unique(heads):
        sel = heads == h
        coef[sel] = 1.0 / sel.sum()
    return coef


def critic_ascent_gradients(critic: Mlp, Phi_rows, coef, points=None, heads=None, gp_coef=0.0):
    """Value and parameter gradients of ``-sum(critic(Phi_rows) * coef) + gp_coef * penalty``.

    Numpy fast path equal to differentiating :func:`critic_objective` with
    the graph engine (tests compare the two), without building a graph.
    Hidden layers must be ELU. Returns ``(term, gp, grads)``, ``gp`` being
    ``None`` when ``points`` is ``None``.
    """
    if critic.spec.activation != "elu" and critic.spec.hidden:
        raise NotImplementedError(f"fast critic gradients need ELU hidden layers, got {critic.spec.activation!r}")
    Ws = [w.value for w in critic.weights]
    bs = [b.value for b in critic.biases]
    L = len(Ws) - 1
    n = len(Phi_rows)
    Z = Phi_rows if points is None else np.concatenate([Phi_rows, points])
    hs, ds, pre = [Z], [], []
    h = Z
    for k in range(L):
        a = h @ Ws[k] + bs[k]
        d = np.exp(np.minimum(a, 0.0))
        h = np.maximum(a, 0.0) + d - 1.0
        pre.append(a)
        ds.append(d)
        hs.append(h)
    out = h @ Ws[L] + bs[L]
    term = float(np.sum(out[:n] * coef))

    dW = [np.zeros_like(w) for w in Ws]
    extra = [None] * L
    gp = None
    if points is not None:
        heads = np.asarray(heads)
        R = slice(n, None)
        # gradient of the selected head with respect to the input, layer by layer
        g = Ws[L][:, heads].T
        gs, us = [None] * (L + 1), [None] * (L + 1)
        gs[L] = g
        for k in range(L, 0, -1):
            us[k] = gs[k] * ds[k - 1][R]
            gs[k - 1] = us[k] @ Ws[k - 1].T
        g0 = gs[0]
        norm = np.sqrt(np.sum(g0 * g0, axis=1) + 1e-12)
        hc = _head_coefficients(heads)
        gp = float(np.sum(hc * (norm - 1.0) ** 2))
        G = (gp_coef * 2.0 * hc * (norm - 1.0) / norm)[:, None] * g0
        for k in range(1, L + 1):
            dW[k - 1] += G.T @ us[k]
            dU = G @ Ws[k - 1]
            a, d = pre[k - 1][R], ds[k - 1][R]
            extra[k - 1] = np.where(a > 0, 0.0, dU * gs[k] * d)
            G = dU * d
        sel = np.zeros((len(heads), Ws[L].shape[1]))
        sel[np.arange(len(heads)), heads] = 1.0
        dW[L] += G.T @ sel

    dOut = np.zeros_like(out)
    dOut[:n] = -coef
    grads = [None] * (2 * (L + 1))
    dW[L] += hs[L].T @ dOut
    grads[2 * L + 1] = dOut.sum(axis=0)
    dH = dOut @ Ws[L].T
    for k in range(L, 0, -1):
        dA = dH * ds[k - 1]
        if extra[k - 1] is not None:
            dA[n:] += extra[k - 1]
        dW[k - 1] += hs[k - 1].T @ dA
        grads[2 * (k - 1) + 1] = dA.sum(axis=0)
        if k > 1:
            dH = dA @ Ws[k - 1].T
    for k in range(L + 1):
        grads[2 * k] = dW[k]
    return term, gp, grads


# -- domain weights -------------------------------------------------------------------

def softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class DomainWeightState:
    """EMA of pairwise critic distances and the softmax weights derived from them.

    Both matrices are S x (S-1): row s lists the other domains in increasing
    index order.
    """

    l: np.ndarray
    w: np.ndarray
    ema: float = DEFAULT_EMA

    @classmethod
    def initial(cls, n_domains: int, ema: float = DEFAULT_EMA):
        l = np.zeros((n_domains, n_domains - 1))
        return cls(l, softmax_rows(-l), ema)

    def blend(self, current: np.ndarray) -> "DomainWeightState":
        """New state from current-batch distances ``current`` (S x (S-1))."""
        # written as an increment so current == l leaves l bit-identical
        l = self.l + (1.0 - self.ema) * (current - self.l)
        return DomainWeightState(l, softmax_rows(-l), self.ema)

    def full_weights(self):
        return off_diagonal_to_full(self.w)

    def others(self, s):
        S = self.w.shape[0]
        return np.array([i for i in range(S) if i != s])


def pairwise_distances(bundle: ModelBundle, batch: Batch, Phi=None) -> np.ndarray:
    """l[s, i] = mean f_cd^s over D_s - mean f_cd^s over D_i, as S x (S-1)."""
    if Phi is None:
        Phi = bundle.embedder(batch.X)
    F = bundle.f_cd(Phi)
    mu = _domain_mean_matrix(batch) @ F  # mu[i, s]: mean of head s on D_i
    d = np.diag(mu)[:, None] - mu.T
    return full_to_off_diagonal(d)


def update_domain_weights(state: DomainWeightState, bundle: ModelBundle, batch: Batch,
                          Phi=None) -> DomainWeightState:
    return state.blend(pairwise_distances(bundle, batch, Phi))


@dataclass(frozen=True)
class LossBreakdown:
    outcome: float
    l_bt: float
    l_cd: float
    gp: float
    alpha: float
    beta: float

    @property
    def total(self):
        return self.outcome + self.alpha * self.l_bt + self.beta * self.l_cd


def full_loss(bundle: ModelBundle, batch: Batch, state: DomainWeightState | None,
              alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA, use_bt=True, use_cd=True, Phi=None):
    """Graph of outcome + alpha * L_BT + beta * L_CD with critics frozen.

    Returns ``(total_node, LossBreakdown)``; the gradient-penalty field is 0
    here because the penalty belongs to the critic objective.
    """
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be nonnegative, got {alpha}, {beta}")
    if Phi is None:
        Phi = bundle.embedder.forward(batch.X)
    total = outcome_loss(bundle, batch, Phi)
    out_v = float(total.value)
    bt_v = cd_v = 0.0
    if use_bt and bundle.f_bt is not None:
        bt = between_treatment_loss(bundle, batch, Phi, frozen=True)
        bt_v = float(bt.value)
        if alpha:
            total = ad.add(total, ad.scale(bt, alpha))
    if use_cd and bundle.f_cd is not None:
        cd = cross_domain_loss(bundle, batch, state, Phi, frozen=True)
        cd_v = float(cd.value)
        if beta:
            total = ad.add(total, ad.scale(cd, beta))
    return total, LossBreakdown(out_v, bt_v, cd_v, 0.0, alpha, beta)
