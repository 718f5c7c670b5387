"""scikit-learn style wrapper around the training engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import Dataset
from .evaluation import estimate_cate
from .losses import off_diagonal_to_full
from .networks import embed, predict
from .trainer import TrainConfig, train


def _check_labels(name, a, n):
    a = np.asarray(a)
    if a.ndim != 1 or len(a) != n:
        raise ValueError(f"{name} must be a 1-D array of length {n}, got shape {a.shape}")
    return a


class MultiDomainCausalRegressor(BaseEstimator):
    """Treatment-effect regressor trained across several labeled domains.

    Learns a shared representation of the features, one outcome head per
    treatment arm, and (depending on ``variant``) adversarial critics that
    balance treatment groups within each domain and align the target domain
    with a learned weighting of the source domains.

    Parameters
    ----------
    variant : {"MDCN", "MDMNCFR", "MDMN", "DCFR", "CFR", "MLP"}, default="MDCN"
        Which regularizers are active. "MLP" is a plain two-headed regressor.
    alpha : float, default=5e-4
        Weight of the between-treatment balance term.
    beta : float, default=1e-3
        Weight of the cross-domain alignment term.
    n_iter : int, default=3000
        Outer training iterations.
    n1, n2 : int, default=1 and 5
        Representation steps and critic steps per outer iteration.
    batch_size : int, default=32
        Samples drawn per (domain, arm) stratum, and from the target domain.
    learning_rate : float, default=1e-4
        Adam step size for all networks.
    lipschitz_mode : {"gradient-penalty", "weight-clipping"}, default="gradient-penalty"
        How critics are kept approximately 1-Lipschitz.
    gp_coef : float, default=10.0
        Gradient-penalty coefficient.
    q : int, default=10
        Representation dimension.
    hidden : tuple of int, default=(50, 50)
        Hidden layer widths of every network.
    random_state : int, default=0
        Seed for initialization and minibatch sampling.

    Attributes
    ----------
    model_ : TrainedModel
        Networks, learned domain weights and loss trace.
    domains_ : tuple of int
        Domain ids seen in ``fit`` (the unlabeled target last, if any).
    target_domain_ : int or None
        Id assigned to the rows passed as ``X_target``.
    n_features_in_ : int
        Number of features seen in ``fit``.
    """

    def __init__(self, variant="MDCN", alpha=5e-4, beta=1e-3, n_iter=3000, n1=1, n2=5,
                 batch_size=32, learning_rate=1e-4, lipschitz_mode="gradient-penalty",
                 gp_coef=10.0, q=10, hidden=(50, 50), random_state=0):
        self.variant = variant
        self.alpha = alpha
        self.beta = beta
        self.n_iter = n_iter
        self.n1 = n1
        self.n2 = n2
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lipschitz_mode = lipschitz_mode
        self.gp_coef = gp_coef
        self.q = q
        self.hidden = hidden
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(variant=self.variant, alpha=self.alpha, beta=self.beta, n_iter=self.n_iter,
                           n1=self.n1, n2=self.n2, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=int(self.random_state),
                           lipschitz_mode=self.lipschitz_mode, gp_coef=self.gp_coef, q=self.q,
                           hidden=tuple(self.hidden))

    def fit(self, X, y, treatment, domains, X_target=None, callback=None):
        """Fit on labeled source rows, optionally aligning to unlabeled target rows.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
        y : array-like of shape (n_samples,)
            Observed outcome under the received treatment.
        treatment : array-like of shape (n_samples,)
            0 for control, 1 for treated.
        domains : array-like of shape (n_samples,)
            Integer domain id per row; every domain needs both arms.
        X_target : array-like of shape (m_samples, n_features), optional
            Unlabeled rows of the domain to predict on.
        callback : callable, optional
            Called as ``callback(iteration, model)`` after every iteration.

        Returns
        -------
        self
        """
        X = check_array(X, dtype=np.float64)
        n = X.shape[0]
        y = _check_labels("y", check_array(np.asarray(y).reshape(-1, 1), dtype=np.float64)[:, 0], n)
        t = _check_labels("treatment", treatment, n)
        if not np.isin(t, (0, 1)).all():
            raise ValueError("treatment must contain only 0 and 1")
        d = _check_labels("domains", domains, n)
        if not np.issubdtype(d.dtype, np.integer):
            if not np.all(np.equal(np.mod(d, 1), 0)):
                raise ValueError("domains must be integer ids")
        d = d.astype(np.int64)
        config = self._config()
        target = None
        if X_target is not None:
            Xt = check_array(X_target, dtype=np.float64)
            if Xt.shape[1] != X.shape[1]:
                raise ValueError(f"X_target has {Xt.shape[1]} features, X has {X.shape[1]}")
            target = int(d.max()) + 1
            X = np.vstack([X, Xt])
            y = np.concatenate([y, np.full(len(Xt), np.nan)])
            t = np.concatenate([t, np.zeros(len(Xt), dtype=np.int64)])
            d = np.concatenate([d, np.full(len(Xt), target)])
        data = Dataset(d, X, t.astype(np.int64), y)
        self.model_ = train(data, config, target=target, callback=callback)
        self.domains_ = tuple(self.model_.bundle.domains)
        self.target_domain_ = target
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fit with {self.n_features_in_}")
        return X

    def predict(self, X):
        """Estimated conditional average treatment effect per row."""
        X = self._check_X(X)
        return estimate_cate(self.model_, X)

    def predict_outcomes(self, X):
        """Predicted potential outcomes, shape (n_samples, 2): control then treated."""
        X = self._check_X(X)
        Phi = embed(self.model_.bundle, X)
        return np.column_stack([predict(self.model_.bundle, Phi, 0), predict(self.model_.bundle, Phi, 1)])

    def transform(self, X):
        """Learned representation of each row, shape (n_samples, q)."""
        return embed(self.model_.bundle, self._check_X(X))

    @property
    def domain_weights_(self):
        """Learned source weights, one row per domain (S x S, zero diagonal), or None."""
        check_is_fitted(self, "model_")
        if self.model_.state is None:
            return None
        return off_diagonal_to_full(self.model_.state.w)
