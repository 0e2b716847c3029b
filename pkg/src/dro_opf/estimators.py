"""scikit-learn style estimators around the DRO OPF solve.

``fit(X)`` takes forecast-error samples (``n_samples x n_xi*T``) and solves
for the affine reserve policy. ``transform(X)`` returns every device's
realized inputs, ``predict(X)`` the realized risk-row values ``g_v`` (a row
is violated when positive), and ``score(X)`` the negated total empirical
CVaR over risk rows, so larger is better.

>>> est = DroOpfEstimator(model, rho=10.0, epsilon=0.04).fit(X_train)
>>> est.score(X_eval)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .assembler import RiskConfig, assemble, constraint_values, sample_costs, solve
from .dro import ForecastDataset, SupportPolytope, empirical_cvar_columns
from .network import HorizonModel, NetworkCase, validate_case


def _as_model(model) -> HorizonModel:
    if isinstance(model, HorizonModel):
        return model
    if isinstance(model, NetworkCase):
        return validate_case(model)
    raise TypeError(f"expected a HorizonModel or NetworkCase, got {type(model).__name__}")


def predicted_cvar(rows_values: np.ndarray, slopes: np.ndarray, alpha: float, epsilon: float, dual_norm) -> np.ndarray:
    """Worst-case CVaR per risk row over the Wasserstein ball around the training data.

    ``CVaR_train(g_v) + eps * ||a_v||_* / alpha`` where ``a_v`` is the row's
    xi-slope; exact for unbounded support and an upper bound otherwise.
    """
    base = empirical_cvar_columns(rows_values, alpha)
    return base + epsilon * dual_norm(slopes, axis=1) / alpha


class DroOpfEstimator(TransformerMixin, BaseEstimator):
    """Wasserstein-robust CVaR OPF; ``epsilon=0`` is the sample-average CVaR OPF."""

    def __init__(
        self,
        model=None,
        alpha: float = 0.1,
        rho: float = 1.0,
        epsilon: float = 0.0,
        ground_norm: str = "1",
        support: SupportPolytope | None = None,
        tol: float = 1e-8,
    ):
        self.model = model
        self.alpha = alpha
        self.rho = rho
        self.epsilon = epsilon
        self.ground_norm = ground_norm
        self.support = support
        self.tol = tol

    def _risk(self) -> RiskConfig:
        return RiskConfig(alpha=self.alpha, rho=self.rho, epsilon=self.epsilon, ground_norm=self.ground_norm)

    def _training_set(self, X) -> np.ndarray:
        return X

    def fit(self, X, y=None):
        X = check_array(X, dtype=float, ensure_min_samples=1)
        model = _as_model(self.model)
        if X.shape[1] != model.xi_dim:
            raise ValueError(f"X has {X.shape[1]} features, the case expects n_xi*T = {model.xi_dim}")
        risk = self._risk()
        train = self._training_set(X)
        data = ForecastDataset.from_array(train, self.support)
        self.model_ = model
        self.qp_ = assemble(model, data, risk)
        self.solution_ = solve(self.qp_, tol=self.tol)
        self.policy_ = self.solution_.policy
        self.n_features_in_ = X.shape[1]
        self.train_samples_ = train

        z = self.solution_.z
        self.slopes_ = np.array([row.coefficients(z)[0] for row in self.qp_.rows]).reshape(len(self.qp_.rows), -1)
        g_train = constraint_values(self.qp_.rows, z, train)
        self.predicted_cvar_ = predicted_cvar(g_train, self.slopes_, risk.alpha, risk.epsilon, risk.ambiguity.dual_norm)
        self.cost_term_ = self.solution_.objective.cost
        self.dro_term_ = self.solution_.objective.dro_total
        self.objective_ = self.solution_.objective.total
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "solution_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._check(X)
        return np.hstack(self.policy_.inputs(X))

    def predict(self, X):
        X = self._check(X)
        return constraint_values(self.qp_.rows, self.solution_.z, X)

    def realized_cost(self, X):
        X = self._check(X)
        return sample_costs(self.model_, self.policy_, X)

    def cvar(self, X) -> np.ndarray:
        """Empirical CVaR of every risk row on ``X``."""
        return empirical_cvar_columns(self.predict(X), self.alpha)

    def score(self, X, y=None) -> float:
        return -float(self.cvar(X).sum())

    @property
    def row_labels(self) -> list[str]:
        check_is_fitted(self, "qp_")
        return [row.label for row in self.qp_.rows]


class GaussianOpfEstimator(DroOpfEstimator):
    """Sample-average CVaR OPF on synthetic draws from a Gaussian fitted to ``X``.

    Mean and covariance use the unbiased estimator; a covariance eigenvalue
    floor of ``1e-12 * trace`` handles degenerate data. With
    ``moment_match`` the synthetic set is affinely corrected to reproduce the
    fitted moments exactly.
    """

    epsilon = 0.0
    support = None

    def __init__(
        self,
        model=None,
        alpha: float = 0.1,
        rho: float = 1.0,
        ground_norm: str = "1",
        n_synthetic: int = 1000,
        moment_match: bool = True,
        random_state=None,
        tol: float = 1e-8,
    ):
        self.model = model
        self.alpha = alpha
        self.rho = rho
        self.ground_norm = ground_norm
        self.tol = tol
        self.n_synthetic = n_synthetic
        self.moment_match = moment_match
        self.random_state = random_state

    def _training_set(self, X) -> np.ndarray:
        if X.shape[0] < 2:
            raise ValueError("the Gaussian baseline needs at least 2 samples")
        mean, cov = fit_gaussian(X)
        self.mean_, self.cov_ = mean, cov
        return gaussian_samples(mean, cov, self.n_synthetic, self.random_state, self.moment_match)


def fit_gaussian(X) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance with an eigenvalue floor."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    w, V = np.linalg.eigh(cov)
    floor = 1e-12 * max(float(np.trace(cov)), 1e-300)
    cov = (V * np.maximum(w, floor)) @ V.T
    return mean, cov


def gaussian_samples(mean, cov, count: int, random_state=None, moment_match: bool = True) -> np.ndarray:
    rng = np.random.default_rng(random_state)
    L = np.linalg.cholesky(cov)
    Z = rng.standard_normal((count, mean.size))
    if moment_match and count > mean.size:
        Z = Z - Z.mean(axis=0)
        C = np.atleast_2d(np.cov(Z, rowvar=False, ddof=1))
        Z = Z @ np.linalg.inv(np.linalg.cholesky(C)).T
    return mean + Z @ L.T
