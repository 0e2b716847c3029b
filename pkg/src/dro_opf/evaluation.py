"""Out-of-sample evaluation, baselines, tradeoff sweeps and sampling-error studies.

Summary risk numbers (``pred_cvar``, ``oos_cvar``) are the sum over risk rows
of the per-row CVaR: the same quantity the optimizer trades against cost.
Per-row values are kept in the report objects.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone

from .assembler import RiskConfig, constraint_values, risk_rows, sample_costs
from .dro import ForecastDataset, empirical_cvar_columns
from .estimators import DroOpfEstimator, GaussianOpfEstimator
from .network import HorizonModel
from .policy import AffinePolicy, PolicyLayout
from .qp import QpSolveError

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = [
    "method",
    "trial",
    "rho_index",
    "rho",
    "epsilon",
    "train_size",
    "status",
    "objective",
    "cost_term",
    "dro_term",
    "pred_cvar",
    "oos_cvar",
    "oos_cvar_worst_row",
    "oos_violation_prob",
    "oos_mean_cost",
    "error",
]

STUDY_COLUMNS = ["size", "trial", "epsilon", "status", "pred_cvar", "realized_cvar", "underestimated"]


@dataclass(frozen=True)
class EvaluationReport:
    labels: list[str]
    cvar: np.ndarray
    violation_prob: np.ndarray
    mean_margin: np.ndarray
    mean_cost: float
    n_samples: int
    seed: int | None = None

    @property
    def total_cvar(self) -> float:
        return float(self.cvar.sum())

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total_cvar"] = self.total_cvar
        return d


def _row_fingerprints(X: np.ndarray) -> set[str]:
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    return {hashlib.sha1(row.tobytes()).hexdigest() for row in X}


def out_of_sample_eval(
    model: HorizonModel,
    policy: AffinePolicy,
    eval_data: ForecastDataset | np.ndarray,
    alpha: float,
    train_data: ForecastDataset | np.ndarray | None = None,
    seed: int | None = None,
) -> EvaluationReport:
    """Empirical CVaR, violation probability and cost of a policy on held-out samples."""
    X = eval_data.samples if isinstance(eval_data, ForecastDataset) else np.atleast_2d(np.asarray(eval_data, dtype=float))
    if X.shape[1] != model.xi_dim:
        raise ValueError(f"evaluation data has {X.shape[1]} columns, case expects {model.xi_dim}")
    if train_data is not None:
        Xt = train_data.samples if isinstance(train_data, ForecastDataset) else np.asarray(train_data)
        shared = _row_fingerprints(X) & _row_fingerprints(Xt)
        if shared:
            raise ValueError(f"evaluation and training data share {len(shared)} samples")
    layout = PolicyLayout.for_model(model)
    rows = risk_rows(model, layout)
    g = constraint_values(rows, layout.pack(policy), X)
    return EvaluationReport(
        labels=[r.label for r in rows],
        cvar=empirical_cvar_columns(g, alpha),
        violation_prob=(g > 0).mean(axis=0),
        mean_margin=g.mean(axis=0),
        mean_cost=float(sample_costs(model, policy, X).mean()),
        n_samples=int(X.shape[0]),
        seed=seed,
    )


def gaussian_baseline(
    model: HorizonModel,
    data: ForecastDataset,
    risk: RiskConfig,
    n_synthetic: int = 1000,
    seed: int | None = 0,
) -> GaussianOpfEstimator:
    """Fit a Gaussian to ``data`` and solve the sample-average problem on synthetic draws."""
    est = GaussianOpfEstimator(
        model=model, alpha=risk.alpha, rho=risk.rho, ground_norm=risk.ground_norm,
        n_synthetic=n_synthetic, random_state=seed,
    )
    return est.fit(data.samples)


@dataclass(frozen=True)
class SyntheticErrorConfig:
    """Zero-mean two-component Gaussian scale mixture.

    A fraction ``weight`` of draws comes from the wide component whose scale
    is ``scale_ratio`` times the narrow one; both are normalized so the
    mixture has standard deviation ``sigma``. ``time_correlation`` applies an
    AR(1) recursion across columns with unchanged marginals.
    """

    sigma: float = 300.0
    dim: int = 1
    weight: float = 0.4
    scale_ratio: float = 6.0
    time_correlation: float = 0.0
    seed: int | None = 0

    def scales(self) -> tuple[float, float]:
        w, r = self.weight, self.scale_ratio
        narrow = 1.0 / np.sqrt(1.0 - w + w * r * r)
        return narrow * self.sigma, r * narrow * self.sigma

    @property
    def excess_kurtosis(self) -> float:
        w, r = self.weight, self.scale_ratio
        s1 = 1.0 / np.sqrt(1.0 - w + w * r * r)
        return 3.0 * ((1 - w) * s1**4 + w * (r * s1) ** 4) - 3.0


def synth_errors(config: SyntheticErrorConfig, count: int) -> ForecastDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= config.weight <= 1.0 or config.scale_ratio <= 0 or config.sigma < 0:
        raise ValueError(f"invalid mixture parameters {config}")
    rng = np.random.default_rng(config.seed)
    narrow, wide = config.scales()
    z = rng.standard_normal((count, config.dim))
    comp = rng.random((count, config.dim)) < config.weight
    x = z * np.where(comp, wide, narrow)
    phi = config.time_correlation
    if phi:
        if not -1.0 < phi < 1.0:
            raise ValueError("time_correlation must lie in (-1, 1)")
        for t in range(1, config.dim):
            x[:, t] = phi * x[:, t - 1] + np.sqrt(1.0 - phi * phi) * x[:, t]
    return ForecastDataset.from_array(x)


def persistence_errors(series, sigma: float | None = None) -> np.ndarray:
    """Errors of the persistence forecast (next value = last value) for a measurement series.

    With ``sigma`` the errors are shifted to zero mean and scaled to that
    standard deviation.
    """
    s = np.asarray(series, dtype=float).ravel()
    if s.size < 2:
        raise ValueError("need at least two measurements")
    err = np.diff(s)
    if sigma is not None:
        err = err - err.mean()
        sd = err.std(ddof=1) if err.size > 1 else 0.0
        err = err * (sigma / sd) if sd > 0 else err
    return err


def error_windows(errors, horizon: int) -> np.ndarray:
    """Stack consecutive errors into ``(N, horizon)`` rows (one column per step)."""
    e = np.asarray(errors, dtype=float).ravel()
    if horizon < 1 or e.size < horizon:
        raise ValueError("series shorter than the horizon")
    return np.lib.stride_tricks.sliding_window_view(e, horizon).copy()


def split_dataset(data: ForecastDataset, eval_size: int, seed: int = 0) -> tuple[ForecastDataset, ForecastDataset]:
    """Disjoint (train pool, evaluation) split by a seeded permutation."""
    if not 0 < eval_size < data.n_samples:
        raise ValueError(f"eval size must lie in (0, {data.n_samples})")
    perm = np.random.default_rng(seed).permutation(data.n_samples)
    return data.subset(np.sort(perm[eval_size:])), data.subset(np.sort(perm[:eval_size]))


def subsample(data: ForecastDataset, size: int | None, rng: np.random.Generator) -> ForecastDataset:
    if size is None or size >= data.n_samples:
        return data
    return data.subset(np.sort(rng.choice(data.n_samples, size=size, replace=False)))


@dataclass
class SweepRecord:
    method: str
    trial: int
    rho_index: int
    rho: float
    epsilon: float
    train_size: int
    status: str = "solved"
    objective: float = float("nan")
    cost_term: float = float("nan")
    dro_term: float = float("nan")
    pred_cvar: float = float("nan")
    oos_cvar: float = float("nan")
    oos_cvar_worst_row: float = float("nan")
    oos_violation_prob: float = float("nan")
    oos_mean_cost: float = float("nan")
    error: str = ""
    pred_cvar_rows: list[float] = field(default_factory=list)
    oos_cvar_rows: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _fit_record(est, base: SweepRecord, train: ForecastDataset, eval_X: np.ndarray | None) -> SweepRecord:
    rec = SweepRecord(**{k: v for k, v in base.as_dict().items()})
    try:
        est.fit(train.samples)
    except (QpSolveError, ValueError) as exc:
        rec.status, rec.error = "failed", str(exc)
        logger.warning("sweep point %s rho=%g eps=%g failed: %s", rec.method, rec.rho, rec.epsilon, exc)
        return rec
    rec.status = est.solution_.status.status
    rec.objective = est.objective_
    rec.cost_term = est.cost_term_
    rec.dro_term = est.dro_term_
    rec.pred_cvar_rows = est.predicted_cvar_.tolist()
    rec.pred_cvar = float(est.predicted_cvar_.sum())
    if eval_X is not None:
        cv = est.cvar(eval_X)
        g = est.predict(eval_X)
        rec.oos_cvar_rows = cv.tolist()
        rec.oos_cvar = float(cv.sum())
        rec.oos_cvar_worst_row = float(cv.max())
        rec.oos_violation_prob = float((g > 0).mean(axis=0).max())
        rec.oos_mean_cost = float(est.realized_cost(eval_X).mean())
    return rec


def tradeoff_sweep(
    model: HorizonModel,
    data: ForecastDataset,
    alpha: float,
    rho_grid: Sequence[float],
    epsilon_grid: Sequence[float],
    eval_data: ForecastDataset | None = None,
    *,
    train_size: int | None = None,
    trial: int = 0,
    seed: int = 0,
    include_gaussian: bool = False,
    n_synthetic: int = 1000,
    ground_norm: str = "1",
    n_jobs: int | None = None,
) -> list[SweepRecord]:
    """One solve per ``(rho, epsilon)`` grid point, evaluated out of sample.

    For each ``rho`` index a fresh training subsample of ``train_size`` rows
    is drawn without replacement (seeded by ``(seed, rho_index, trial)``) and
    shared by every ``epsilon`` and the Gaussian baseline at that ``rho``.
    Failed points are recorded with ``status="failed"``.
    """
    if not len(rho_grid) or not len(epsilon_grid):
        raise ValueError("rho and epsilon grids must be non-empty")
    eval_X = None if eval_data is None else eval_data.samples
    proto = DroOpfEstimator(model=model, alpha=alpha, ground_norm=ground_norm)
    jobs = []
    for i, rho in enumerate(rho_grid):
        train = subsample(data, train_size, np.random.default_rng([seed, i, trial]))
        for eps in epsilon_grid:
            base = SweepRecord("dro", trial, i, float(rho), float(eps), train.n_samples)
            jobs.append((clone(proto).set_params(rho=float(rho), epsilon=float(eps)), base, train))
        if include_gaussian:
            gauss = GaussianOpfEstimator(
                model=model, alpha=alpha, rho=float(rho), ground_norm=ground_norm,
                n_synthetic=n_synthetic, random_state=[seed, i, trial, 1],
            )
            jobs.append((gauss, SweepRecord("gaussian", trial, i, float(rho), 0.0, train.n_samples), train))
    return list(Parallel(n_jobs=n_jobs)(delayed(_fit_record)(est, base, train, eval_X) for est, base, train in jobs))


@dataclass
class StudyRecord:
    size: int
    trial: int
    epsilon: float
    status: str
    pred_cvar: float
    realized_cvar: float

    @property
    def underestimated(self) -> bool:
        return self.pred_cvar < self.realized_cvar

    def as_dict(self) -> dict:
        d = asdict(self)
        d["underestimated"] = self.underestimated
        return d


def _study_point(est, size, trial, eps, train, eval_X) -> StudyRecord:
    try:
        est.fit(train.samples)
    except (QpSolveError, ValueError) as exc:
        logger.warning("study point size=%d trial=%d eps=%g failed: %s", size, trial, eps, exc)
        return StudyRecord(size, trial, eps, "failed", float("nan"), float("nan"))
    return StudyRecord(size, trial, eps, est.solution_.status.status, float(est.predicted_cvar_.sum()), float(est.cvar(eval_X).sum()))


def sampling_error_study(
    model: HorizonModel,
    data: ForecastDataset,
    risk: RiskConfig,
    sizes: Sequence[int],
    trials: int,
    eval_data: ForecastDataset,
    epsilons: Sequence[float] | None = None,
    seed: int = 0,
    n_jobs: int | None = None,
) -> list[StudyRecord]:
    """Predicted vs realized CVaR over repeated small-sample trainings.

    Each ``(size, trial)`` draws one subsample (seeded by ``(seed, size,
    trial)``) shared across ``epsilons``, so radii are compared on the same data.
    """
    epsilons = [risk.epsilon] if epsilons is None else list(epsilons)
    for n in sizes:
        if n > data.n_samples:
            raise ValueError(f"size {n} exceeds the {data.n_samples} available samples")
    proto = DroOpfEstimator(model=model, alpha=risk.alpha, rho=risk.rho, ground_norm=risk.ground_norm)
    jobs = []
    for n in sizes:
        for t in range(trials):
            train = subsample(data, n, np.random.default_rng([seed, n, t]))
            for eps in epsilons:
                jobs.append((clone(proto).set_params(epsilon=float(eps)), n, t, float(eps), train))
    return list(
        Parallel(n_jobs=n_jobs)(delayed(_study_point)(est, n, t, e, tr, eval_data.samples) for est, n, t, e, tr in jobs)
    )


def underestimation_frequency(records: Sequence[StudyRecord]) -> dict[tuple[int, float], float]:
    """Fraction of solved trials whose predicted CVaR is below the realized one."""
    groups: dict[tuple[int, float], list[bool]] = {}
    for r in records:
        if r.status == "solved":
            groups.setdefault((r.size, r.epsilon), []).append(r.underestimated)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}
