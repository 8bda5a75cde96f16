"""Numerical kernels shared by the estimators.

Least squares with cluster-robust covariance, fixed-effect absorption by
alternating projections, and binary / multinomial logit by Newton-IRLS.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.special import expit, log_expit, logsumexp

from . import errors

COLLINEARITY_TOL = 1e-9
SCORE_TOL = 1e-8
MAX_IRLS_ITER = 100
PROB_FLOOR = 1e-10
RIDGE = 1e-8


# ---------------------------------------------------------------- designs


def covariate_design(panel, names: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Unit-level covariate matrix without intercept.

    Categorical covariates expand to indicator columns for every level but the
    first observed one (the reference level), labelled ``name[level]``.
    """
    metas = {m.name: (m, v) for m, v in zip(panel.covariates, panel.x)}
    names = list(panel.covariate_names if names is None else names)
    cols, labels = [], []
    for name in names:
        if name not in metas:
            raise errors.PanelError(f"unknown covariate {name!r}")
        meta, values = metas[name]
        if meta.kind == "categorical":
            for code, level in enumerate(meta.levels[1:], start=1):
                cols.append((values == code).astype(float))
                labels.append(f"{name}[{level}]")
        else:
            cols.append(np.asarray(values, dtype=float))
            labels.append(name)
    X = np.column_stack(cols) if cols else np.empty((panel.n_units, 0))
    return X, labels


def with_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def cluster_codes(ids) -> np.ndarray:
    return np.unique(np.asarray(ids), return_inverse=True)[1].ravel()


def independent_columns(X: np.ndarray, tol: float = COLLINEARITY_TOL) -> np.ndarray:
    """Boolean mask of columns kept by left-to-right pivoting.

    A column is dropped when its diagonal entry in the triangular factor is
    below ``tol`` times the largest diagonal entry.
    """
    q = X.shape[1]
    keep = np.ones(q, dtype=bool)
    norms = np.sqrt(np.einsum("ij,ij->j", X, X))
    keep &= norms > 0
    while keep.any():
        idx = np.flatnonzero(keep)
        R = np.linalg.qr(X[:, idx], mode="r")
        d = np.abs(np.diag(R))
        bad = d <= tol * d.max()
        if bad.any():
            keep[idx[: len(d)][bad]] = False
        elif len(d) < len(idx):
            # the leading columns span every row, so the rest are dependent
            keep[idx[len(d):]] = False
        else:
            break
    return keep


# ---------------------------------------------------------------- least squares


@dataclass
class FitResult:
    """Least-squares fit.

    ``coefficients`` and ``vcov`` are indexed like the input columns; entries of
    dropped columns are NaN.
    """

    coefficients: np.ndarray
    residuals: np.ndarray
    vcov: np.ndarray | None
    labels: list[str]
    dropped_columns: list[str]
    kept: np.ndarray
    n_obs: int
    n_clusters: int

    @property
    def params(self) -> dict[str, float]:
        return {lab: float(c) for lab, c, k in zip(self.labels, self.coefficients, self.kept) if k}

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def combination(self, weights: dict[str, float]) -> tuple[float, float]:
        """Point estimate and standard error of a linear combination of coefficients."""
        w = np.zeros(len(self.labels))
        for lab, v in weights.items():
            j = self.labels.index(lab)
            if not self.kept[j]:
                raise errors.MissingCell(f"coefficient {lab} was dropped")
            w[j] = v
        k = self.kept
        est = float(w[k] @ self.coefficients[k])
        se = float(np.sqrt(max(w[k] @ self.vcov[np.ix_(k, k)] @ w[k], 0.0))) if self.vcov is not None else np.nan
        return est, se


def _cluster_sums(scores: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    return np.column_stack([np.bincount(codes, weights=scores[:, j], minlength=n_groups)
                            for j in range(scores.shape[1])])


def least_squares_fit(
    X: np.ndarray,
    y: np.ndarray,
    clusters=None,
    labels: Sequence[str] | None = None,
    compute_vcov: bool = True,
) -> FitResult:
    """OLS with deterministic collinearity dropping and CR1 covariance.

    The covariance is the cluster sandwich scaled by
    ``G/(G-1) * (n-1)/(n-q)``; with ``clusters=None`` every row is its own
    cluster, which reproduces HC1.

    Raises
    ------
    RankZero
        No usable column.
    FewerClustersThanTwo
        Covariance requested with a single cluster.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    labels = list(labels) if labels is not None else [f"x{j}" for j in range(q)]
    if len(labels) != q or len(set(labels)) != q:
        raise ValueError("column labels must be unique and match X")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("design and response must be finite")
    keep = independent_columns(X) if q else np.zeros(0, dtype=bool)
    if not keep.any():
        raise errors.RankZero("no usable columns")
    Xk = X[:, keep]
    k = Xk.shape[1]
    if n < k:
        raise errors.RankZero(f"fewer rows ({n}) than retained columns ({k})")

    R = np.linalg.qr(Xk, mode="r")
    # corrected semi-normal equations: one refinement step recovers QR accuracy
    beta = linalg.cho_solve((R, False), Xk.T @ y)
    resid = y - Xk @ beta
    beta += linalg.cho_solve((R, False), Xk.T @ resid)
    resid = y - Xk @ beta

    coef = np.full(q, np.nan)
    coef[keep] = beta
    if clusters is None:
        codes, n_groups = np.arange(n), n
    else:
        codes = cluster_codes(clusters)
        if len(codes) != n:
            raise ValueError("clusters must have one entry per row")
        n_groups = int(codes.max()) + 1
    vcov = None
    if compute_vcov:
        if n_groups < 2:
            raise errors.FewerClustersThanTwo("cluster-robust covariance needs at least two clusters")
        bread = linalg.cho_solve((R, False), np.eye(k))
        sums = _cluster_sums(Xk * resid[:, None], codes, n_groups)
        meat = sums.T @ sums
        dof = n - k
        factor = n_groups / (n_groups - 1) * ((n - 1) / dof if dof > 0 else np.inf)
        v = factor * bread @ meat @ bread
        v = (v + v.T) / 2
        vcov = np.full((q, q), np.nan)
        vcov[np.ix_(keep, keep)] = v
    return FitResult(
        coefficients=coef,
        residuals=resid,
        vcov=vcov,
        labels=labels,
        dropped_columns=[lab for lab, kk in zip(labels, keep) if not kk],
        kept=keep,
        n_obs=n,
        n_clusters=n_groups,
    )


# ---------------------------------------------------------------- fixed effects


def absorb_fixed_effects(
    X: np.ndarray,
    y: np.ndarray,
    factors: Sequence,
    tol: float = 1e-10,
    max_sweeps: int = 1000,
) -> tuple[np.ndarray, np.ndarray]:
    """Project ``X`` and ``y`` off the span of the factor indicators.

    Alternating within-group demeaning until the largest change in a sweep is
    below ``tol`` relative to the largest entry. A single factor needs one
    sweep.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    M = np.column_stack([y, X.reshape(n, -1)])
    projectors = []
    for f in factors:
        codes = cluster_codes(f)
        if len(codes) != n:
            raise ValueError("each factor needs one entry per row")
        K = int(codes.max()) + 1
        D = sparse.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, K))
        counts = np.bincount(codes, minlength=K).astype(float)
        projectors.append((D, codes, counts))

    def sweep(M):
        for D, codes, counts in projectors:
            means = (D.T @ M) / counts[:, None]
            M = M - means[codes]
        return M

    M = sweep(M)
    if len(projectors) > 1:
        for _ in range(max_sweeps - 1):
            new = sweep(M)
            scale = max(np.abs(M).max(), 1e-300)
            change = np.abs(new - M).max() / scale
            M = new
            if change < tol:
                break
        else:
            raise errors.NonConvergence(f"fixed-effect absorption did not converge in {max_sweeps} sweeps")
    return M[:, 1:], M[:, 0]


# ---------------------------------------------------------------- logit


@dataclass
class GPSModel:
    """Fitted (generalised) propensity model.

    ``coefficients`` has shape ``(q,)`` for ``link="logit"`` and
    ``(k-1, q)`` for ``link="softmax"`` (rows for every class but the
    first, which is the reference). Coefficients of dropped columns are 0.
    """

    coefficients: np.ndarray
    link: str
    classes: tuple = (0, 1)
    kept: np.ndarray | None = None
    iterations: int = 0
    converged: bool = True
    ridge: bool = False
    separated: bool = False
    covariates: tuple | None = None
    notes: list = field(default_factory=list)

    @property
    def usable_for_ipw(self) -> bool:
        return self.converged and not self.separated

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.link == "logit":
            return expit(X @ self.coefficients)
        eta = np.column_stack([np.zeros(X.shape[0]), X @ self.coefficients.T])
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def _newton_solve(H: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        c = linalg.cho_factor(H)
        return linalg.cho_solve(c, g), False
    except linalg.LinAlgError:
        Hr = H + RIDGE * np.eye(len(g))
        return linalg.solve(Hr, g, assume_a="sym"), True


def binary_logit_fit(X: np.ndarray, labels: np.ndarray, clusters=None,
                     weights: np.ndarray | None = None, strict: bool = True) -> GPSModel:
    """Bernoulli maximum likelihood by IRLS.

    Converges when the largest absolute score component, averaged over
    observations, is below 1e-8 (at most 100 iterations). ``clusters`` is
    accepted for interface symmetry; point estimates do not depend on it.

    Raises
    ------
    SingleClass
        Only one outcome value present.
    QuasiSeparation
        A fitted probability leaves ``(1e-10, 1 - 1e-10)``. With
        ``strict=False`` iterations continue for the identified directions and
        the model is returned flagged ``separated``.
    """
    X = np.asarray(X, dtype=float)
    yv = np.asarray(labels, dtype=float)
    w = np.ones(len(yv)) if weights is None else np.asarray(weights, dtype=float)
    present = np.unique(yv[w > 0])
    if len(present) < 2:
        raise errors.SingleClass("binary logit needs both classes")
    keep = independent_columns(X * np.sqrt(w)[:, None])
    Xk = X[:, keep]
    total = w.sum()
    beta = np.zeros(Xk.shape[1])
    ll = -np.inf
    ridge = separated = converged = False
    it = 0
    for it in range(1, MAX_IRLS_ITER + 1):
        eta = Xk @ beta
        p = expit(eta)
        score = Xk.T @ (w * (yv - p))
        if np.abs(score).max() / total < SCORE_TOL:
            converged = True
            break
        H = (Xk * (w * p * (1 - p))[:, None]).T @ Xk
        step, used_ridge = _newton_solve(H, score)
        ridge |= used_ridge
        # step halving keeps the log-likelihood monotone
        for _ in range(30):
            cand = beta + step
            e = Xk @ cand
            new_ll = float(w @ (yv * log_expit(e) + (1 - yv) * log_expit(-e)))
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            step /= 2
        beta, ll = cand, new_ll
        p = expit(Xk @ beta)
        if p.min() < PROB_FLOOR or p.max() > 1 - PROB_FLOOR:
            separated = True
            if strict:
                break
    coef = np.zeros(X.shape[1])
    coef[keep] = beta
    model = GPSModel(coef, "logit", kept=keep, iterations=it, converged=converged,
                     ridge=ridge, separated=separated)
    if ridge:
        model.notes.append("ridge fallback on singular Hessian")
    if separated:
        model.notes.append("quasi-separation: probabilities capped")
        if strict:
            raise errors.QuasiSeparation("fitted probabilities reached the boundary", model=model)
    return model


def multinomial_logit_fit(X: np.ndarray, labels: np.ndarray, classes: Sequence | None = None,
                          weights: np.ndarray | None = None, strict: bool = True) -> GPSModel:
    """Softmax maximum likelihood by Newton's method.

    The first class (sorted, or the first of ``classes``) is the reference.
    Convergence and separation rules match :func:`binary_logit_fit`.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    classes = tuple(np.unique(labels)) if classes is None else tuple(classes)
    k = len(classes)
    if k < 2:
        raise errors.SingleClass("multinomial logit needs at least two classes")
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=float)
    Y = np.column_stack([(labels == c).astype(float) for c in classes])
    if (Y[w > 0].sum(axis=0) == 0).any():
        missing = [c for c, s in zip(classes, Y[w > 0].sum(axis=0)) if s == 0]
        raise errors.MissingClass(f"classes absent from the data: {missing}")
    keep = independent_columns(X * np.sqrt(w)[:, None])
    Xk = X[:, keep]
    q = Xk.shape[1]
    total = w.sum()
    B = np.zeros((k - 1, q))

    def loglik(B):
        eta = np.column_stack([np.zeros(len(Xk)), Xk @ B.T])
        return float(w @ (Y * (eta - logsumexp(eta, axis=1, keepdims=True))).sum(axis=1))

    def probs(B):
        eta = np.column_stack([np.zeros(len(Xk)), Xk @ B.T])
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))

    ll = loglik(B)
    ridge = separated = converged = False
    it = 0
    for it in range(1, MAX_IRLS_ITER + 1):
        P = probs(B)
        G = ((Y - P)[:, 1:] * w[:, None]).T @ Xk  # (k-1, q)
        if np.abs(G).max() / total < SCORE_TOL:
            converged = True
            break
        H = np.empty(((k - 1) * q, (k - 1) * q))
        for j in range(1, k):
            for m in range(j, k):
                wjm = P[:, j] * ((j == m) - P[:, m]) * w
                block = (Xk * wjm[:, None]).T @ Xk
                H[(j - 1) * q:j * q, (m - 1) * q:m * q] = block
                H[(m - 1) * q:m * q, (j - 1) * q:j * q] = block.T
        step, used_ridge = _newton_solve(H, G.ravel())
        ridge |= used_ridge
        step = step.reshape(k - 1, q)
        for _ in range(30):
            cand = B + step
            new_ll = loglik(cand)
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            step /= 2
        B, ll = cand, new_ll
        P = probs(B)
        if P.min() < PROB_FLOOR or P.max() > 1 - PROB_FLOOR:
            separated = True
            if strict:
                break
    coef = np.zeros((k - 1, X.shape[1]))
    coef[:, keep] = B
    model = GPSModel(coef, "softmax", classes=classes, kept=keep, iterations=it,
                     converged=converged, ridge=ridge, separated=separated)
    if separated and strict:
        raise errors.QuasiSeparation("fitted class probabilities reached the boundary", model=model)
    return model
