"""Component models of effect matrices: scores, loadings, augmentation, D/Q.

Effect matrices are decomposed by truncated SVD without re-centering, so the
visualized directions stay consistent with the reported sums of squares.
Scores are augmented with the term's F-ratio reference (a random term's effect
matrix, or the residuals) to show within-group spread around the level means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import DesignSpec, Term, dof_of_term, reference_term
from .errors import DegenerateDataError, InvalidDesignError
from .glm import Decomposition, decomposition_scale, negligible_ss


def _signed_svd(M: np.ndarray):
    """SVD with a deterministic sign: each loading's largest entry is positive."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    for k in range(Vt.shape[0]):
        j = np.argmax(np.abs(Vt[k]))
        if Vt[k, j] < 0:
            Vt[k] = -Vt[k]
            U[:, k] = -U[:, k]
    return U, s, Vt


@dataclass(frozen=True, eq=False)
class ScaModel:
    """Truncated component model of one term's effect matrix.

    ``scores`` projects the effect matrix alone; ``augmented_scores`` projects
    effect + augmentation so replicate spread is visible.  ``singular_values``
    always carries the term's full DoF-long spectrum for scree plots, even
    when fewer components are kept.
    """

    term: Term
    loadings: np.ndarray          # n_vars x r
    scores: np.ndarray            # n_samples x r
    augmented_scores: np.ndarray  # n_samples x r
    explained: np.ndarray         # fraction of the effect SS per component
    singular_values: np.ndarray   # DoF-long scree spectrum
    augmentation_term: Term
    effect: np.ndarray            # the modeled effect matrix itself
    effect_ss: float

    @property
    def n_components(self) -> int:
        return self.loadings.shape[1]


def fit_sca(
    d: Decomposition,
    term: Term,
    n_components: int,
    spec: DesignSpec,
    *,
    center: bool = False,
) -> ScaModel:
    """Component model of one effect matrix, augmented by its reference term.

    The component count is capped at the term's DoF.  ``center`` removes
    column means before the SVD; it exists for comparison studies only and is
    off by default so scores stay consistent with the reported SS.
    """
    if term not in d.effects:
        raise InvalidDesignError(f"decomposition has no effect matrix for {term.label!r}")
    dof = dof_of_term(spec, term)
    if n_components < 1 or n_components > dof:
        raise InvalidDesignError(
            f"term {term.label!r} supports 1..{dof} components, got {n_components}"
        )
    effect = d.effects[term]
    effect_ss = float(np.sum(effect * effect))
    if negligible_ss(effect_ss, decomposition_scale(d)):
        raise DegenerateDataError(f"effect matrix of {term.label!r} is zero")
    fit_on = effect - effect.mean(axis=0, keepdims=True) if center else effect
    _, s, Vt = _signed_svd(fit_on)
    P = Vt[:n_components].T
    scores = effect @ P
    aug_term = reference_term(spec, term)
    augmentation = d.residuals if aug_term.kind == "residual" else d.effects[aug_term]
    augmented = (effect + augmentation) @ P
    spectrum = np.zeros(dof)
    spectrum[: min(dof, len(s))] = s[: min(dof, len(s))]
    explained = (s[:n_components] ** 2) / float(np.sum(fit_on * fit_on))
    return ScaModel(
        term=term,
        loadings=P,
        scores=scores,
        augmented_scores=augmented,
        explained=explained,
        singular_values=spectrum,
        augmentation_term=aug_term,
        effect=effect,
        effect_ss=effect_ss,
    )


def dq_statistics(model: ScaModel, augmentation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample D (score-space distance) and Q (off-model residual) statistics.

    D uses the unaugmented score covariance; Q is the squared norm of what the
    loadings fail to reconstruct of effect + augmentation per sample.
    """
    T = model.scores
    gram = T.T @ T
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise DegenerateDataError(
            "singular score covariance (a component carries no variance)"
        )
    gram_inv = np.linalg.inv(gram)
    augmented_data = model.effect + np.asarray(augmentation, dtype=float)
    tau = augmented_data @ model.loadings
    d = np.einsum("ij,jk,ik->i", tau, gram_inv, tau)
    resid = augmented_data - tau @ model.loadings.T
    q = np.sum(resid * resid, axis=1)
    return d, q


@dataclass(frozen=True, eq=False)
class ResidualPcaReport:
    """Mean-centered PCA of the residual matrix, for structure hunting."""

    scores: np.ndarray
    loadings: np.ndarray
    explained: np.ndarray
    singular_values: np.ndarray
    center: np.ndarray


def residual_pca(d: Decomposition, n_components: int) -> ResidualPcaReport:
    """PCA of the residual matrix to expose correlated leftover patterns."""
    E = d.residuals
    ss = float(np.sum(E * E))
    if negligible_ss(ss, decomposition_scale(d)):
        raise DegenerateDataError("residual matrix is zero; nothing to decompose")
    center = E.mean(axis=0)
    centered = E - center
    svals = np.linalg.svd(centered, compute_uv=False)
    tol = max(centered.shape) * np.finfo(float).eps * svals[0]
    rank = int(np.sum(svals > tol))
    if n_components < 1 or n_components > rank:
        raise InvalidDesignError(
            f"residual matrix supports 1..{rank} components, got {n_components}"
        )
    _, s, Vt = _signed_svd(centered)
    P = Vt[:n_components].T
    scores = centered @ P
    explained = (s[:n_components] ** 2) / float(np.sum(centered * centered))
    return ResidualPcaReport(scores, P, explained, s, center)
