"""Tests for component models of effect matrices and residual PCA."""

import numpy as np
import pytest

from ascalib import (
    DegenerateDataError,
    DesignSpec,
    Factor,
    InvalidDesignError,
    ResponseMatrix,
    build_model_matrix,
    dof_of_term,
    dq_statistics,
    fit_ols,
    fit_sca,
    parse_model_formula,
    residual_pca,
)

from util import make_oneway, random_response


@pytest.fixture
def rm_fit(rm_spec, rm_data):
    mm = build_model_matrix(rm_spec)
    return rm_spec, fit_ols(mm, rm_data)


class TestFitSca:
    def test_component_count_capped_at_dof(self, rm_fit):
        spec, d = rm_fit
        resp = spec.term_by_label("Responder")
        model = fit_sca(d, resp, 1, spec)
        assert model.n_components == 1
        with pytest.raises(InvalidDesignError, match="1..1"):
            fit_sca(d, resp, 2, spec)

    def test_nested_term_allows_up_to_its_dof(self, rm_fit):
        spec, d = rm_fit
        patient = spec.term_by_label("Patient")
        dof = dof_of_term(spec, patient)
        model = fit_sca(d, patient, dof, spec)
        assert model.n_components == dof
        with pytest.raises(InvalidDesignError):
            fit_sca(d, patient, dof + 1, spec)

    def test_augmentation_follows_reference_term(self, rm_fit):
        spec, d = rm_fit
        resp_model = fit_sca(d, spec.term_by_label("Responder"), 1, spec)
        assert resp_model.augmentation_term.label == "Patient"
        pat_model = fit_sca(d, spec.term_by_label("Patient"), 2, spec)
        assert pat_model.augmentation_term.kind == "residual"

    def test_scores_are_effect_projections(self, rm_fit):
        spec, d = rm_fit
        term = spec.term_by_label("Patient")
        model = fit_sca(d, term, 2, spec)
        assert np.allclose(model.scores, d.effects[term] @ model.loadings, atol=1e-12)
        aug = d.residuals  # reference of Patient is the residual pseudo-term
        assert np.allclose(
            model.augmented_scores, (d.effects[term] + aug) @ model.loadings,
            atol=1e-12,
        )

    def test_loadings_are_orthonormal(self, rm_fit):
        spec, d = rm_fit
        model = fit_sca(d, spec.term_by_label("Patient"), 3, spec)
        gram = model.loadings.T @ model.loadings
        assert np.allclose(gram, np.eye(3), atol=1e-10)

    def test_sign_convention_largest_loading_positive(self, rm_fit):
        spec, d = rm_fit
        model = fit_sca(d, spec.term_by_label("Patient"), 3, spec)
        for k in range(model.n_components):
            col = model.loadings[:, k]
            assert col[np.argmax(np.abs(col))] > 0

    def test_rank_one_effect_explains_everything_with_one_component(self):
        spec = make_oneway(("g1", "g2"), reps=4)  # DoF 1: rank-1 effect matrix
        mm = build_model_matrix(spec)
        Y = random_response(spec, np.random.default_rng(1), n_vars=6)
        d = fit_ols(mm, Y)
        model = fit_sca(d, spec.terms[1], 1, spec)
        assert model.explained[0] == pytest.approx(1.0, rel=1e-12)

    def test_explained_fractions_non_increasing_and_at_most_one(self, rm_fit):
        spec, d = rm_fit
        model = fit_sca(d, spec.term_by_label("Patient"), 4, spec)
        assert np.all(np.diff(model.explained) <= 1e-12)
        assert model.explained.sum() <= 1.0 + 1e-12

    def test_scree_has_dof_many_values_even_when_truncated(self, rm_fit):
        spec, d = rm_fit
        patient = spec.term_by_label("Patient")
        model = fit_sca(d, patient, 1, spec)
        assert len(model.singular_values) == dof_of_term(spec, patient)
        assert model.singular_values[0] >= model.singular_values[-1] >= 0

    def test_reconstruction_gap_equals_unused_spectrum(self, rm_fit):
        spec, d = rm_fit
        term = spec.term_by_label("Patient")
        model = fit_sca(d, term, 2, spec)
        gap = float(np.sum((d.effects[term] - model.scores @ model.loadings.T) ** 2))
        expected = model.effect_ss - float(np.sum(model.singular_values[:2] ** 2))
        assert gap == pytest.approx(expected, rel=1e-8)
        assert gap >= -1e-12

    def test_zero_effect_matrix_is_degenerate(self):
        spec = make_oneway(("g1", "g2"), reps=3)
        mm = build_model_matrix(spec)
        Y = ResponseMatrix(
            np.tile(np.arange(3.0), (spec.n_samples, 1)), ("a", "b", "c"),
            spec.sample_ids,
        )
        d = fit_ols(mm, Y)
        with pytest.raises(DegenerateDataError, match="zero"):
            fit_sca(d, spec.terms[1], 1, spec)

    def test_augmentation_never_changes_loadings_or_scores(self, rm_spec, rm_data):
        # Same data, same model; marking Patient fixed moves the reference of
        # Responder from Patient to the residuals. P and T must not move.
        all_fixed = [
            Factor(f.name, f.levels, nature="fixed", nested_in=f.nested_in)
            for f in rm_spec.factors
        ]
        spec2 = DesignSpec.from_table(
            all_fixed,
            parse_model_formula(rm_spec.pretty_formula(), all_fixed),
            {f.name: [f.levels[c] for c in rm_spec.assignments[f.name]]
             for f in rm_spec.factors},
            sample_ids=rm_spec.sample_ids,
        )
        d1 = fit_ols(build_model_matrix(rm_spec), rm_data)
        d2 = fit_ols(build_model_matrix(spec2), rm_data)
        m1 = fit_sca(d1, rm_spec.term_by_label("Responder"), 1, rm_spec)
        m2 = fit_sca(d2, spec2.term_by_label("Responder"), 1, spec2)
        assert np.allclose(m1.loadings, m2.loadings, atol=1e-12)
        assert np.allclose(m1.scores, m2.scores, atol=1e-12)
        assert m1.augmentation_term.label != m2.augmentation_term.label
        assert not np.allclose(m1.augmented_scores, m2.augmented_scores)

    def test_centered_flag_changes_fit_only_when_effects_not_centered(self):
        # Balanced design: effect matrices are column-centered, flag is a no-op.
        spec = make_oneway(("g1", "g2", "g3"), reps=3)
        mm = build_model_matrix(spec)
        Y = random_response(spec, np.random.default_rng(5), n_vars=4)
        d = fit_ols(mm, Y)
        m_raw = fit_sca(d, spec.terms[1], 2, spec)
        m_ctr = fit_sca(d, spec.terms[1], 2, spec, center=True)
        assert np.allclose(np.abs(m_raw.loadings), np.abs(m_ctr.loadings), atol=1e-9)


class TestDqStatistics:
    def test_sum_of_q_equals_truncation_residual(self, rm_fit):
        spec, d = rm_fit
        term = spec.term_by_label("Patient")
        model = fit_sca(d, term, 2, spec)
        zero_aug = np.zeros_like(d.residuals)
        _, q = dq_statistics(model, zero_aug)
        expected = model.effect_ss - float(np.sum(model.singular_values[:2] ** 2))
        assert q.sum() == pytest.approx(expected, rel=1e-8)

    def test_zero_augmentation_reproduces_scores(self, rm_fit):
        spec, d = rm_fit
        model = fit_sca(d, spec.term_by_label("Patient"), 2, spec)
        aug = np.zeros_like(d.residuals)
        dd, _ = dq_statistics(model, aug)
        gram_inv = np.linalg.inv(model.scores.T @ model.scores)
        expected = np.einsum("ij,jk,ik->i", model.scores, gram_inv, model.scores)
        assert np.allclose(dd, expected, atol=1e-10)

    def test_augmented_sample_in_span_has_zero_q(self, rm_fit):
        spec, d = rm_fit
        term = spec.term_by_label("Patient")
        model = fit_sca(d, term, 2, spec)
        # Augmentation that lands each augmented row exactly in span(P):
        target = (model.effect @ model.loadings) @ model.loadings.T
        aug = target - model.effect
        _, q = dq_statistics(model, aug)
        assert np.allclose(q, 0.0, atol=1e-16)

    def test_unit_score_gives_unit_d_contribution(self):
        spec = make_oneway(("g1", "g2"), reps=4)
        mm = build_model_matrix(spec)
        Y = random_response(spec, np.random.default_rng(2), n_vars=5)
        d = fit_ols(mm, Y)
        model = fit_sca(d, spec.terms[1], 1, spec)
        # An augmented score equal to the root-mean score norm contributes 1.
        rms = float(np.sqrt(np.mean(model.scores**2)))
        tau = np.array([rms])
        gram_inv = np.linalg.inv(model.scores.T @ model.scores)
        d_value = float(tau @ gram_inv @ tau)
        assert d_value == pytest.approx(1.0 / model.scores.shape[0], rel=1e-12)

    def test_group_means_of_augmented_scores_recover_level_scores(self):
        # Residual augmentation on a balanced one-way fit: residual cell means
        # are zero, so augmented scores average back to the level scores.
        spec = make_oneway(("g1", "g2", "g3"), reps=5)
        mm = build_model_matrix(spec)
        Y = random_response(spec, np.random.default_rng(3), n_vars=4)
        d = fit_ols(mm, Y)
        model = fit_sca(d, spec.terms[1], 2, spec)
        aug = d.residuals
        tau = (d.effects[spec.terms[1]] + aug) @ model.loadings
        codes = spec.assignments["A"]
        for g in range(3):
            got = tau[codes == g].mean(axis=0)
            want = model.scores[codes == g][0]
            assert np.allclose(got, want, atol=1e-10)


class TestResidualPca:
    def test_white_noise_spectrum_is_flat_within_envelope(self):
        # Envelope frozen from a 100-simulation run of this exact setup
        # (same generator seed): the top-to-bottom eigenvalue ratio of the
        # centered 40x12 residual PCA never exceeded 19.2; bound 25 with margin.
        spec = make_oneway(("g1", "g2"), reps=20)
        rng = np.random.default_rng(4)
        mm = build_model_matrix(spec)
        ratios = []
        for _ in range(20):
            Y = ResponseMatrix(rng.standard_normal((spec.n_samples, 12)),
                               tuple(f"v{j}" for j in range(12)), spec.sample_ids)
            d = fit_ols(mm, Y)
            rpt = residual_pca(d, 2)
            s = rpt.singular_values
            ratios.append((s[0] / s[len(s) - 1]) ** 2)
        assert max(ratios) < 25.0

    def test_planted_pattern_is_recovered(self):
        spec = make_oneway(("g1", "g2"), reps=20)
        mm = build_model_matrix(spec)
        rng = np.random.default_rng(6)
        pattern = rng.standard_normal(10)
        pattern /= np.linalg.norm(pattern)
        weights = rng.standard_normal(spec.n_samples) * 3.0
        Y = ResponseMatrix(
            np.outer(weights, pattern) + rng.standard_normal((spec.n_samples, 10)) * 0.3,
            tuple(f"v{j}" for j in range(10)), spec.sample_ids,
        )
        d = fit_ols(mm, Y)
        rpt = residual_pca(d, 1)
        corr = abs(float(np.corrcoef(rpt.loadings[:, 0], pattern)[0, 1]))
        assert corr > 0.9

    def test_zero_residuals_error(self):
        spec = make_oneway(("g1", "g2"), reps=2)
        mm = build_model_matrix(spec)
        codes = spec.assignments["A"].astype(float)
        Y = ResponseMatrix(codes[:, None].copy(), ("v",), spec.sample_ids)
        d = fit_ols(mm, Y)
        with pytest.raises(DegenerateDataError, match="residual"):
            residual_pca(d, 1)

    def test_centering_applied(self, rm_fit):
        spec, d = rm_fit
        rpt = residual_pca(d, 2)
        centered = d.residuals - d.residuals.mean(axis=0)
        assert np.allclose(rpt.scores, centered @ rpt.loadings, atol=1e-10)
