"""Theta layout, patterned Cholesky parametrization, pack/unpack."""

import numpy as np
import pytest

import nlmebic as nb
from nlmebic.errors import NonPositiveVarianceError, PatternNotParametrizableError
from nlmebic.params import elimination_order, pack, unpack

from conftest import linear_spec


def _random_patterned_spd(rng, pattern):
    """Draw a positive-definite matrix with exactly the pattern's zero structure."""
    active = pattern.active
    m = len(active)
    pos = {k: i for i, k in enumerate(active)}
    while True:
        sd = rng.uniform(0.4, 1.5, m)
        om = np.diag(sd**2)
        for k, l in pattern.pairs:
            rho = rng.uniform(-0.6, 0.6)
            i, j = pos[k], pos[l]
            om[i, j] = om[j, i] = rho * sd[i] * sd[j]
        try:
            np.linalg.cholesky(om)
            return om
        except np.linalg.LinAlgError:
            continue


PATTERNS = [
    nb.CovariancePattern(3, (True, True, True)),
    nb.CovariancePattern(3, (True, False, True), ((0, 2),)),
    nb.CovariancePattern(3, (True, True, True), ((0, 2),)),
    nb.CovariancePattern(3, (True, True, True), ((0, 1), (0, 2))),  # star: needs reordering
    nb.CovariancePattern(3, (True, True, True), ((0, 1), (0, 2), (1, 2))),
    nb.CovariancePattern(4, (True, True, True, True), ((0, 1), (2, 3))),
]


class TestEliminationOrder:
    def test_diagonal_identity_order(self):
        p = nb.CovariancePattern(3, (True, False, True))
        assert elimination_order(p) == (0, 2)

    def test_star_pattern_reorders_hub(self):
        p = nb.CovariancePattern(3, (True, True, True), ((0, 1), (0, 2)))
        order = elimination_order(p)
        assert order[0] != 0  # eliminating the hub first would create fill

    def test_four_cycle_not_parametrizable(self):
        p = nb.CovariancePattern(4, (True,) * 4, ((0, 1), (1, 2), (2, 3), (0, 3)))
        with pytest.raises(PatternNotParametrizableError):
            elimination_order(p)

    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_zero_fill_roundtrip(self, pattern):
        # from_omega -> omega_r reproduces exactly the patterned matrix
        rng = np.random.default_rng(hash(pattern.pairs) % 2**31)
        spec = None  # direct construction below
        om = _random_patterned_spd(rng, pattern)
        theta = nb.theta_from_components(
            _spec_for(pattern), beta=np.zeros(pattern.d), omega=om,
            error_params=[0.5])
        back = theta.omega_r(_spec_for(pattern))
        np.testing.assert_allclose(back, om, rtol=0, atol=1e-12)
        # structural zeros are exact
        active = pattern.active
        pos = {k: i for i, k in enumerate(active)}
        allowed = {(pos[k], pos[l]) for k, l in pattern.pairs}
        m = len(active)
        for i in range(m):
            for j in range(i):
                if (j, i) not in allowed and (i, j) not in allowed:
                    assert back[i, j] == 0.0


def _spec_for(pattern):
    if pattern.d == 3:
        return nb.ModelSpec(structural="testpoly3",
                            transforms=("identity",) * 3,
                            covmap=nb.CovariateMap.empty(3),
                            pattern=pattern,
                            error=nb.ErrorModelSpec("additive", a=0.5))
    return nb.ModelSpec(structural="twocpt_infusion",
                        transforms=("log",) * 4,
                        covmap=nb.CovariateMap.empty(4),
                        pattern=pattern,
                        error=nb.ErrorModelSpec("additive", a=0.5))


class TestPackUnpack:
    @pytest.mark.parametrize("pattern", PATTERNS)
    def test_roundtrip_randomized(self, pattern):
        rng = np.random.default_rng(5)
        spec = _spec_for(pattern)
        for _ in range(20):
            om = _random_patterned_spd(rng, pattern)
            theta = nb.theta_from_components(
                spec, beta=rng.normal(size=pattern.d), omega=om,
                error_params=rng.uniform(0.1, 2.0, 1))
            x = pack(theta, spec)
            back = unpack(x, spec)
            np.testing.assert_allclose(back.beta, theta.beta, atol=1e-12)
            np.testing.assert_allclose(back.omega_chol, theta.omega_chol, atol=1e-12)
            np.testing.assert_allclose(back.error_params, theta.error_params,
                                       atol=1e-12)

    def test_identity_omega_maps_to_zeros(self):
        spec = linear_spec(nb.CovariancePattern(3, (True,) * 3, ((0, 1),)))
        theta = nb.theta_from_components(spec, beta=np.zeros(3),
                                         omega=np.eye(3), error_params=[1.0])
        x = pack(theta, spec)
        # log-diagonal of an identity factor is zero; off-diagonal zero
        np.testing.assert_allclose(x[3:3 + 4], 0.0, atol=1e-15)

    def test_packed_length_is_dim_theta(self):
        for pattern in PATTERNS:
            spec = _spec_for(pattern)
            dims = nb.theta_dims(spec)
            theta = nb.theta_from_components(
                spec, beta=np.zeros(pattern.d),
                omega=_random_patterned_spd(np.random.default_rng(0), pattern),
                error_params=[0.5])
            assert pack(theta, spec).size == dims.dim_theta_R + dims.dim_theta_F

    def test_boundary_theta_rejected(self):
        spec = linear_spec(nb.CovariancePattern(3, (True, False, False)))
        theta = nb.ThetaVector(beta=np.zeros(3), omega_chol=np.array([0.0]),
                               error_params=np.array([0.5]))
        with pytest.raises(NonPositiveVarianceError):
            pack(theta, spec)
        theta2 = nb.ThetaVector(beta=np.zeros(3), omega_chol=np.array([0.3]),
                                error_params=np.array([0.0]))
        with pytest.raises(NonPositiveVarianceError):
            pack(theta2, spec)


class TestThetaDoc:
    def test_correlation_value_is_a_correlation(self):
        spec = nb.parse_model_doc({
            "structural": "onecpt_oral", "random": ["ka", "k", "V"],
            "correlations": [["ka", "V"]]})
        theta = nb.initial_theta_from_doc(spec, {
            "psi": {"ka": 1.0, "k": 0.1, "V": 20.0},
            "omega_sd": {"ka": 0.2, "k": 0.1, "V": 0.3},
            "corr": [["ka", "V", 0.8]]})
        om = theta.omega_full(spec)
        assert om[0, 2] == pytest.approx(0.8 * 0.2 * 0.3, rel=1e-12)
        assert om[1, 1] == pytest.approx(0.01, rel=1e-12)
        assert om[0, 1] == 0.0

    def test_missing_psi_named(self):
        spec = nb.parse_model_doc({"structural": "onecpt_oral"})
        with pytest.raises(Exception, match="'V'"):
            nb.initial_theta_from_doc(spec, {
                "psi": {"ka": 1.0, "k": 0.1},
                "omega_sd": {"ka": 0.2, "k": 0.1, "V": 0.3}})
