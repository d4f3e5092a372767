import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance, random_neighbor_pair
from ctmc_lab import forward
from ctmc_lab.errors import InvalidNeighbor, InvalidRate, InvalidSpec, InvalidTime
from ctmc_lab.schedule import cted_grid
from ctmc_lab.score import (
    ExactScoreProvider,
    PerturbationSpec,
    PerturbedScoreProvider,
    bregman_g,
    bregman_rows,
    eps_score,
    expected_bregman,
    keyed_normals,
    perturbed_provider,
    score_entropy_loss,
)
from ctmc_lab.state_space import DensePmf, SpaceConfig, encode, iter_states, neighbors


def bruteforce_se(q0, u, s_fn):
    """Score-entropy loss by looping over states and neighbours."""
    space = q0.space
    qu = forward.forward_marginal(q0, u)
    total = 0.0
    for x in iter_states(space):
        for y in neighbors(x, space):
            r = qu[y] / qu[x]
            s = s_fn(y, x)
            total += qu[x] * (s - r - r * math.log(s / r)) / space.S
    return total


class TestExactProvider:
    def test_table_matches_scalar_oracle(self, rng):
        space, q0 = random_instance(rng, max_size=64)
        p = ExactScoreProvider(q0)
        x, y = random_neighbor_pair(rng, space)
        i = next(j for j in range(space.d) if x[j] != y[j])
        assert p.table(0.7)[encode(x, space), i, y[i]] == pytest.approx(p.evaluate(0.7, y, x), rel=1e-12)

    def test_table_is_read_only_and_cached(self, small_space):
        p = ExactScoreProvider(DensePmf.dirichlet(small_space, 1.0, 0))
        tab = p.table(0.5)
        assert tab is p.table(0.5)
        with pytest.raises(ValueError):
            tab[0, 0, 0] = 2.0
        assert np.all(tab[small_space.self_mask] == 1.0)

    def test_clipping(self):
        space = SpaceConfig(4, 1)
        p = ExactScoreProvider(DensePmf.point_mass(space, 0), M=3.0)
        tab = p.table(0.05)
        assert tab.max() <= 3.0 and tab.min() >= 1 / 3

    def test_rejects(self, small_space):
        p = ExactScoreProvider(DensePmf.uniform(small_space))
        with pytest.raises(InvalidTime):
            p.table(0.0)
        with pytest.raises(InvalidNeighbor):
            p.evaluate(1.0, (1, 1), (0, 0))
        with pytest.raises(InvalidSpec):
            ExactScoreProvider(DensePmf.uniform(small_space), M=0.5)


class TestPerturbation:
    def test_constant_factor(self, small_space):
        base = ExactScoreProvider(DensePmf.dirichlet(small_space, 1.0, 3))
        p = perturbed_provider(base, PerturbationSpec("constant", c=2.0))
        mask = ~small_space.self_mask
        np.testing.assert_allclose(p.table(0.4)[mask], 2.0 * base.table(0.4)[mask])

    def test_identity_specs_return_base(self, small_space):
        base = ExactScoreProvider(DensePmf.uniform(small_space))
        assert perturbed_provider(base, PerturbationSpec()) is base
        assert perturbed_provider(base, PerturbationSpec("constant", c=1.0)) is base

    def test_lognormal_deterministic_in_key(self, small_space):
        base = ExactScoreProvider(DensePmf.dirichlet(small_space, 1.0, 3))
        spec = PerturbationSpec("lognormal", sigma=0.3, seed=11)
        a = PerturbedScoreProvider(base, spec).table(0.4)
        b = PerturbedScoreProvider(base, spec).table(0.4)
        c = PerturbedScoreProvider(base, PerturbationSpec("lognormal", sigma=0.3, seed=12)).table(0.4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_keyed_normals_look_standard(self):
        z = keyed_normals(5, 0.25, np.arange(200_000), np.zeros(200_000, dtype=np.int64))
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1) < 0.01

    def test_perturbed_clip_respects_M(self):
        space = SpaceConfig(3, 1)
        base = ExactScoreProvider(DensePmf.point_mass(space, 0), M=2.0)
        p = perturbed_provider(base, PerturbationSpec("constant", c=10.0))
        assert p.table(0.3).max() <= 2.0

    @pytest.mark.parametrize(
        "kw", [{"kind": "weird"}, {"kind": "constant", "c": 0.0}, {"kind": "lognormal", "sigma": -1.0}]
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(InvalidSpec):
            PerturbationSpec(**kw)

    def test_spec_roundtrip(self):
        spec = PerturbationSpec("lognormal", sigma=0.2, seed=4)
        assert PerturbationSpec.from_dict(spec.to_dict()) == spec


class TestScoreEntropy:
    def test_exact_provider_has_zero_loss(self, rng):
        for _ in range(5):
            space, q0 = random_instance(rng, max_size=64)
            assert score_entropy_loss(ExactScoreProvider(q0), q0, 0.3) < 1e-14

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_matches_bruteforce(self, rng, c):
        space, q0 = random_instance(rng, max_size=27)
        base = ExactScoreProvider(q0)
        p = perturbed_provider(base, PerturbationSpec("constant", c=c))
        u = 0.8
        ref = bruteforce_se(q0, u, lambda y, x: c * base.evaluate(u, y, x))
        assert score_entropy_loss(p, q0, u) == pytest.approx(ref, rel=1e-11)

    @given(st.floats(0.2, 5.0).filter(lambda c: abs(c - 1) > 1e-3))
    @settings(max_examples=20, deadline=None)
    def test_positive_for_wrong_scale(self, c):
        space = SpaceConfig(3, 2)
        q0 = DensePmf.dirichlet(space, 1.0, 9)
        p = perturbed_provider(ExactScoreProvider(q0), PerturbationSpec("constant", c=c))
        assert score_entropy_loss(p, q0, 0.5) > 0

    def test_eps_score_weighting(self, small_space):
        q0 = DensePmf.dirichlet(small_space, 1.0, 2)
        p = perturbed_provider(ExactScoreProvider(q0), PerturbationSpec("constant", c=2.0))
        grid = cted_grid(2.0, 0.01, 0.3)
        ref = sum(h * score_entropy_loss(p, q0, grid.T - t) for t, h in zip(grid.points, grid.steps))
        assert eps_score(p, q0, grid) == pytest.approx(ref, rel=1e-13)
        assert eps_score(ExactScoreProvider(q0), q0, grid) < 1e-14


class TestBregman:
    def test_zero_iff_equal(self, small_space):
        q0 = DensePmf.dirichlet(small_space, 1.0, 5)
        R = forward.reverse_rate_table(forward.forward_marginal(q0, 0.6).mass, small_space)
        assert np.all(bregman_rows(R, R.copy(), small_space.self_mask) < 1e-15)
        g = bregman_rows(R, 1.3 * R, small_space.self_mask)
        assert np.all(g > 0)

    def test_rejects_bad_rates(self, small_space):
        R = np.full((9, 2, 3), 0.2)
        H = R.copy()
        H[0, 0, 1] = 0.0  # state (0, 0): token 1 is a real move
        with pytest.raises(InvalidRate):
            bregman_rows(R, H, small_space.self_mask)
        with pytest.raises(InvalidRate):
            bregman_rows(R, -R, small_space.self_mask)

    def test_scalar_g_matches_callback(self, rng):
        space, q0 = random_instance(rng, max_size=27)
        p = perturbed_provider(ExactScoreProvider(q0), PerturbationSpec("constant", c=1.7))
        T, t = 2.0, 0.5
        x = tuple(int(v) for v in rng.integers(0, space.S, size=space.d))
        via_default = bregman_g(p, q0, t, T, x)
        via_cb = bregman_g(p, q0, t, T, x, sampler_rate=lambda a, b: p.evaluate(T - t, b, a) / space.S)
        assert via_default == pytest.approx(via_cb, rel=1e-12)

    @pytest.mark.parametrize("c", [1.0, 0.5, 2.0])
    def test_expectation_equals_score_entropy(self, rng, c):
        space, q0 = random_instance(rng, max_size=16, max_S=4, max_d=2)
        p = perturbed_provider(ExactScoreProvider(q0), PerturbationSpec("constant", c=c))
        T, t = 3.0, 1.1
        H = np.array(p.table(T - t)) / space.S
        H[space.self_mask] = 0.0
        assert expected_bregman(q0, t, T, H) == pytest.approx(score_entropy_loss(p, q0, T - t), abs=1e-12)
