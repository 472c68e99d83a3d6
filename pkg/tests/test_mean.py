import math

import numpy as np
import pytest

from cppi.bounds import clt_bound, hoeffding_bound
from cppi.conformal import CalibratedPredictor, negative_probability_score
from cppi.datamodel import LabelSchema, identity_functional
from cppi.mean import (
    brute_force_mean_sandwich,
    multivariate_mean_ci,
    ppi_mean_ci,
    width_decomposition,
)
from cppi.simkit import (
    FiniteJoint,
    gen_classification_rows,
    gen_finite_joint,
    synthetic_classification_predictor,
)

BINARY = LabelSchema(kind="categorical", alphabet=(0, 1))
PHI01 = identity_functional(0.0, 1.0)


def oracle_predictor():
    """Singleton sets at the true label, declared err 0."""
    return synthetic_classification_predictor(2, 0.0)


def oracle_rows(rng, n, p):
    return gen_classification_rows(rng, n, [1.0 - p, p], 1.0, 0.0)


def full_set_predictor():
    return CalibratedPredictor(
        score=negative_probability_score(
            lambda X: np.column_stack([1.0 - np.asarray(X)[:, 0], np.asarray(X)[:, 0]])),
        threshold=math.inf, err=0.0, backend="split", schema=BINARY)


class TestPpiMeanCI:
    def test_oracle_predictor_matches_classical_ci(self):
        rng = np.random.default_rng(101)
        feats, labs = oracle_rows(rng, 400, 0.3)
        for method, ctor in (("clt", clt_bound), ("hoeffding", None)):
            res = ppi_mean_ci(PHI01, oracle_predictor(), feats, 0.1, method)
            if method == "clt":
                lo = clt_bound(labs, 0.05, "lower").value
                hi = clt_bound(labs, 0.05, "upper").value
            else:
                lo = hoeffding_bound(labs, 0.0, 1.0, 0.05, "lower").value
                hi = hoeffding_bound(labs, 0.0, 1.0, 0.05, "upper").value
            assert res.lo == pytest.approx(lo, abs=1e-12)
            assert res.hi == pytest.approx(hi, abs=1e-12)

    def test_full_set_predictor_gives_vacuous_interval(self):
        rng = np.random.default_rng(5)
        feats = rng.random((50, 1))
        res = ppi_mean_ci(PHI01, full_set_predictor(), feats, 0.1, "hoeffding")
        assert res.interval == (0.0, 1.0)
        assert res.lo < 0.0 < 1.0 < res.hi

    def test_no_rows_raises(self):
        with pytest.raises(ValueError, match="no unlabelled rows"):
            ppi_mean_ci(PHI01, oracle_predictor(), np.zeros((0, 3)), 0.1)

    def test_err_monotonicity_exact(self):
        rng = np.random.default_rng(11)
        feats, _ = gen_classification_rows(rng, 300, [0.6, 0.4], 0.9, 0.05)
        base = synthetic_classification_predictor(2, 0.05)
        wider = synthetic_classification_predictor(2, 0.15)
        r0 = ppi_mean_ci(PHI01, base, feats, 0.1, "clt")
        r1 = ppi_mean_ci(PHI01, wider, feats, 0.1, "clt")
        assert r1.width - r0.width == pytest.approx(2.0 * 1.0 * 0.10, abs=1e-12)

    def test_clipping_preserves_coverage_events(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            feats, _ = gen_classification_rows(rng, 40, [0.5, 0.5], 0.8, 0.1)
            res = ppi_mean_ci(PHI01, synthetic_classification_predictor(2, 0.08),
                              feats, 0.2, "hoeffding")
            truth = rng.uniform(0.0, 1.0)
            raw_contains = res.lo <= truth <= res.hi
            assert res.contains(truth) == raw_contains

    def test_monte_carlo_coverage_light(self):
        pred = synthetic_classification_predictor(2, 0.05)
        hits = 0
        trials = 300
        root = np.random.SeedSequence(2)
        for child in root.spawn(trials):
            rng = np.random.default_rng(child)
            feats, _ = gen_classification_rows(rng, 1000, [0.7, 0.3], 0.9, 0.05 / 0.9)
            hits += ppi_mean_ci(PHI01, pred, feats, 0.1, "clt").contains(0.3)
        sigma = math.sqrt(0.1 * 0.9 / trials)
        assert hits / trials >= 0.9 - 3.0 * sigma


class TestWidthDecomposition:
    def test_identity_holds_everywhere(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            err = float(rng.uniform(0.0, 0.3))
            rate = float(rng.uniform(0.5, 1.0))
            feats, _ = gen_classification_rows(rng, 50, [0.5, 0.5], rate,
                                               min(err / max(rate, 1e-9), 1.0))
            pred = synthetic_classification_predictor(2, err)
            method = "clt" if rng.random() < 0.5 else "hoeffding"
            res = ppi_mean_ci(PHI01, pred, feats, float(rng.uniform(0.02, 0.5)), method)
            dec = width_decomposition(res)
            assert abs(dec.total - res.width) <= 1e-12

    def test_oracle_hoeffding_components(self):
        rng = np.random.default_rng(19)
        feats, labs = oracle_rows(rng, 100, 0.4)
        res = ppi_mean_ci(PHI01, oracle_predictor(), feats, 0.1, "hoeffding")
        dec = width_decomposition(res)
        margin = math.sqrt(math.log(1.0 / 0.05) / (2.0 * 100))
        assert dec.hull_term == 0.0
        assert dec.penalty == 0.0
        assert dec.slack_lower == pytest.approx(margin, abs=1e-12)
        assert dec.slack_upper == pytest.approx(margin, abs=1e-12)

    def test_three_row_hand_example(self):
        # sets {0}, {0,1}, {1}: per-row hulls 0, 1, 0 -> hull term 1/3
        pred = synthetic_classification_predictor(2, 0.0)
        feats = np.array([[0.1, 0.0, 0.9], [0.95, 0.0, 0.9], [0.1, 1.0, 0.9]])
        res = ppi_mean_ci(PHI01, pred, feats, 0.1, "hoeffding")
        dec = width_decomposition(res)
        assert dec.hull_term == pytest.approx(1.0 / 3.0, abs=1e-15)


class TestMultivariate:
    def test_d1_reduction_is_bit_identical(self):
        rng = np.random.default_rng(23)
        feats, _ = gen_classification_rows(rng, 200, [0.6, 0.4], 0.9, 0.05)
        pred = synthetic_classification_predictor(2, 0.05)
        box = multivariate_mean_ci([PHI01], pred, feats, 0.1, "clt")
        scalar = ppi_mean_ci(PHI01, pred, feats, 0.1, "clt")
        assert box.coordinates[0] == scalar

    def test_identical_coordinates_square_box(self):
        rng = np.random.default_rng(29)
        feats, _ = gen_classification_rows(rng, 200, [0.6, 0.4], 0.9, 0.05)
        pred = synthetic_classification_predictor(2, 0.05)
        box = multivariate_mean_ci([PHI01, PHI01], pred, feats, 0.1, "clt")
        half = ppi_mean_ci(PHI01, pred, feats, 0.05, "clt")
        assert box.box[0] == box.box[1] == half.interval

    def test_contains_validates_dimension(self):
        rng = np.random.default_rng(31)
        feats, _ = gen_classification_rows(rng, 50, [0.6, 0.4], 0.9, 0.05)
        box = multivariate_mean_ci([PHI01], synthetic_classification_predictor(2, 0.05),
                                   feats, 0.1)
        with pytest.raises(ValueError, match="dimension"):
            box.contains([0.1, 0.2])

    def test_empty_coordinate_list(self):
        with pytest.raises(ValueError, match="at least one"):
            multivariate_mean_ci([], oracle_predictor(), np.zeros((2, 3)), 0.1)


def seeded_joint_predictor(seed, y_support):
    """Deterministic random set predictor over x-id features."""
    rng = np.random.default_rng(seed)
    table = rng.dirichlet(np.ones(y_support), size=30)

    def prob_model(X):
        idx = np.asarray(X, dtype=float)[:, 0].astype(int) % 30
        return table[idx]

    schema = LabelSchema(kind="categorical", alphabet=tuple(range(y_support)))
    return CalibratedPredictor(
        score=negative_probability_score(prob_model),
        threshold=float(rng.uniform(-0.9, -0.1)), err=float(rng.uniform(0.0, 0.3)),
        backend="split", schema=schema)


class TestBruteForceSandwich:
    def test_perfect_predictor_collapses(self):
        # deterministic label per x, predicted as a singleton: equality
        atoms = tuple((x, x % 2, 0.25) for x in range(4))
        joint = FiniteJoint(atoms=atoms)

        def prob_model(X):
            idx = np.asarray(X, dtype=float)[:, 0].astype(int)
            out = np.zeros((len(idx), 2))
            out[np.arange(len(idx)), idx % 2] = 1.0
            return out

        pred = CalibratedPredictor(score=negative_probability_score(prob_model),
                                   threshold=-0.5, err=0.0, backend="split",
                                   schema=BINARY)
        lower, truth, upper = brute_force_mean_sandwich(joint, pred, PHI01)
        assert lower == truth == upper == 0.5

    def test_full_sets_give_declared_range(self):
        joint = gen_finite_joint(3, x_support=5, y_support=2)
        pred = CalibratedPredictor(
            score=negative_probability_score(
                lambda X: np.full((np.asarray(X).shape[0], 2), 0.5)),
            threshold=math.inf, err=0.0, backend="split", schema=BINARY)
        lower, truth, upper = brute_force_mean_sandwich(joint, pred, PHI01)
        assert lower == 0.0 and upper == 1.0
        assert 0.0 <= truth <= 1.0

    def test_sandwich_on_random_joints(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            joint = gen_finite_joint(seed, x_support=int(rng.integers(2, 21)),
                                     y_support=int(rng.integers(2, 6)))
            y_support = max(y for _, y, _ in joint.atoms) + 1
            pred = seeded_joint_predictor(seed + 1000, y_support)
            phi = identity_functional(0.0, float(y_support - 1))
            lower, truth, upper = brute_force_mean_sandwich(joint, pred, phi)
            assert lower <= truth + 1e-12
            assert truth <= upper + 1e-12

    def test_support_too_large(self):
        pred = oracle_predictor()
        big = type("J", (), {"atoms": [(0, 0, 1.0 / 20000)] * 20000})()
        with pytest.raises(ValueError, match="too large"):
            brute_force_mean_sandwich(big, pred, PHI01)
