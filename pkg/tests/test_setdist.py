"""Distance tests: Chamfer, assignment, exact transport, bound checker.

Small-instance references: exhaustive K! permutation scan, and LP vertex
enumeration over the transportation polytope (every basis of size
K_I + K_J - 1).
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from bagofbags.setdist import (
    DistanceMatrix,
    METHOD_IDS,
    chamfer,
    cost_matrix,
    emd,
    hungarian,
    pairwise_distances,
    prop1_check,
    read_distances,
    w1_uniform,
    write_distances,
)
from bagofbags.vocab import BobVocabulary, KMeansConfig, build_vocab


# ---------------------------------------------------------------- oracles


def oracle_assignment(C: np.ndarray):
    """Exhaustive minimum over all permutations (square) or injections
    of rows into columns (rows < cols)."""
    n, m = C.shape
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(m), n):
        tot = sum(C[i, perm[i]] for i in range(n))
        if tot < best:
            best, best_perm = tot, perm
    return best / n, best_perm


def oracle_transport_vertices(C: np.ndarray, pi: np.ndarray, rho: np.ndarray) -> float:
    """Optimal transport cost by enumerating every basic solution of the
    transportation polytope (subsets of K_I + K_J - 1 cells)."""
    nI, nJ = C.shape
    A = np.zeros((nI + nJ, nI * nJ))
    for i in range(nI):
        A[i, i * nJ : (i + 1) * nJ] = 1.0
    for j in range(nJ):
        A[nI + j, j::nJ] = 1.0
    b = np.concatenate([pi, rho])
    c = C.ravel()
    m = nI + nJ - 1
    best = np.inf
    for cols in itertools.combinations(range(nI * nJ), m):
        Asub = A[:, cols]
        x, _, rank, _ = np.linalg.lstsq(Asub, b, rcond=None)
        if rank < m:
            continue
        if np.abs(Asub @ x - b).max() > 1e-9:
            continue
        if (x < -1e-9).any():
            continue
        best = min(best, float(c[list(cols)] @ x))
    return best


def bag(points, masses=None, page_id="v") -> BobVocabulary:
    """Distance-test helper: a bag with given support and masses."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float32))
    K = pts.shape[0]
    masses = np.full(K, 1.0 / K) if masses is None else np.asarray(masses, dtype=np.float64)
    return BobVocabulary(
        page_id=page_id,
        prototypes=pts,
        masses=masses,
        populations=np.zeros(K, dtype=np.uint32),
        n_components=0,
        quant_error=0.0,
    )


def random_bag(rng, K, d=4):
    return bag(rng.normal(size=(K, d)), page_id="r")


# ---------------------------------------------------------------- chamfer


class TestChamfer:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(211)
        V = random_bag(rng, 6)
        assert chamfer(V, V) == 0.0

    def test_singletons(self):
        assert chamfer(bag([[0.0, 0.0]]), bag([[3.0, 4.0]])) == pytest.approx(5.0)

    def test_two_point_toys(self):
        # directed means: ((0 + 3)/2 + (0 + 3)/2) / 2 = 1.5
        V = bag([[0.0, 0.0], [4.0, 0.0]])
        W = bag([[0.0, 0.0], [4.0, 3.0]])
        assert chamfer(V, W) == pytest.approx(1.5)
        # moving the second point to (0, 3) makes the directions differ:
        # ((0 + 4)/2 + (0 + 3)/2) / 2 = 1.75
        W2 = bag([[0.0, 0.0], [0.0, 3.0]])
        assert chamfer(V, W2) == pytest.approx(1.75)

    def test_symmetric_and_mass_blind(self):
        rng = np.random.default_rng(223)
        V = random_bag(rng, 5)
        W = random_bag(rng, 5)
        assert chamfer(V, W) == pytest.approx(chamfer(W, V), rel=1e-12)
        skew = bag(W.prototypes, masses=np.array([0.9, 0.05, 0.03, 0.01, 0.01]))
        assert chamfer(V, skew) == chamfer(V, W)

    def test_triangle_inequality_violation_witness(self):
        # frozen witness found by random search: 1-d two-point bags
        A = bag([[0.0], [1.0]])
        B = bag([[0.0], [10.0]])
        C = bag([[10.0], [11.0]])
        d_ab = chamfer(A, B)
        d_bc = chamfer(B, C)
        d_ac = chamfer(A, C)
        assert d_ab == pytest.approx(2.5)
        assert d_bc == pytest.approx(2.75)
        assert d_ac == pytest.approx(9.5)
        assert d_ac > d_ab + d_bc

    def test_unequal_bag_sizes(self):
        V = bag([[0.0], [2.0], [4.0]])
        W = bag([[0.0], [4.0]])
        # V->W means (0, 2, 0) -> 2/3; W->V -> 0
        assert chamfer(V, W) == pytest.approx(0.5 * (2.0 / 3.0))


# ---------------------------------------------------------------- hungarian


class TestHungarian:
    def test_self_distance_zero_identity_optimal(self):
        rng = np.random.default_rng(227)
        V = random_bag(rng, 7)
        res = hungarian(V, V)
        assert res.distance == pytest.approx(0.0, abs=1e-12)
        assert np.array_equal(res.permutation, np.arange(7))

    def test_two_by_two_frozen_cost(self):
        # cost [[1,2],[3,1]]: identity = 1+1, swap = 2+3 -> distance 1
        from bagofbags.setdist import _solve_assignment

        cost = [[1.0, 2.0], [3.0, 1.0]]
        row_to_col = _solve_assignment(cost, 2, 2)
        assert row_to_col == [0, 1]
        total = sum(cost[i][row_to_col[i]] for i in range(2))
        assert total / 2 == pytest.approx(1.0)

    def test_matches_factorial_oracle(self):
        rng = np.random.default_rng(229)
        for trial in range(25):
            K = int(rng.integers(2, 8))
            V, W = random_bag(rng, K), random_bag(rng, K)
            res = hungarian(V, W)
            C = cost_matrix(V.prototypes, W.prototypes)
            want, _ = oracle_assignment(C)
            assert res.distance == pytest.approx(want, rel=1e-12), f"trial {trial}"
            got = sum(C[i, res.permutation[i]] for i in range(K)) / K
            assert got == pytest.approx(res.distance, rel=1e-12)
            assert sorted(res.permutation) == list(range(K))

    def test_symmetry(self):
        rng = np.random.default_rng(233)
        V, W = random_bag(rng, 6), random_bag(rng, 6)
        assert hungarian(V, W).distance == pytest.approx(hungarian(W, V).distance, rel=1e-12)

    def test_unequal_sizes_require_flag(self):
        V, W = bag([[0.0]]), bag([[0.0], [5.0]])
        with pytest.raises(ValueError, match="bag sizes differ"):
            hungarian(V, W)
        assert hungarian(V, W, allow_unequal=True).distance == pytest.approx(0.0)
        assert hungarian(W, V, allow_unequal=True).distance == pytest.approx(0.0)

    def test_rectangular_matches_injection_oracle(self):
        rng = np.random.default_rng(239)
        for trial in range(10):
            V, W = random_bag(rng, 3), random_bag(rng, 5)
            res = hungarian(V, W, allow_unequal=True)
            want, _ = oracle_assignment(cost_matrix(V.prototypes, W.prototypes))
            assert res.distance == pytest.approx(want, rel=1e-12), f"trial {trial}"

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(241)
        for trial in range(30):
            A, B, C = (random_bag(rng, 5) for _ in range(3))
            ab = hungarian(A, B).distance
            bc = hungarian(B, C).distance
            ac = hungarian(A, C).distance
            assert ac <= ab + bc + 1e-9, f"trial {trial}"


# ---------------------------------------------------------------- transport


class TestEmd:
    def test_identical_bags(self):
        rng = np.random.default_rng(251)
        V = random_bag(rng, 5)
        res = emd(V, V)
        assert res.distance == pytest.approx(0.0, abs=1e-10)

    def test_singletons(self):
        V = bag([[0.0, 0.0]], masses=[1.0])
        W = bag([[3.0, 4.0]], masses=[1.0])
        res = emd(V, W)
        assert res.distance == pytest.approx(5.0)
        assert res.plan.matrix == pytest.approx(np.array([[1.0]]))

    def test_matches_vertex_enumeration_2x2(self):
        rng = np.random.default_rng(257)
        for trial in range(20):
            V = bag(rng.normal(size=(2, 3)), masses=_rational_masses(rng, 2))
            W = bag(rng.normal(size=(2, 3)), masses=_rational_masses(rng, 2))
            C = cost_matrix(V.prototypes, W.prototypes)
            want = oracle_transport_vertices(C, V.masses, W.masses)
            assert emd(V, W).distance == pytest.approx(want, abs=1e-8), f"trial {trial}"

    def test_matches_vertex_enumeration_3x3(self):
        rng = np.random.default_rng(263)
        for trial in range(8):
            V = bag(rng.normal(size=(3, 2)), masses=_rational_masses(rng, 3))
            W = bag(rng.normal(size=(3, 2)), masses=_rational_masses(rng, 3))
            C = cost_matrix(V.prototypes, W.prototypes)
            want = oracle_transport_vertices(C, V.masses, W.masses)
            assert emd(V, W).distance == pytest.approx(want, abs=1e-8), f"trial {trial}"

    def test_plan_feasibility(self):
        rng = np.random.default_rng(269)
        for trial in range(10):
            V = random_bag(rng, int(rng.integers(2, 9)))
            W = random_bag(rng, int(rng.integers(2, 9)))
            plan = emd(V, W).plan
            assert np.abs(plan.matrix.sum(axis=1) - plan.row_marginals).max() <= 1e-8
            assert np.abs(plan.matrix.sum(axis=0) - plan.col_marginals).max() <= 1e-8
            assert (plan.matrix >= -1e-8).all()

    def test_zero_mass_rows_ignored(self):
        rng = np.random.default_rng(271)
        W = random_bag(rng, 4)
        pts = rng.normal(size=(3, 4)).astype(np.float32)
        V = bag(pts, masses=[0.5, 0.5, 0.0])
        far = np.vstack([pts[:2], np.full((1, 4), 1e6, dtype=np.float32)])
        V_far = bag(far, masses=[0.5, 0.5, 0.0])
        assert emd(V, W).distance == pytest.approx(emd(V_far, W).distance, rel=1e-12)

    def test_mass_sum_mismatch(self):
        V = bag([[0.0], [1.0]], masses=[0.5, 0.3])
        W = bag([[0.0], [1.0]], masses=[0.5, 0.5])
        with pytest.raises(ValueError, match="mass sums differ"):
            emd(V, W)
        # within tolerance: renormalized, no error
        V_ok = bag([[0.0], [1.0]], masses=[0.5, 0.5 + 5e-7])
        assert emd(V_ok, W).distance >= 0.0

    def test_uniform_equal_size_reduces_to_assignment(self):
        rng = np.random.default_rng(277)
        for trial in range(10):
            K = int(rng.integers(2, 7))
            V, W = random_bag(rng, K), random_bag(rng, K)
            assert emd(V, W).distance == pytest.approx(
                hungarian(V, W).distance, abs=1e-8
            ), f"trial {trial}"


def _rational_masses(rng, K, denom=16):
    cuts = np.sort(rng.choice(np.arange(1, denom), size=K - 1, replace=False))
    parts = np.diff(np.concatenate([[0], cuts, [denom]]))
    return parts / denom


class TestW1Uniform:
    def test_same_multiset(self):
        pts = np.array([[0.0, 1.0], [2.0, 3.0], [0.0, 1.0]])
        assert w1_uniform(pts, pts.copy()) == pytest.approx(0.0, abs=1e-10)

    def test_two_points_on_line(self):
        assert w1_uniform(np.array([[0.0]]), np.array([[1.0]])) == pytest.approx(1.0)

    def test_unequal_sizes(self):
        # mass 1/2 at each of {0, 4} vs mass 1 at {1}: cost 0.5*1 + 0.5*3
        a = np.array([[0.0], [4.0]])
        b = np.array([[1.0]])
        assert w1_uniform(a, b) == pytest.approx(2.0)

    def test_equal_size_matches_assignment(self):
        rng = np.random.default_rng(281)
        pts_a = rng.normal(size=(5, 3)).astype(np.float32)
        pts_b = rng.normal(size=(5, 3)).astype(np.float32)
        want = hungarian(bag(pts_a), bag(pts_b)).distance
        assert w1_uniform(pts_a, pts_b) == pytest.approx(want, abs=1e-8)


# ---------------------------------------------------------------- scaling


class TestScaleEquivariance:
    def test_all_three_distances_scale(self):
        rng = np.random.default_rng(283)
        V, W = random_bag(rng, 5), random_bag(rng, 5)
        for s in (2.0, 3.7):
            Vs = bag(V.prototypes * np.float32(s), masses=V.masses)
            Ws = bag(W.prototypes * np.float32(s), masses=W.masses)
            rel = 1e-12 if s == 2.0 else 1e-6
            assert chamfer(Vs, Ws) == pytest.approx(s * chamfer(V, W), rel=rel)
            assert hungarian(Vs, Ws).distance == pytest.approx(
                s * hungarian(V, W).distance, rel=rel
            )
            assert emd(Vs, Ws).distance == pytest.approx(s * emd(V, W).distance, rel=max(rel, 1e-9))


# ---------------------------------------------------------------- bound


class TestProp1:
    def _page(self, rng, n=40, d=6):
        return rng.normal(size=(n, d)).astype(np.float32)

    def test_zero_quantization_error_forces_equality(self):
        rng = np.random.default_rng(293)
        emb_I, emb_J = self._page(rng, n=12), self._page(rng, n=12)
        cfg = KMeansConfig(K=12, seed=0)
        res = prop1_check(emb_I, emb_J, build_vocab(emb_I, cfg, "I"), build_vocab(emb_J, cfg, "J"))
        assert res.bound == pytest.approx(0.0, abs=1e-9)
        assert res.lhs == pytest.approx(0.0, abs=1e-6)
        assert res.holds

    def test_identical_pages(self):
        rng = np.random.default_rng(307)
        emb = self._page(rng)
        cfg = KMeansConfig(K=5, seed=0)
        V = build_vocab(emb, cfg, "I")
        res = prop1_check(emb, emb.copy(), V, build_vocab(emb.copy(), cfg, "J"))
        assert res.lhs == pytest.approx(0.0, abs=1e-8)
        assert res.holds

    def test_bound_holds_on_randomized_trials(self):
        rng = np.random.default_rng(311)
        lhs_by_k = {2: [], 5: [], 10: []}
        for trial in range(100):
            K = (2, 5, 10)[trial % 3]
            emb_I, emb_J = self._page(rng), self._page(rng)
            cfg = KMeansConfig(K=K, seed=trial)
            res = prop1_check(
                emb_I, emb_J, build_vocab(emb_I, cfg, "I"), build_vocab(emb_J, cfg, "J")
            )
            assert res.holds, f"trial {trial}, K={K}: lhs={res.lhs} bound={res.bound}"
            lhs_by_k[K].append(res.lhs)
        assert np.mean(lhs_by_k[10]) < np.mean(lhs_by_k[2])

    def test_vocab_embedding_mismatch(self):
        rng = np.random.default_rng(313)
        emb = self._page(rng)
        V = build_vocab(emb, KMeansConfig(K=4, seed=0), "I")
        with pytest.raises(ValueError, match="does not match"):
            prop1_check(emb[:-1], emb, V, V)


# ---------------------------------------------------------------- matrices


class TestDistanceMatrix:
    def _matrix(self, rng, n=4):
        vals = rng.uniform(0.1, 2.0, (n, n)).astype(np.float32)
        vals = ((vals + vals.T) / 2).astype(np.float32)
        np.fill_diagonal(vals, 0.0)
        ids = [f"page-{i:03d}" for i in range(n)]
        return DistanceMatrix(page_ids=ids, method="chamfer", values=vals)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(317)
        dm = self._matrix(rng)
        path = tmp_path / "d.bobd"
        write_distances(path, dm, meta={"source": "unit-test"})
        loaded = read_distances(path)
        assert loaded.page_ids == dm.page_ids
        assert loaded.method == "chamfer"
        assert np.array_equal(loaded.values, dm.values)
        import json

        meta = json.loads((tmp_path / "d.bobd.meta.json").read_text())
        assert meta["source"] == "unit-test"

    def test_method_ids_stable(self):
        assert METHOD_IDS["chamfer"] == 1
        assert METHOD_IDS["hungarian"] == 2
        assert METHOD_IDS["ot"] == 3
        assert METHOD_IDS["maxpool"] == 9

    def test_validation(self):
        bad = DistanceMatrix(
            page_ids=["a", "b"],
            method="chamfer",
            values=np.array([[0.0, 1.0], [1.0, 0.5]], dtype=np.float32),
        )
        with pytest.raises(ValueError, match="diagonal"):
            bad.validate()
        with pytest.raises(ValueError, match="unknown method"):
            DistanceMatrix(["a"], "nope", np.zeros((1, 1), dtype=np.float32)).validate()

    def test_pairwise_builder(self):
        rng = np.random.default_rng(331)
        bags = [random_bag(rng, 4) for _ in range(5)]
        ids = [f"p{i}" for i in range(5)]
        dm = pairwise_distances(bags, chamfer, ids, "chamfer")
        assert dm.values.shape == (5, 5)
        assert np.array_equal(dm.values, dm.values.T)
        assert dm.values[1, 2] == np.float32(chamfer(bags[1], bags[2]))
        assert np.diagonal(dm.values).max() == 0.0
