import numpy as np
import pytest

from mortree import fem1d, hilbert_rb as H, problems
from mortree._parallel import THREADS_ENV

MESH = fem1d.build_mesh(256)


@pytest.fixture(scope="module")
def diff1_model():
    prob = problems.diff1_problem(1.0)
    tr = problems.make_training_set(prob.box, problems.TrainingSpec("grid", counts=(15, 15)))
    return H.TruthModel(prob, MESH, tr.points)


def test_orthonormalize_append(diff1_model):
    b = H.ReducedBasis.empty(MESH)
    b, ok = H.orthonormalize_append(b, diff1_model.snapshot(3), 3)
    assert ok and b.dim == 1 and np.isclose(b.gram()[0, 0], 1.0)
    same, ok = H.orthonormalize_append(b, diff1_model.snapshot(3), 3)
    assert not ok and same.dim == 1
    for i in (50, 120):
        b, ok = H.orthonormalize_append(b, diff1_model.snapshot(i), i)
    assert np.abs(b.gram() - np.eye(3)).max() < 1e-10
    with pytest.raises(fem1d.MeshError):
        H.orthonormalize_append(b, fem1d.GridFunction(fem1d.build_mesh(8), np.ones(7)))


def test_reduced_solve_reproduces_snapshot(diff1_model):
    b = diff1_model.basis_for([7, 100])
    y = diff1_model.points[100]
    c = H.reduced_solve(b, diff1_model.problem, y)
    err = fem1d.v_norm(diff1_model.snapshot(100) - b.function(c))
    assert err <= 1e-9
    assert H.residual_estimator(b, c, diff1_model.problem, y) <= 1e-10


def test_one_dimensional_reduced_solve_matches_formula(diff1_model):
    b = diff1_model.basis_for([30])
    y = diff1_model.points[77]
    A = fem1d.assemble_system(diff1_model.problem, y, MESH)
    v = b.vectors[0]
    expected = (v @ fem1d.assemble_load(MESH)) / (v @ A.matvec(v))
    assert np.isclose(H.reduced_solve(b, diff1_model.problem, y)[0], expected, rtol=1e-12)


def test_reduced_solve_needs_basis(diff1_model):
    with pytest.raises(ValueError):
        H.reduced_solve(H.ReducedBasis.empty(MESH), diff1_model.problem, (0.0, 0.0))


def test_estimator_empty_basis_convention(diff1_model):
    b = H.ReducedBasis.empty(MESH)
    f = fem1d.assemble_load(MESH)
    assert np.isclose(H.residual_estimator(b, [], diff1_model.problem, (0.1, 0.1)), fem1d.riesz_dual_norm(f, MESH))
    errs = diff1_model.errors(b, diff1_model.points[:4])
    assert np.allclose(errs, fem1d.riesz_dual_norm(f, MESH))


def test_batched_estimator_matches_single(diff1_model):
    b = diff1_model.basis_for([5, 60, 200])
    ys = diff1_model.points[::17]
    batched = diff1_model.errors(b, ys)
    single = [H.residual_estimator(b, H.reduced_solve(b, diff1_model.problem, y), diff1_model.problem, y) for y in ys]
    assert np.allclose(batched, single, rtol=1e-9, atol=1e-15)


@pytest.mark.parametrize(
    "problem",
    [problems.diff1_problem(1.0), problems.diff1_problem(0.105), problems.diff2_problem(), problems.cvdiff_problem(200.0)],
    ids=["diff1-a1", "diff1-a0105", "diff2", "cvdiff"],
)
def test_equivalence_band(problem):
    rng = np.random.default_rng(4)
    lo, hi = np.array(problem.box.lower), np.array(problem.box.upper)
    pts = lo + (hi - lo) * rng.random((30, problem.box.dim))
    model = H.TruthModel(problem, MESH, pts)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        gens = list(rng.choice(np.arange(10, 30), size=n, replace=False))
        b = model.basis_for(gens)
        y = pts[int(rng.integers(0, 10))]
        c = H.reduced_solve(b, problem, y)
        delta = H.residual_estimator(b, c, problem, y)
        truth = fem1d.solve_truth(problem, y, MESH)
        e = fem1d.v_norm(truth - b.function(c))
        assert problem.r * e * (1 - 1e-9) <= delta <= problem.R * e * (1 + 1e-9)
        best = H.best_fit_error(truth, b)
        assert best <= e * (1 + 1e-12)


def test_best_fit_examples(diff1_model):
    b = diff1_model.basis_for([1, 2])
    assert H.best_fit_error(diff1_model.snapshot(2), b) <= 1e-10
    u = diff1_model.snapshot(40)
    assert np.isclose(H.best_fit_error(u, H.ReducedBasis.empty(MESH)), fem1d.v_norm(u))


def test_greedy_trivial_tolerance(diff1_model):
    res = H.greedy(diff1_model, H.GreedyConfig(1e9))
    assert len(res.selected) == 1 and res.converged


def test_greedy_properties(diff1_model):
    res = H.greedy(diff1_model, H.GreedyConfig(1e-6, seed=3))
    assert res.converged and 4 <= len(res.selected) <= 9
    assert all(a >= b for a, b in zip(res.history, res.history[1:]))
    assert res.errors.max() <= 1e-6
    for i in res.selected:
        assert H.best_fit_error(diff1_model.snapshot(i), res.basis) <= 1e-9
    again = H.greedy(diff1_model, H.GreedyConfig(1e-6, seed=3))
    assert again.selected == res.selected


def test_greedy_config_validation():
    with pytest.raises(ValueError):
        H.GreedyConfig(0.0)
    with pytest.raises(ValueError):
        H.GreedyConfig(1e-3, n_max=0)


def test_restarted_greedy(diff1_model):
    full = H.greedy(diff1_model, H.GreedyConfig(1e-6, seed=1))
    k = 2
    same = H.restarted_greedy(diff1_model, full.selected[:k], H.GreedyConfig(1e-6, n_max=k))
    assert same.selected == full.selected[:k] and same.new == []
    two = H.restarted_greedy(diff1_model, full.selected[:k], H.GreedyConfig(1e-6, n_max=k + 2))
    assert len(two.new) <= 2 and two.selected == full.selected[: k + 2]
    rest = H.restarted_greedy(diff1_model, full.selected[:k], H.GreedyConfig(1e-6))
    assert rest.selected == full.selected


def test_scaled_coefficient_manifold_is_one_dimensional():
    # -(a u')' = 1 with a = 1/s gives u = s * u0
    prob = problems.ParametricProblem(
        name="scaled",
        box=problems.ParameterBox((1.0,), (5.0,)),
        coefficient=lambda x, y: np.broadcast_to(1.0 / np.atleast_2d(y)[:, :1], (np.atleast_2d(y).shape[0], np.shape(x)[-1])),
        r=0.2,
        R=1.0,
    )
    tr = problems.make_training_set(prob.box, problems.TrainingSpec("grid", counts=(40,)))
    res = H.greedy(H.TruthModel(prob, MESH, tr.points), H.GreedyConfig(1e-10))
    assert res.converged and len(res.selected) == 1


def test_two_piece_manifold_is_three_dimensional():
    """u = -x^2/2 + Cx on the left, (-x^2/2 + Cx)/a + D on the right: span of dimension 3."""

    def coef(x, y):
        y = np.atleast_2d(y)
        return np.where(np.asarray(x) < 0.5, 1.0, 1.0 + y[:, :1])

    prob = problems.ParametricProblem(
        name="twopiece", box=problems.ParameterBox((0.0,), (3.0,)), coefficient=coef, breakpoints=(0.5,), r=1, R=4
    )
    tr = problems.make_training_set(prob.box, problems.TrainingSpec("grid", counts=(31,)))
    res = H.greedy(H.TruthModel(prob, MESH, tr.points), H.GreedyConfig(1e-10))
    assert res.converged and len(res.selected) == 3 and res.error <= 1e-10


def test_stagnation_error():
    prob = problems.diff1_problem(1.0)
    pts = np.array([[0.2, 0.3]] * 5)
    model = H.TruthModel(prob, MESH, np.vstack([pts, [[0.5, 0.5]]]))
    res = H.greedy(model, H.GreedyConfig(1e-12, seed=0))
    assert res.converged
    # all remaining candidates duplicate the current span while the tolerance is unreachable
    dup = H.TruthModel(prob, MESH, np.array([[0.2, 0.3], [0.2, 0.3]]))

    class Noisy(H.TruthModel):
        def subset_errors(self, basis, subset):
            return np.ones(len(subset))

    noisy = Noisy(prob, MESH, dup.points)
    with pytest.raises(H.StagnationError):
        H.greedy(noisy, H.GreedyConfig(1e-3))


def test_thread_count_does_not_change_selection(diff1_model, monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")
    one = H.greedy(H.TruthModel(diff1_model.problem, MESH, diff1_model.points), H.GreedyConfig(1e-6, seed=2))
    monkeypatch.setenv(THREADS_ENV, "4")
    four = H.greedy(H.TruthModel(diff1_model.problem, MESH, diff1_model.points), H.GreedyConfig(1e-6, seed=2))
    assert one.selected == four.selected
    assert np.array_equal(one.errors, four.errors)
