import hashlib
import json

import numpy as np
import pytest

from mortree import fem1d, hilbert_rb as H, problems as P, tree_library as T

MESH = fem1d.build_mesh(256)


def hilbert_backend(problem, spec):
    tr = P.make_training_set(problem.box, spec)
    return T.HilbertBackend(H.TruthModel(problem, MESH, tr.points))


@pytest.fixture(scope="module")
def cv_backend():
    prob = P.cvdiff_problem()
    return prob, hilbert_backend(prob, P.TrainingSpec("grid", counts=(101,)))


@pytest.fixture(scope="module")
def cv_cart(cv_backend):
    prob, be = cv_backend
    return T.y_cart_split(be, prob.box, 1e-6, 5, seed=0)


@pytest.fixture(scope="module")
def diff_mbased():
    prob = P.diff1_problem(0.105)
    be = hilbert_backend(prob, P.TrainingSpec("grid", counts=(12, 12)))
    return prob, be, T.m_based_split(be, 1e-5, extra_steps=3, seed=1)


def test_derive_seed_is_stable():
    assert T.derive_seed(0, "1") == T.derive_seed(0, "1")
    assert T.derive_seed(0, "1") != T.derive_seed(1, "1")
    assert T.derive_seed(0, "0,0") == int.from_bytes(hashlib.sha256(b"0:0,0").digest()[:8], "little")


def test_huge_tolerance_gives_single_node(cv_backend):
    prob, be = cv_backend
    for tree in (T.y_cart_split(be, prob.box, 1e9, 3), T.m_based_split(be, 1e9)):
        assert len(list(tree.nodes())) == 1 and tree.converged and tree.depth == 1


def test_cart_partition_and_boxes(cv_backend, cv_cart):
    prob, be = cv_backend
    tree = cv_cart
    tree.check_partition(len(be.points))
    assert tree.converged
    for leaf in tree.leaves:
        assert leaf.error <= 1e-6 and leaf.dimension <= 5
        for i in leaf.subset:
            assert T.assign_cart(tree, be.points[i], prob.box) is leaf
    # convection-dominated end refines: the leftmost leaf is the smallest interval
    lo_leaf = T.assign_cart(tree, [0.0], prob.box)
    hi_leaf = T.assign_cart(tree, [prob.box.upper[0]], prob.box)
    assert lo_leaf.index[0][0] > hi_leaf.index[0][0]


def test_cart_split_children_cover_parent(cv_cart):
    for node in cv_cart.nodes():
        if node.children:
            union = np.sort(np.concatenate([c.subset for c in node.children]))
            assert np.array_equal(union, np.sort(node.subset))
            m = node.split_direction
            k, i = node.index[m]
            assert [c.index[m] for c in node.children] == [(k + 1, 2 * i), (k + 1, 2 * i + 1)]


def test_assign_cart_boundary_and_domain(cv_backend, cv_cart):
    prob, _ = cv_backend
    root = cv_cart.root
    mid = 0.5 * (prob.box.lower[0] + prob.box.upper[0])
    # the root split plane belongs to the lower half, for training points and queries alike
    node = T.assign_cart(cv_cart, [mid], prob.box)
    assert node.index[0][1] < 2 ** (node.index[0][0] - 1)
    assert 50 in root.children[0].subset and root.children[1].subset.min() == 51
    with pytest.raises(T.DomainError):
        T.assign_cart(cv_cart, [-1.0], prob.box)


def test_alternate_rule_cycles_directions():
    prob = P.diff1_problem(1.0)
    be = hilbert_backend(prob, P.TrainingSpec("grid", counts=(9, 9)))
    tree = T.y_cart_split(be, prob.box, 1e-8, 3, rule="alternate")
    for node in tree.nodes():
        if node.children:
            assert node.split_direction == (node.depth - 1) % 2
    tree.check_partition(len(be.points))
    with pytest.raises(ValueError):
        T.y_cart_split(be, prob.box, 1e-8, 3, rule="random")


def test_mbased_nesting_and_partition(diff_mbased):
    _, be, tree = diff_mbased
    tree.check_partition(len(be.points))
    assert tree.converged
    for node in tree.nodes():
        for c in node.children:
            assert c.generators[: node.dimension] == node.generators
            # extra_steps=3 adds at most two snapshots per level (fewer once the greedy meets the target)
            assert 1 <= c.dimension - node.dimension <= 2
        if len(node.children) == 2:
            a, b = node.children
            assert a.generators[:-1] == b.generators[:-1] and a.generators[-1] != b.generators[-1]


def test_mbased_child_assignment_consistency(diff_mbased):
    _, be, tree = diff_mbased
    for node in tree.nodes():
        if len(node.children) == 2:
            a, b = node.children
            ea, eb = be.errors(a.generators, node.subset), be.errors(b.generators, node.subset)
            in_a = np.isin(node.subset, a.subset)
            assert np.array_equal(in_a, ea <= eb)


def test_mbased_summary_deduplicates(diff_mbased):
    _, _, tree = diff_mbased
    s = T.library_summary(tree)
    assert s["num_spaces"] == len(tree.leaves) == sum(s["counts"])
    assert s["num_snapshots"] < s["sum_dimensions"]
    assert s["max_dimension"] == max(s["dimensions"])


def test_mbased_nearest_parameter_and_ties(diff_mbased):
    prob, be, tree = diff_mbased
    i = 17
    assert T.assign_mbased(tree, be.points[i], be.points, prob.box).label == tree.leaf_of_training()[i]
    # halfway between neighbours 0 and 1: lowest index wins
    y = 0.5 * (be.points[0] + be.points[1])
    assert T.assign_mbased(tree, y, be.points, prob.box).label == tree.leaf_of_training()[0]
    with pytest.raises(T.DomainError):
        T.assign_mbased(tree, [2.0, 0.0], be.points, prob.box)


def test_mbased_single_element(cv_backend):
    _, be = cv_backend
    tree = T.m_based_split(be, 1e-12, subset=[4])
    assert len(tree.leaves) == 1 and tree.converged and tree.root.generators == [4]
    with pytest.raises(ValueError):
        T.m_based_split(be, 1e-3, extra_steps=1)


def test_json_round_trip(tmp_path, diff_mbased, cv_cart):
    for tree in (diff_mbased[2], cv_cart):
        path = tmp_path / f"{tree.algorithm}.json"
        tree.to_json(path)
        back = T.LibraryTree.from_dict(json.loads(path.read_text()))
        assert back.to_dict() == tree.to_dict()
        dot = tree.to_dot()
        assert dot.startswith("digraph") and dot.count("->") == len(list(tree.nodes())) - 1


def test_evaluate_library(diff_mbased):
    prob, be, tree = diff_mbased
    y = np.array([0.13, -0.42])
    out = T.evaluate_library(tree, y, be, prob.box, diagnostics=True)
    assert out["assignment"] == "nearest-training-parameter"
    assert prob.r * out["galerkin_error"] <= out["estimator"] * (1 + 1e-9)
    assert out["best_fit_error"] <= out["galerkin_error"] * (1 + 1e-12)


def test_plain_tree_and_depth_guard(cv_backend):
    prob, be = cv_backend
    plain = T.plain_tree(be, 1e-6, seed=2)
    assert plain.converged and plain.params["history"][-1] <= 1e-6
    capped = T.y_cart_split(be, prob.box, 1e-6, 2, max_depth=2)
    assert not capped.converged and capped.depth <= 2
    assert capped.failures and all(f["reason"] == "depth limit" for f in capped.failures)


def test_wasserstein_backend_mbased():
    prob = P.KdVProblem(num_points=1024)
    tr = P.make_training_set(prob.box, P.TrainingSpec("random", n=60, seed=2))
    be = T.WassersteinBackend(prob, tr.points, 256)
    tree = T.m_based_split(be, 2e-2, extra_steps=3, max_depth=4)
    tree.check_partition(60)
    assert tree.root.dimension == 2
    log = [r["max_error"] for r in tree.build_log]
    assert log[-1] <= log[0]
    out = T.evaluate_library(tree, tr.points[3], be, prob.box)
    assert np.isclose(sum(out["weights"]), 1.0) and out["distance"] <= tree.node(out["leaf"]).error + 1e-9
