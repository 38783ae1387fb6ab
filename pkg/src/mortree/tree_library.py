"""Tree-structured libraries of reduced spaces.

Two constructions share one node structure:

* ``y_cart_split`` bisects a box-shaped parameter domain dyadically, trying
  every direction and keeping the split whose worse half is best;
* ``m_based_split`` grows a binary tree by running a few restarted greedy
  steps per node and sending each training element to whichever of the
  two enlarged child spaces approximates it better.

Both are generic over a backend: linear reduced bases with a residual
estimator, or barycentric spaces in the 1D Wasserstein metric. Spaces are
identified by their ordered list of generating training indices.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fem1d
from .hilbert_rb import (
    GreedyConfig,
    GreedyResult,
    StagnationError,
    TruthModel,
    best_fit_error,
    greedy,
    reduced_solve,
    residual_estimator,
)
from .wasserstein1d import (
    BarycentricSpace,
    QuantileFunction,
    barycentric_greedy,
    project_to_barycentric,
    projection_errors,
    quantiles_of_densities,
)

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """Parameter outside the parameter box."""


class DegenerateSplitError(RuntimeError):
    """A split sent every training element of a node to one child."""


def derive_seed(seed: int, label: str) -> int:
    """Stable per-node seed (independent of Python's hash randomization)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# --- backends ----------------------------------------------------------------


class HilbertBackend:
    """Linear reduced bases; errors are residual dual norms."""

    kind = "hilbert"
    init_size = 1

    def __init__(self, model: TruthModel):
        self.model = model

    @property
    def points(self) -> np.ndarray:
        return self.model.points

    def greedy(self, subset, tol, n_max, seed, start=None) -> GreedyResult:
        cfg = GreedyConfig(tol, n_max, seed)
        try:
            return greedy(self.model, cfg, subset=subset, start=start)
        except StagnationError as exc:
            log.warning("greedy stagnated: %s", exc)
            basis = self.model.basis_for(start or [])
            errors = self.model.subset_errors(basis, subset)
            e = float(errors.max())
            return GreedyResult(list(basis.indices), [e], errors, e, False, [], True, basis)

    def errors(self, generators: Sequence[int], subset) -> np.ndarray:
        return self.model.subset_errors(self.model.basis_for(generators), subset)

    def dimension(self, generators: Sequence[int]) -> int:
        return self.model.basis_for(generators).dim

    def evaluate(self, generators, y, diagnostics: bool = False) -> dict:
        basis = self.model.basis_for(generators)
        problem = self.model.problem
        c = reduced_solve(basis, problem, y)
        out = {"estimator": residual_estimator(basis, c, problem, y), "dimension": basis.dim}
        if diagnostics:
            truth = fem1d.solve_truth(problem, y, self.model.mesh)
            out["best_fit_error"] = best_fit_error(truth, basis)
            out["galerkin_error"] = fem1d.v_norm(truth - basis.function(c))
        return out


class WassersteinBackend:
    """Barycentric spaces over quantile functions; errors are W2 projection distances."""

    kind = "wasserstein"
    init_size = 2

    def __init__(self, problem, points: np.ndarray, S: int):
        self.problem = problem
        self.S = S
        self._points = np.atleast_2d(np.asarray(points, dtype=float))
        self.grid = problem.grid()
        self.quantiles = quantiles_of_densities(self.grid, problem.densities(self._points), S)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def greedy(self, subset, tol, n_max, seed, start=None) -> GreedyResult:
        return barycentric_greedy(self.quantiles, GreedyConfig(tol, n_max, seed), subset=subset, start=start)

    def errors(self, generators: Sequence[int], subset) -> np.ndarray:
        return projection_errors(self.quantiles[list(generators)], self.quantiles[np.asarray(subset)])

    def dimension(self, generators: Sequence[int]) -> int:
        return len(generators)

    def evaluate(self, generators, y, diagnostics: bool = False) -> dict:
        q = quantiles_of_densities(self.grid, self.problem.densities(np.atleast_2d(y)), self.S)[0]
        space = BarycentricSpace(self.quantiles[list(generators)], self.grid)
        weights, dist, conv = project_to_barycentric(QuantileFunction(q), space)
        return {
            "distance": dist,
            "dimension": len(generators),
            "weights": weights.weights.tolist(),
            "solver_converged": conv,
        }


# --- tree structure ----------------------------------------------------------


@dataclass
class TreeNode:
    label: str
    index: tuple
    depth: int
    subset: np.ndarray
    generators: list[int]
    errors: np.ndarray
    parent: str | None = None
    children: list["TreeNode"] = field(default_factory=list)
    split_direction: int | None = None
    status: str = "leaf"
    note: str = ""

    @property
    def error(self) -> float:
        return float(self.errors.max()) if len(self.errors) else 0.0

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def dimension(self) -> int:
        return len(self.generators)

    def converged(self, tol: float) -> bool:
        return self.error <= tol


@dataclass
class LibraryTree:
    root: TreeNode
    algorithm: str
    backend: str
    tol: float
    n_max: int | None
    max_depth: int
    converged: bool = False
    build_log: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop(0)
            yield node
            stack.extend(node.children)

    @property
    def leaves(self) -> list[TreeNode]:
        return [n for n in self.nodes() if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def node(self, label: str) -> TreeNode:
        for n in self.nodes():
            if n.label == label:
                return n
        raise KeyError(label)

    def leaf_of_training(self) -> dict[int, str]:
        return {int(i): leaf.label for leaf in self.leaves for i in leaf.subset}

    def check_partition(self, num_training: int) -> None:
        counts = np.zeros(num_training, dtype=int)
        for leaf in self.leaves:
            np.add.at(counts, leaf.subset.astype(int), 1)
        if not np.all(counts == 1):
            bad = np.flatnonzero(counts != 1)[:10]
            raise AssertionError(f"leaves do not partition the training set (e.g. indices {bad.tolist()})")

    # serialization
    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes():
            nodes.append(
                {
                    "label": n.label,
                    "index": [list(p) for p in n.index] if self.algorithm == "ycart" else list(n.index),
                    "parent": n.parent,
                    "depth": n.depth,
                    "children": [c.label for c in n.children],
                    "split_direction": n.split_direction,
                    "training_indices": [int(i) for i in n.subset],
                    "generators": [int(g) for g in n.generators],
                    "dimension": n.dimension,
                    "error": n.error,
                    "converged": n.converged(self.tol),
                    "status": n.status,
                    "note": n.note,
                    "element_errors": [float(e) for e in n.errors],
                }
            )
        return {
            "algorithm": self.algorithm,
            "backend": self.backend,
            "tol": self.tol,
            "n_max": self.n_max,
            "max_depth": self.max_depth,
            "converged": self.converged,
            "depth": self.depth,
            "params": self.params,
            "build_log": self.build_log,
            "failures": self.failures,
            "nodes": nodes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LibraryTree":
        made: dict[str, TreeNode] = {}
        for d in data["nodes"]:
            index = tuple(tuple(p) for p in d["index"]) if data["algorithm"] == "ycart" else tuple(d["index"])
            made[d["label"]] = TreeNode(
                label=d["label"],
                index=index,
                depth=d["depth"],
                subset=np.asarray(d["training_indices"], dtype=int),
                generators=list(d["generators"]),
                errors=np.asarray(d["element_errors"], dtype=float),
                parent=d["parent"],
                split_direction=d["split_direction"],
                status=d["status"],
                note=d.get("note", ""),
            )
        for d in data["nodes"]:
            made[d["label"]].children = [made[c] for c in d["children"]]
        root = next(n for n in made.values() if n.parent is None)
        return cls(
            root,
            data["algorithm"],
            data["backend"],
            data["tol"],
            data["n_max"],
            data["max_depth"],
            data["converged"],
            data["build_log"],
            data["failures"],
            data.get("params", {}),
        )

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def to_dot(self) -> str:
        lines = ["digraph library {", '  node [shape=box, fontname="Helvetica"];']
        for n in self.nodes():
            color = ', style=filled, fillcolor="orange"' if n.is_leaf else ""
            lines.append(f'  "{n.label}" [label="{n.label}\\nn={n.dimension}\\ne={n.error:.3e}"{color}];')
        for n in self.nodes():
            for c in n.children:
                lines.append(f'  "{n.label}" -> "{c.label}";')
        lines.append("}")
        return "\n".join(lines) + "\n"


# --- Y-cart-split ------------------------------------------------------------


def _cart_label(index) -> str:
    return "|".join(f"{k},{i}" for k, i in index)


def _cart_child(index, m: int, bit: int):
    k, i = index[m]
    return index[:m] + ((k + 1, 2 * i + bit),) + index[m + 1 :]


def _cart_halves(t: np.ndarray, subset: np.ndarray, index, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``subset`` by the midpoint plane in direction ``m``; the plane goes left."""
    k, i = index[m]
    lower = t[subset, m] * 2.0 ** (k + 1) <= 2 * i + 1
    return subset[lower], subset[~lower]


def y_cart_split(
    backend,
    box,
    tol: float,
    n_max: int | None,
    *,
    rule: str = "best",
    max_depth: int = 12,
    seed: int = 0,
    subset: Sequence[int] | None = None,
) -> LibraryTree:
    """Dyadic bisection of the parameter box (see module docstring).

    Every unconverged leaf is split at each level; depth counts the root as 1
    and no node deeper than ``max_depth`` is created. Candidate directions
    whose half would hold no training point are skipped. All candidate
    halves of a node share one seed derived from the node label, so halves
    holding identical snapshot families score identically.
    """
    if rule not in ("best", "alternate"):
        raise ValueError(f"unknown split rule {rule!r}")
    points = backend.points
    p = points.shape[1]
    t = box.normalize(points)
    full = np.arange(len(points)) if subset is None else np.asarray(subset, dtype=int)
    root_index = tuple((0, 0) for _ in range(p))
    label = _cart_label(root_index)
    res = backend.greedy(full, tol, n_max, derive_seed(seed, label))
    root = TreeNode(label, root_index, 1, full, list(res.selected), np.asarray(res.errors))
    tree = LibraryTree(root, "ycart", backend.kind, tol, n_max, max_depth, params={"rule": rule, "seed": seed})
    _log_level(tree, 1)

    depth = 1
    while depth < max_depth:
        todo = [leaf for leaf in tree.leaves if not leaf.converged(tol) and leaf.status == "leaf"]
        if not todo:
            break
        depth += 1
        for node in todo:
            if len(node.subset) < 2:
                node.status = "unsplittable"
                continue
            if rule == "best":
                directions = list(range(p))
            else:
                start = (node.depth - 1) % p
                directions = [(start + j) % p for j in range(p)]
            best = None
            node_seed = derive_seed(seed, node.label)
            for m in directions:
                halves = _cart_halves(t, node.subset, node.index, m)
                if min(len(h) for h in halves) == 0:
                    continue
                kids = []
                for bit, part in enumerate(halves):
                    idx = _cart_child(node.index, m, bit)
                    lab = _cart_label(idx)
                    r = backend.greedy(part, tol, n_max, node_seed)
                    kids.append((idx, lab, part, r))
                score = max(k[3].error for k in kids)
                log.debug("node %s direction %d score %.3e", node.label, m, score)
                if best is None or score < best[0]:
                    best = (score, m, kids)
                if rule == "alternate":
                    break
            if best is None:
                node.status = "unsplittable"
                continue
            _, m, kids = best
            node.split_direction = m
            node.status = "split"
            for idx, lab, part, r in kids:
                node.children.append(
                    TreeNode(lab, idx, node.depth + 1, part, list(r.selected), np.asarray(r.errors), parent=node.label)
                )
        _log_level(tree, depth)

    _finish(tree)
    return tree


# --- M-based-split -----------------------------------------------------------


def m_based_split(
    backend,
    tol: float,
    *,
    extra_steps: int = 2,
    max_depth: int = 12,
    seed: int = 0,
    subset: Sequence[int] | None = None,
) -> LibraryTree:
    """Binary tree driven by restarted greedy selections (see module docstring).

    Each split runs ``extra_steps`` restarted greedy steps from the node's
    generators. The last two selections ``u0, u1`` seed the children; any
    earlier extra selections are kept by both. Elements go to child 0 when
    their error against it is not larger than against child 1.
    """
    if extra_steps < 2:
        raise ValueError("extra_steps must be at least 2")
    points = backend.points
    full = np.arange(len(points)) if subset is None else np.asarray(subset, dtype=int)
    res = backend.greedy(full, tol, backend.init_size, derive_seed(seed, "1"))
    root = TreeNode("1", (1,), 1, full, list(res.selected), np.asarray(res.errors))
    tree = LibraryTree(
        root, "mbased", backend.kind, tol, None, max_depth, params={"extra_steps": extra_steps, "seed": seed}
    )
    _log_level(tree, 1)

    depth = 1
    while depth < max_depth:
        todo = [leaf for leaf in tree.leaves if not leaf.converged(tol) and leaf.status == "leaf"]
        if not todo:
            break
        depth += 1
        for node in todo:
            try:
                _m_split_node(backend, node, tol, extra_steps, seed)
            except DegenerateSplitError as exc:
                node.status = "degenerate"
                node.note = str(exc)
                tree.failures.append({"node": node.label, "reason": "degenerate split", "detail": str(exc)})
                log.warning("node %s: %s", node.label, exc)
        _log_level(tree, depth)

    _finish(tree)
    return tree


def _m_split_node(backend, node: TreeNode, tol: float, extra_steps: int, seed: int) -> None:
    n_max = backend.dimension(node.generators) + extra_steps
    res = backend.greedy(node.subset, tol, n_max, derive_seed(seed, node.label), start=list(node.generators))
    new = list(res.new)
    if not new:
        node.status = "stagnated"
        node.note = "restarted greedy added no snapshot"
        return
    if len(new) == 1:
        # target met after one step: a single child inherits every element
        node.status = "split"
        node.children.append(
            TreeNode(
                node.label + "0",
                node.index + (0,),
                node.depth + 1,
                node.subset,
                node.generators + new,
                np.asarray(res.errors),
                parent=node.label,
                note="single child",
            )
        )
        return
    common = node.generators + new[:-2]
    gens = [common + [new[-2]], common + [new[-1]]]
    e0 = backend.errors(gens[0], node.subset)
    e1 = backend.errors(gens[1], node.subset)
    to_first = e0 <= e1
    if to_first.all() or not to_first.any():
        empty = 1 if to_first.all() else 0
        raise DegenerateSplitError(
            f"child {empty} of node {node.label} received no training element "
            f"(subset size {len(node.subset)}, snapshots {new[-2:]})"
        )
    node.status = "split"
    for bit, mask, errs in ((0, to_first, e0), (1, ~to_first, e1)):
        node.children.append(
            TreeNode(
                node.label + str(bit),
                node.index + (bit,),
                node.depth + 1,
                node.subset[mask],
                gens[bit],
                errs[mask],
                parent=node.label,
            )
        )


def _log_level(tree: LibraryTree, depth: int) -> None:
    leaves = tree.leaves
    e = max(leaf.error for leaf in leaves)
    tree.build_log.append(
        {
            "level": depth,
            "max_error": e,
            "num_leaves": len(leaves),
            "max_dimension": max(leaf.dimension for leaf in leaves),
        }
    )
    log.info("%s level %d: %d leaves, max error %.3e", tree.algorithm, depth, len(leaves), e)


def _finish(tree: LibraryTree) -> None:
    bad = [leaf for leaf in tree.leaves if not leaf.converged(tree.tol)]
    tree.converged = not bad
    for leaf in bad:
        if not any(f["node"] == leaf.label for f in tree.failures):
            reason = "depth limit" if leaf.status == "leaf" else leaf.status
            tree.failures.append({"node": leaf.label, "reason": reason, "error": leaf.error})


def plain_tree(backend, tol: float, n_max: int | None = None, seed: int = 0) -> LibraryTree:
    """A plain greedy run wrapped as a one-leaf tree."""
    full = np.arange(len(backend.points))
    res = backend.greedy(full, tol, n_max, seed)
    root = TreeNode("root", (), 1, full, list(res.selected), np.asarray(res.errors))
    tree = LibraryTree(root, "plain", backend.kind, tol, n_max, 1, params={"seed": seed})
    tree.params["history"] = [float(h) for h in res.history]
    tree.params["stagnated"] = bool(res.stagnated)
    _log_level(tree, 1)
    _finish(tree)
    return tree


# --- leaf assignment and evaluation --------------------------------------------


def assign_cart(tree: LibraryTree, y, box) -> TreeNode:
    """Leaf whose dyadic box holds ``y``; points on a split plane go to the lower child."""
    if not box.contains(y):
        raise DomainError(f"parameter {np.asarray(y).tolist()} lies outside the box")
    t = np.clip(box.normalize(np.asarray(y, dtype=float)), 0.0, 1.0)
    node = tree.root
    while node.children:
        m = node.split_direction
        k, i = node.index[m]
        node = node.children[0] if t[m] * 2.0 ** (k + 1) <= 2 * i + 1 else node.children[1]
    return node


def assign_mbased(tree: LibraryTree, y, points: np.ndarray, box) -> TreeNode:
    """Leaf of the nearest training parameter (box-normalized distance, lowest index on ties)."""
    if not box.contains(y):
        raise DomainError(f"parameter {np.asarray(y).tolist()} lies outside the box")
    d = np.sum((box.normalize(points) - box.normalize(y)) ** 2, axis=1)
    nearest = int(np.argmin(d))
    return tree.node(tree.leaf_of_training()[nearest])


def assign_leaf(tree: LibraryTree, y, points: np.ndarray, box) -> TreeNode:
    if tree.algorithm == "ycart":
        return assign_cart(tree, y, box)
    if tree.algorithm == "mbased":
        return assign_mbased(tree, y, points, box)
    if not box.contains(y):
        raise DomainError(f"parameter {np.asarray(y).tolist()} lies outside the box")
    return tree.root


def evaluate_library(tree: LibraryTree, y, backend, box, diagnostics: bool = False) -> dict:
    """Pick the leaf for ``y`` and report the estimator (or W2 distance) in its space."""
    leaf = assign_leaf(tree, y, backend.points, box)
    out = {"leaf": leaf.label, "assignment": "nearest-training-parameter" if tree.algorithm == "mbased" else "exact"}
    out.update(backend.evaluate(leaf.generators, np.asarray(y, dtype=float), diagnostics))
    return out


# --- summary -------------------------------------------------------------------


def library_summary(tree: LibraryTree) -> dict:
    """The features reported per library: size, dimensions, snapshot count."""
    dims = [leaf.dimension for leaf in tree.leaves]
    distinct = sorted(set(dims))
    if tree.algorithm == "ycart":
        snapshots = int(sum(dims))
    else:
        snapshots = len({g for leaf in tree.leaves for g in leaf.generators})
    return {
        "algorithm": tree.algorithm,
        "backend": tree.backend,
        "num_spaces": len(dims),
        "dimensions": distinct,
        "counts": [dims.count(d) for d in distinct],
        "num_snapshots": snapshots,
        "sum_dimensions": int(sum(dims)),
        "max_dimension": max(dims),
        "depth": tree.depth,
        "tol": tree.tol,
        "n_max": tree.n_max,
        "converged": tree.converged,
        "max_error": max(leaf.error for leaf in tree.leaves),
    }
