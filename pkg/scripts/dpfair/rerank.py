"""
Stage II: fairness-constrained re-ranking of candidate lists.

Each user keeps k of their K candidates. The objective is the total predicted
score of the kept items; the constraint bounds the F1@k gap between the active
and the inactive group by α. F1@k of a user with hit count h is 2h/(k+|T_u|),
so the 0-1 program over K·n1 binaries reduces to one integer h_u per user:

    max  Σ_u s_u(h_u)
    s.t. |Σ_{u∈A} c_u h_u − Σ_{u∈B} c_u h_u| ≤ α,   c_u = 2 / (|G_u| (k + |T_u|))

where s_u(h) is the best score sum over k-subsets with exactly h hits. The
program is solved exactly by best-first branch-and-bound; the gap is kept in
integer units (all c_u scaled by a common denominator) so feasibility checks
are exact.

This stage reads scores, candidate lists, relevance labels and groups only.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import pandas as pd
from scipy.optimize import minimize_scalar

from scripts.dpfair.data import UserGroups
from scripts.dpfair.errors import SolverError
from scripts.dpfair.metrics import RelevanceLabels
from scripts.utils.artifact_io import join_ints, read_json, save_csv, split_ints, write_json

logger = logging.getLogger(__name__)

DEFAULT_NODE_LIMIT = 5_000_000
BRUTE_FORCE_LIMIT = 1_000_000
INSTANCE_COLUMNS = ["user", "group", "items", "scores", "relevant", "n_reference"]
SOLUTION_COLUMNS = ["user", "group", "items", "hits"]


@dataclass(frozen=True)
class UserCandidates:
    user: int
    items: tuple
    scores: tuple
    relevant: tuple
    n_reference: int

    def __post_init__(self):
        if not (len(self.items) == len(self.scores) == len(self.relevant)):
            raise SolverError(f"user {self.user}: items, scores and relevance flags differ in length")
        if len(set(self.items)) != len(self.items):
            raise SolverError(f"user {self.user}: duplicate candidate items")
        if self.n_reference < sum(bool(r) for r in self.relevant):
            raise SolverError(f"user {self.user}: more relevant candidates than reference items")
        if not all(math.isfinite(s) for s in self.scores):
            raise SolverError(f"user {self.user}: non-finite candidate score")

    @property
    def K(self) -> int:
        return len(self.items)

    def order(self) -> list[int]:
        """Candidate positions by (−score, item)."""
        return sorted(range(self.K), key=lambda i: (-self.scores[i], self.items[i]))


@dataclass(frozen=True)
class RerankInstance:
    users: tuple
    active: frozenset
    inactive: frozenset
    alpha: float
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise SolverError(f"k must be positive, got {self.k}")
        if math.isnan(self.alpha) or self.alpha < 0:
            raise SolverError(f"alpha must be a nonnegative number, got {self.alpha}")
        ids = [c.user for c in self.users]
        if len(set(ids)) != len(ids):
            raise SolverError("duplicate users in instance")
        if self.active & self.inactive:
            raise SolverError("active and inactive groups overlap")
        if set(ids) != set(self.active) | set(self.inactive):
            raise SolverError("groups must partition the instance users")

    def with_alpha(self, alpha: float) -> "RerankInstance":
        return replace(self, alpha=alpha)

    def group_of(self, user: int) -> str:
        return "active" if user in self.active else "inactive"

    @property
    def constrained(self) -> bool:
        return bool(self.active) and bool(self.inactive) and math.isfinite(self.alpha)


@dataclass(frozen=True)
class HitProfile:
    """s_u(h) for h in [lo, hi] with the k-subsets that realize it."""

    user: int
    lo: int
    hi: int
    sums: tuple
    subsets: tuple  # per h: candidate positions, ordered by (−score, item)
    h0: int  # hits of the plain top-k

    def score(self, h: int) -> float:
        if not (self.lo <= h <= self.hi):
            raise SolverError(f"user {self.user}: hit count {h} outside [{self.lo}, {self.hi}]")
        return self.sums[h - self.lo]

    def subset(self, h: int) -> tuple:
        return self.subsets[h - self.lo]


@dataclass(frozen=True)
class RerankSolution:
    items: tuple  # per user (instance order), chosen items by (−score, item)
    hits: tuple
    objective: float
    gap: Fraction
    feasible: bool
    nodes: int
    alpha: float
    alpha_used: Optional[Fraction] = None

    @property
    def gap_float(self) -> float:
        return float(self.gap)

    def report(self) -> dict:
        return {
            "objective": self.objective,
            "gap": float(self.gap),
            "gap_exact": str(self.gap),
            "feasible": self.feasible,
            "nodes": self.nodes,
            "alpha": self.alpha,
            "alpha_used": str(self.alpha_used) if self.alpha_used is not None else None,
        }


# ---------------------------------------------------------------------------
# Instances and profiles
# ---------------------------------------------------------------------------


def build_instance(lists, labels: RelevanceLabels, groups: UserGroups, alpha: float, k: int) -> RerankInstance:
    """One candidate row per user from top-K lists and reference (validation) labels."""
    items_per_user = getattr(lists, "items", lists)
    scores_per_user = getattr(lists, "scores")
    users = []
    for u in range(len(items_per_user)):
        reference = labels.for_user(u)
        items = tuple(int(i) for i in items_per_user[u])
        users.append(
            UserCandidates(
                user=u,
                items=items,
                scores=tuple(float(s) for s in scores_per_user[u]),
                relevant=tuple(i in reference for i in items),
                n_reference=len(reference),
            )
        )
    return RerankInstance(tuple(users), groups.active, groups.inactive, float(alpha), int(k))


def build_profiles(instance: RerankInstance) -> tuple:
    """Per user: s(h) = best h relevant + best (k − h) irrelevant candidates."""
    k = instance.k
    profiles = []
    for cand in instance.users:
        if cand.K < k:
            raise SolverError(f"user {cand.user} has {cand.K} candidates, fewer than k={k}")
        order = cand.order()
        rel = [i for i in order if cand.relevant[i]]
        irr = [i for i in order if not cand.relevant[i]]
        lo, hi = max(0, k - len(irr)), min(k, len(rel))
        rank = {pos: r for r, pos in enumerate(order)}
        sums, subsets = [], []
        for h in range(lo, hi + 1):
            chosen = sorted(rel[:h] + irr[:k - h], key=rank.__getitem__)
            subsets.append(tuple(chosen))
            sums.append(math.fsum(cand.scores[i] for i in chosen))
        h0 = sum(1 for i in order[:k] if cand.relevant[i])
        profiles.append(HitProfile(cand.user, lo, hi, tuple(sums), tuple(subsets), h0))
    return tuple(profiles)


def truncate(instance: RerankInstance) -> RerankSolution:
    """Keep the first k candidates of every user (the unconstrained optimum)."""
    profiles = build_profiles(instance)
    scaling = _Scaling(instance)
    hits = tuple(p.h0 for p in profiles)
    feasible = not instance.constrained or abs(scaling.gap(hits)) <= scaling.alpha_units(instance.alpha)
    return _solution(instance, profiles, scaling, hits, feasible=feasible, nodes=0)


# ---------------------------------------------------------------------------
# Exact search
# ---------------------------------------------------------------------------


class _Scaling:
    """Integer gap units: c_u = coef[u] / denom exactly."""

    def __init__(self, instance: RerankInstance):
        k = instance.k
        n_a, n_b = len(instance.active), len(instance.inactive)
        fracs = []
        for cand in instance.users:
            if cand.user in instance.active:
                fracs.append(Fraction(2, n_a * (k + cand.n_reference)))
            else:
                fracs.append(-Fraction(2, n_b * (k + cand.n_reference)))
        self.denom = math.lcm(*(f.denominator for f in fracs)) if fracs else 1
        self.coef = [int(f * self.denom) for f in fracs]

    def alpha_units(self, alpha: float) -> int:
        return math.floor(Fraction(alpha) * self.denom)

    def gap(self, hits: Sequence[int]) -> int:
        return sum(c * h for c, h in zip(self.coef, hits))


def _objective(instance: RerankInstance, profiles, hits) -> float:
    return math.fsum(
        cand.scores[i] for cand, p, h in zip(instance.users, profiles, hits) for i in p.subset(h)
    )


def _key(instance, profiles, hits) -> tuple:
    """Larger is better: score, then closeness to the plain top-k, then smaller hit vector."""
    dev = sum(abs(h - p.h0) for p, h in zip(profiles, hits))
    return (_objective(instance, profiles, hits), -dev, tuple(-h for h in hits))


def _solution(instance, profiles, scaling, hits, feasible, nodes, alpha_used=None) -> RerankSolution:
    items = tuple(tuple(cand.items[i] for i in p.subset(h)) for cand, p, h in zip(instance.users, profiles, hits))
    gap = Fraction(abs(scaling.gap(hits)), scaling.denom) if instance.active and instance.inactive else Fraction(0)
    return RerankSolution(
        items=items,
        hits=tuple(hits),
        objective=_objective(instance, profiles, hits),
        gap=gap,
        feasible=feasible,
        nodes=nodes,
        alpha=instance.alpha,
        alpha_used=alpha_used,
    )


class _BranchAndBound:
    """Best-first search over hit counts of the users whose domain is not a single value."""

    def __init__(self, instance, profiles, scaling: _Scaling, node_limit: int):
        self.instance = instance
        self.profiles = profiles
        self.coef = scaling.coef
        self.node_limit = node_limit
        self.nodes = 0
        self.fixed = [i for i, p in enumerate(profiles) if p.lo == p.hi]
        free = [i for i, p in enumerate(profiles) if p.lo < p.hi]
        self.free = sorted(free, key=lambda i: (-abs(self.coef[i]) * (profiles[i].hi - profiles[i].lo), i))
        self.base_score = sum(profiles[i].sums[0] for i in self.fixed)
        self.base_gap = sum(self.coef[i] * profiles[i].lo for i in self.fixed)
        n = len(self.free)
        self.suffix_max = [0.0] * (n + 1)
        self.suffix_gmin = [0] * (n + 1)
        self.suffix_gmax = [0] * (n + 1)
        for pos in range(n - 1, -1, -1):
            p, c = profiles[self.free[pos]], self.coef[self.free[pos]]
            self.suffix_max[pos] = self.suffix_max[pos + 1] + max(p.sums)
            ends = (c * p.lo, c * p.hi)
            self.suffix_gmin[pos] = self.suffix_gmin[pos + 1] + min(ends)
            self.suffix_gmax[pos] = self.suffix_gmax[pos + 1] + max(ends)

    # Lagrangian relaxation of the two-sided constraint: for any θ,
    # max Σ s_u(h_u) − θ·g(h) + |θ|·α bounds the constrained optimum.
    def _lagrangian(self, theta: float, alpha: int) -> float:
        total = self.base_score - theta * self.base_gap + abs(theta) * alpha
        for i in self.free:
            p, c = self.profiles[i], self.coef[i]
            total += max(s - theta * c * h for h, s in zip(range(p.lo, p.hi + 1), p.sums))
        return total

    def _theta(self, alpha: int) -> float:
        if not self.free:
            return 0.0
        slopes = [
            abs(p.sums[j + 1] - p.sums[j]) / abs(self.coef[i])
            for i in self.free
            for p in (self.profiles[i],)
            for j in range(len(p.sums) - 1)
            if self.coef[i]
        ]
        limit = 1.01 * max(slopes, default=0.0) + 1e-12
        result = minimize_scalar(lambda t: self._lagrangian(t, alpha), bounds=(-limit, limit), method="bounded")
        theta = float(result.x)
        return theta if self._lagrangian(theta, alpha) < self._lagrangian(0.0, alpha) else 0.0

    def _suffix_lag(self, theta: float) -> list[float]:
        n = len(self.free)
        out = [0.0] * (n + 1)
        for pos in range(n - 1, -1, -1):
            p, c = self.profiles[self.free[pos]], self.coef[self.free[pos]]
            out[pos] = out[pos + 1] + max(s - theta * c * h for h, s in zip(range(p.lo, p.hi + 1), p.sums))
        return out

    def _full_hits(self, choice: tuple) -> tuple:
        hits = [p.lo for p in self.profiles]
        for i, h in zip(self.free, choice):
            hits[i] = h
        return tuple(hits)

    def _greedy(self, alpha: int) -> Optional[tuple]:
        """Start from the plain top-k and move single hit counts toward gap 0 at least score cost."""
        hits = [p.h0 for p in self.profiles]
        gap = sum(c * h for c, h in zip(self.coef, hits))
        for _ in range(sum(p.hi - p.lo for p in self.profiles) + 1):
            if abs(gap) <= alpha:
                return tuple(hits)
            best = None
            for i in self.free:
                p, c = self.profiles[i], self.coef[i]
                for step in (-1, 1):
                    h = hits[i] + step
                    if not (p.lo <= h <= p.hi):
                        continue
                    new_gap = gap + c * step
                    reduction = abs(gap) - abs(new_gap)
                    if reduction <= 0:
                        continue
                    cost = p.score(hits[i]) - p.score(h)
                    cand = (cost / reduction, i, step)
                    if best is None or cand < best:
                        best = cand
            if best is None:
                return None
            _, i, step = best
            hits[i] += step
            gap += self.coef[i] * step
        return None

    def search(self, alpha: int) -> Optional[tuple]:
        """Best hit vector with |gap| ≤ alpha (integer units), or None if there is none."""
        n = len(self.free)
        best_hits = self._greedy(alpha)
        best_key = _key(self.instance, self.profiles, best_hits) if best_hits is not None else None
        theta = self._theta(alpha)
        lag = self._suffix_lag(theta)
        counter = itertools.count()

        def bound(pos, score, gap):
            plain = score + self.suffix_max[pos]
            relaxed = score - theta * gap + lag[pos] + abs(theta) * alpha
            return min(plain, relaxed)

        def viable(pos, gap):
            return gap + self.suffix_gmin[pos] <= alpha and gap + self.suffix_gmax[pos] >= -alpha

        def tol(value):
            return 1e-9 * max(1.0, abs(value))

        heap = []
        if viable(0, self.base_gap):
            heapq.heappush(heap, (-bound(0, self.base_score, self.base_gap), next(counter), 0, self.base_score, self.base_gap, ()))
        while heap:
            neg_bound, _, pos, score, gap, choice = heapq.heappop(heap)
            if best_key is not None and -neg_bound < best_key[0] - tol(best_key[0]):
                break
            self.nodes += 1
            if self.nodes > self.node_limit:
                raise SolverError(f"branch-and-bound exceeded the node limit of {self.node_limit}")
            if pos == n:
                hits = self._full_hits(choice)
                key = _key(self.instance, self.profiles, hits)
                if best_key is None or key > best_key:
                    best_hits, best_key = hits, key
                continue
            i = self.free[pos]
            p, c = self.profiles[i], self.coef[i]
            for h in range(p.lo, p.hi + 1):
                child_gap = gap + c * h
                if not viable(pos + 1, child_gap):
                    continue
                child_score = score + p.sums[h - p.lo]
                b = bound(pos + 1, child_score, child_gap)
                if best_key is not None and b < best_key[0] - tol(best_key[0]):
                    continue
                heapq.heappush(heap, (-b, next(counter), pos + 1, child_score, child_gap, choice + (h,)))
        return best_hits

    def min_abs_gap(self) -> int:
        """Smallest achievable |gap| in integer units (depth-first with interval pruning)."""
        n = len(self.free)
        best = abs(sum(c * p.h0 for c, p in zip(self.coef, self.profiles)))
        stack = [(0, self.base_gap)]
        while stack and best > 0:
            pos, gap = stack.pop()
            self.nodes += 1
            if self.nodes > self.node_limit:
                raise SolverError(f"gap minimization exceeded the node limit of {self.node_limit}")
            lo, hi = gap + self.suffix_gmin[pos], gap + self.suffix_gmax[pos]
            floor = 0 if lo <= 0 <= hi else min(abs(lo), abs(hi))
            if floor >= best:
                continue
            if pos == n:
                best = abs(gap)
                continue
            i = self.free[pos]
            p, c = self.profiles[i], self.coef[i]
            children = [(gap + c * h) for h in range(p.lo, p.hi + 1)]
            # visit the child closest to zero first
            for child in sorted(children, key=abs, reverse=True):
                stack.append((pos + 1, child))
        return best


def solve(instance: RerankInstance, node_limit: int = DEFAULT_NODE_LIMIT) -> RerankSolution:
    """Exact optimum of the constrained re-ranking program.

    If no selection meets α, the smallest achievable gap is found first and the
    program is re-solved with α set to it; the result is flagged infeasible.
    """
    profiles = build_profiles(instance)
    scaling = _Scaling(instance)
    h0 = tuple(p.h0 for p in profiles)
    if not instance.constrained:
        return _solution(instance, profiles, scaling, h0, feasible=True, nodes=0)
    alpha = scaling.alpha_units(instance.alpha)
    if abs(scaling.gap(h0)) <= alpha:
        return _solution(instance, profiles, scaling, h0, feasible=True, nodes=0)

    bnb = _BranchAndBound(instance, profiles, scaling, node_limit)
    hits = bnb.search(alpha)
    if hits is not None:
        solution = _solution(instance, profiles, scaling, hits, feasible=True, nodes=bnb.nodes)
        logger.info(
            f"Re-ranked {len(profiles)} users: objective={solution.objective:.6f}, "
            f"gap={solution.gap_float:.6f} <= alpha={instance.alpha}, nodes={bnb.nodes}"
        )
        return solution

    min_gap = bnb.min_abs_gap()
    hits = bnb.search(min_gap)
    if hits is None:
        raise SolverError("gap-minimizing re-solve found no selection")
    alpha_used = Fraction(min_gap, scaling.denom)
    logger.warning(f"alpha={instance.alpha} is infeasible; smallest achievable gap is {float(alpha_used):.6f}")
    return _solution(instance, profiles, scaling, hits, feasible=False, nodes=bnb.nodes, alpha_used=alpha_used)


def brute_force_solve(instance: RerankInstance, limit: int = BRUTE_FORCE_LIMIT) -> RerankSolution:
    """Enumerate every joint k-subset selection. Refuses instances with more than ``limit`` joint choices."""
    k = instance.k
    total = 1
    for cand in instance.users:
        if cand.K < k:
            raise SolverError(f"user {cand.user} has {cand.K} candidates, fewer than k={k}")
        total *= math.comb(cand.K, k)
    if total > limit:
        raise SolverError(f"{total} joint selections exceed the brute-force limit of {limit}")

    profiles = build_profiles(instance)
    scaling = _Scaling(instance)
    alpha = scaling.alpha_units(instance.alpha) if instance.constrained else None
    per_user = []
    for cand, p in zip(instance.users, profiles):
        rank = {pos: r for r, pos in enumerate(cand.order())}
        options = []
        # rank order, so that among equal keys the first subset holds the smaller item ids
        for combo in itertools.combinations(cand.order(), k):
            chosen = tuple(sorted(combo, key=rank.__getitem__))
            options.append((chosen, sum(1 for i in chosen if cand.relevant[i])))
        per_user.append(options)

    best_feasible, best_fallback = None, None
    for joint in itertools.product(*per_user):
        hits = tuple(h for _, h in joint)
        objective = math.fsum(cand.scores[i] for cand, (chosen, _) in zip(instance.users, joint) for i in chosen)
        dev = sum(abs(h - p.h0) for p, h in zip(profiles, hits))
        key = (objective, -dev, tuple(-h for h in hits))
        gap = abs(scaling.gap(hits))
        if alpha is None or gap <= alpha:
            if best_feasible is None or key > best_feasible[0]:
                best_feasible = (key, joint, gap)
        fallback_key = (-gap, *key)
        if best_fallback is None or fallback_key > best_fallback[0]:
            best_fallback = (fallback_key, joint, gap)

    feasible = best_feasible is not None
    _, joint, gap = best_feasible if feasible else best_fallback
    items = tuple(tuple(cand.items[i] for i in chosen) for cand, (chosen, _) in zip(instance.users, joint))
    hits = tuple(h for _, h in joint)
    return RerankSolution(
        items=items,
        hits=hits,
        objective=math.fsum(cand.scores[i] for cand, (chosen, _) in zip(instance.users, joint) for i in chosen),
        gap=Fraction(gap, scaling.denom) if instance.active and instance.inactive else Fraction(0),
        feasible=feasible,
        nodes=total,
        alpha=instance.alpha,
        alpha_used=None if feasible else Fraction(gap, scaling.denom),
    )


def audit_gap(instance: RerankInstance, solution: RerankSolution) -> Fraction:
    """Recompute the F1@k gap of ``solution`` from its item sets in exact arithmetic."""
    if not instance.active or not instance.inactive:
        return Fraction(0)
    k = instance.k
    means = {"active": Fraction(0), "inactive": Fraction(0)}
    for cand, items in zip(instance.users, solution.items):
        if len(items) != k or not set(items) <= set(cand.items):
            raise SolverError(f"user {cand.user}: solution is not a k-subset of the candidates")
        relevant = {item for item, flag in zip(cand.items, cand.relevant) if flag}
        f1 = Fraction(2 * len(relevant & set(items)), k + cand.n_reference)
        group = instance.group_of(cand.user)
        size = len(instance.active) if group == "active" else len(instance.inactive)
        means[group] += f1 / size
    return abs(means["active"] - means["inactive"])


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def save_instance(instance: RerankInstance, path: Union[str, Path]) -> Path:
    path = Path(path)
    rows = [
        {
            "user": c.user,
            "group": instance.group_of(c.user),
            "items": join_ints(c.items),
            "scores": " ".join(repr(float(s)) for s in c.scores),
            "relevant": join_ints(int(r) for r in c.relevant),
            "n_reference": c.n_reference,
        }
        for c in instance.users
    ]
    save_csv(pd.DataFrame(rows), path, INSTANCE_COLUMNS)
    write_json({"alpha": instance.alpha, "k": instance.k}, path.with_suffix(".json"))
    return path


def load_instance(path: Union[str, Path]) -> RerankInstance:
    path = Path(path)
    if not path.exists():
        raise SolverError(f"Missing instance file: {path}")
    meta = read_json(path.with_suffix(".json"))
    df = pd.read_csv(path, dtype={"items": str, "scores": str, "relevant": str}, keep_default_na=False)
    users = []
    for row in df.itertuples(index=False):
        scores = tuple(float(tok) for tok in str(row.scores).split())
        users.append(
            UserCandidates(
                user=int(row.user),
                items=tuple(split_ints(row.items)),
                scores=scores,
                relevant=tuple(bool(x) for x in split_ints(row.relevant)),
                n_reference=int(row.n_reference),
            )
        )
    active = frozenset(int(u) for u, g in zip(df["user"], df["group"]) if g == "active")
    inactive = frozenset(int(u) for u, g in zip(df["user"], df["group"]) if g != "active")
    return RerankInstance(tuple(users), active, inactive, float(meta["alpha"]), int(meta["k"]))


def save_solution(instance: RerankInstance, solution: RerankSolution, path: Union[str, Path]) -> Path:
    path = Path(path)
    rows = [
        {"user": c.user, "group": instance.group_of(c.user), "items": join_ints(items), "hits": h}
        for c, items, h in zip(instance.users, solution.items, solution.hits)
    ]
    save_csv(pd.DataFrame(rows), path, SOLUTION_COLUMNS)
    write_json(solution.report(), path.with_suffix(".json"))
    return path


def solution_lists(solution: RerankSolution) -> list:
    """Chosen items per user, in the layout the metrics expect."""
    return [list(items) for items in solution.items]
