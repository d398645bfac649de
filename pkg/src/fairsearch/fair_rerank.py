"""Statistical re-ranking under a ranked group-fairness constraint.

A ranking of length k is considered fair when, at every prefix length i,
the number of protected items among the top i is plausible under a
Binomial(i, p) draw at significance level alpha.  Inverting that test per
prefix yields an integer table of minimum protected counts (one entry per
position), which is used both to verify rankings and to repair them with
a greedy two-queue merge that disturbs the score order as little as
possible.

Because the k prefix tests are applied jointly, the per-position level is
optionally tightened (``adjust_alpha``) so that the probability of a
fairly-generated ranking failing any prefix stays at or below alpha.

All functions are pure and all types are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "Candidate",
    "FairnessParams",
    "MTable",
    "ReRankResult",
    "binomial_cdf",
    "required_protected",
    "compute_fail_probability",
    "adjust_alpha",
    "construct_mtable",
    "is_fair",
    "fair_rerank",
    "mtable_to_record",
    "mtable_from_record",
    "mtable_key",
]

# Below this, (1-p)**k underflows and the linear pmf recurrence dies at 0.
_LOG_UNDERFLOW = -700.0


@dataclass(frozen=True)
class Candidate:
    """One rankable item: identifier, utility score, group membership."""

    id: str
    score: float
    protected: bool

    def __post_init__(self):
        if not self.id:
            raise ValueError("candidate id must be non-empty")
        if not math.isfinite(self.score):
            raise ValueError(f"candidate {self.id!r} has non-finite score")


@dataclass(frozen=True)
class FairnessParams:
    """Parameters of the per-prefix binomial test.

    k is the ranking length under test, p the minimum target proportion of
    protected items, alpha the significance level.
    """

    k: int
    p: float
    alpha: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must be in (0, 1), got {self.p}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class MTable:
    """Per-position minimum protected counts.

    ``entries[i]`` is the minimum number of protected items required among
    the top i+1 positions.  ``alpha_c`` is the per-position significance
    level the entries were built with (equal to ``params.alpha`` when no
    multi-test adjustment was applied).
    """

    params: FairnessParams
    alpha_c: float
    entries: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))
        if not 0.0 < self.alpha_c <= self.params.alpha:
            raise ValueError(
                f"alpha_c must be in (0, alpha], got {self.alpha_c} "
                f"with alpha={self.params.alpha}"
            )
        if len(self.entries) != self.params.k:
            raise ValueError(
                f"expected {self.params.k} entries, got {len(self.entries)}"
            )
        prev = 0
        for i, e in enumerate(self.entries):
            if e < prev or e - prev > 1:
                raise ValueError(
                    f"entries must be non-decreasing with steps of 0 or 1; "
                    f"entry {i} is {e} after {prev}"
                )
            if e > i + 1:
                raise ValueError(f"entry {i} is {e}, exceeds prefix length {i + 1}")
            prev = e


@dataclass(frozen=True)
class ReRankResult:
    """Outcome of a constraint-satisfying re-rank.

    ``violations`` holds the 1-based positions where the constraint could
    not be met because the protected pool was exhausted; ``satisfied`` is
    true iff it is empty.
    """

    ranking: tuple[Candidate, ...]
    satisfied: bool
    violations: tuple[int, ...]


def _check_probability(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must be in (0, 1), got {value}")


def binomial_cdf(tau: int, k: int, p: float) -> float:
    """P(X <= tau) for X ~ Binomial(k, p).

    Uses the multiplicative pmf recurrence, so cost is linear in tau and no
    factorials are formed.  Falls back to log-space accumulation when
    (1-p)**k underflows.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    if tau > k:
        raise ValueError(f"tau={tau} exceeds k={k}")
    _check_probability("p", p)
    if tau == k:
        return 1.0
    if k * math.log1p(-p) > _LOG_UNDERFLOW:
        ratio = p / (1.0 - p)
        pmf = (1.0 - p) ** k
        cdf = pmf
        for j in range(1, tau + 1):
            pmf *= ratio * (k - j + 1) / j
            cdf += pmf
        return min(1.0, cdf)
    # log-space: sum exp(log_pmf - top) to avoid underflow for very large k
    log_ratio = math.log(p) - math.log1p(-p)
    log_pmf = k * math.log1p(-p)
    log_terms = [log_pmf]
    for j in range(1, tau + 1):
        log_pmf += log_ratio + math.log((k - j + 1) / j)
        log_terms.append(log_pmf)
    top = max(log_terms)
    return min(1.0, math.exp(top) * math.fsum(math.exp(t - top) for t in log_terms))


def required_protected(i: int, p: float, alpha_c: float) -> int:
    """Smallest tau with binomial_cdf(tau, i, p) > alpha_c.

    This is the minimum number of protected items a fair prefix of length
    i must contain to pass the test at level alpha_c.  Always in [0, i].
    """
    if i < 1:
        raise ValueError(f"i must be >= 1, got {i}")
    _check_probability("p", p)
    _check_probability("alpha_c", alpha_c)
    if i * math.log1p(-p) > _LOG_UNDERFLOW:
        # same arithmetic as binomial_cdf's linear branch, stopped early
        ratio = p / (1.0 - p)
        pmf = (1.0 - p) ** i
        cdf = pmf
        tau = 0
        while cdf <= alpha_c and tau < i:
            tau += 1
            pmf *= ratio * (i - tau + 1) / tau
            cdf += pmf
        return tau
    tau = 0
    while tau < i and binomial_cdf(tau, i, p) <= alpha_c:
        tau += 1
    return tau


def _entries_at(k: int, p: float, alpha_c: float) -> tuple[int, ...]:
    return tuple(required_protected(i, p, alpha_c) for i in range(1, k + 1))


def _fail_probability(entries: tuple[int, ...], p: float) -> float:
    """Probability that a positionwise-p ranking violates any prefix minimum.

    Dynamic program over the distribution of the protected count: advance
    one position at a time, then move all states below the current minimum
    into the failure mass (they can never recover because the minimum is
    non-decreasing).
    """
    dist = [1.0]
    q = 1.0 - p
    for need in entries:
        grown = [0.0] * (len(dist) + 1)
        for c, mass in enumerate(dist):
            if mass == 0.0:
                continue
            grown[c] += mass * q
            grown[c + 1] += mass * p
        for c in range(min(need, len(grown))):
            grown[c] = 0.0
        dist = grown
    return min(1.0, max(0.0, 1.0 - math.fsum(dist)))


def compute_fail_probability(mtable: MTable) -> float:
    """Exact probability that a fairly generated ranking fails the table.

    "Fairly generated" means each position is independently protected with
    probability ``params.p``; failure means some prefix count drops below
    its entry.  This is the family-wise error the adjustment controls.
    """
    return _fail_probability(mtable.entries, mtable.params.p)


def adjust_alpha(params: FairnessParams, tolerance: float = 1e-7) -> float:
    """Largest per-position level whose table keeps the joint failure <= alpha.

    The failure probability is a non-decreasing step function of the
    per-position level, so a binary search down to ``tolerance`` locates
    the boundary; the returned value is the highest probed level on the
    feasible side.  When the unadjusted table already satisfies the bound,
    alpha itself is returned.
    """
    k, p, alpha = params.k, params.p, params.alpha
    if _fail_probability(_entries_at(k, p, alpha), p) <= alpha:
        return alpha
    lo, hi = 0.0, alpha
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _fail_probability(_entries_at(k, p, mid), p) <= alpha:
            lo = mid
        else:
            hi = mid
    while lo <= 0.0:
        # only reachable for extreme k; halve until feasible
        hi *= 0.5
        if _fail_probability(_entries_at(k, p, hi), p) <= alpha:
            lo = hi
    return lo


def construct_mtable(params: FairnessParams, adjust: bool) -> MTable:
    """Build the minimum-count table for ``params``.

    With ``adjust`` the per-position level is first tightened via
    ``adjust_alpha`` so the joint test over all k prefixes keeps its
    family-wise error at or below alpha.
    """
    alpha_c = adjust_alpha(params) if adjust else params.alpha
    return MTable(params, alpha_c, _entries_at(params.k, params.p, alpha_c))


def is_fair(ranking, mtable: MTable) -> tuple[bool, int | None]:
    """Test the top-k prefix of ``ranking`` against ``mtable``.

    Returns (True, None) when every prefix meets its minimum, otherwise
    (False, i) with i the smallest violating 1-based position.  The
    ranking must contain at least k candidates.
    """
    ranking = list(ranking)
    k = mtable.params.k
    if len(ranking) < k:
        raise ValueError(f"ranking has {len(ranking)} items, needs at least k={k}")
    count = 0
    for i in range(k):
        if ranking[i].protected:
            count += 1
        if count < mtable.entries[i]:
            return False, i + 1
    return True, None


def fair_rerank(candidates, mtable: MTable) -> ReRankResult:
    """Re-rank ``candidates`` to satisfy ``mtable`` with minimal reordering.

    Greedy two-queue merge: both groups are kept sorted by score (ties:
    protected first, then id), and at each position the best overall
    candidate is placed unless doing so would leave the prefix short of
    protected items, in which case the best protected candidate is
    placed instead.  If the protected queue runs dry while a constraint
    binds, the position is recorded as a violation and the best remaining
    candidate is placed; a result is always produced.

    Output length is min(k, number of candidates); within-group order is
    preserved.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("candidate set is empty")
    seen = set()
    for c in cands:
        if c.id in seen:
            raise ValueError(f"duplicate candidate id {c.id!r}")
        seen.add(c.id)

    prot = sorted((c for c in cands if c.protected), key=lambda c: (-c.score, c.id))
    nonp = sorted((c for c in cands if not c.protected), key=lambda c: (-c.score, c.id))
    out: list[Candidate] = []
    violations: list[int] = []
    count = 0
    pi = ni = 0
    for pos in range(1, min(mtable.params.k, len(cands)) + 1):
        need = mtable.entries[pos - 1]
        have_prot = pi < len(prot)
        have_nonp = ni < len(nonp)
        # ties go to the protected candidate
        best_is_protected = have_prot and (
            not have_nonp or prot[pi].score >= nonp[ni].score
        )
        if best_is_protected or (have_prot and count < need):
            out.append(prot[pi])
            pi += 1
            count += 1
        else:
            if count < need:
                violations.append(pos)
            out.append(nonp[ni])
            ni += 1
    return ReRankResult(tuple(out), not violations, tuple(violations))


def mtable_key(k: int, p: float, alpha: float) -> str:
    """Storage key for a table: exact decimal rendering of (k, p, alpha)."""
    return f"{int(k)}|{float(p)!r}|{float(alpha)!r}"


def mtable_to_record(mtable: MTable) -> dict:
    """Flat serializable form: {k, p, alpha, alpha_c, entries}."""
    return {
        "k": mtable.params.k,
        "p": mtable.params.p,
        "alpha": mtable.params.alpha,
        "alpha_c": mtable.alpha_c,
        "entries": list(mtable.entries),
    }


def mtable_from_record(record: dict) -> MTable:
    params = FairnessParams(
        int(record["k"]), float(record["p"]), float(record["alpha"])
    )
    return MTable(params, float(record["alpha_c"]), tuple(record["entries"]))
