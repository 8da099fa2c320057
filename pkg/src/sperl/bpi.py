"""Backward policy iteration towards subgame-perfect equilibrium policies.

One outer iteration sweeps ``k = T-1, ..., 0``: it evaluates ``Q_k`` under the
policy whose later epochs were already improved in this sweep, then replaces
``pi_k(x)`` by a strictly better action if there is one. Ties keep the old
action, which makes the procedure stop once no self can gain by deviating.

Progress is measured with the *policy basis*, the per-time vector of on-policy
action values, compared lexicographically from the last epoch backwards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .core import FiniteSpace, StructureError, TabularPolicy, TicProblem
from .exact import ValueTables, adjustments_at, evaluate, q_at

EPS_TIE = 1e-9


class Verdict(str, Enum):
    GREATER = "Greater"
    LESS = "Less"
    EQUAL = "Equal"
    INCOMPARABLE = "Incomparable"


# ---------------------------------------------------------------------------
# Action specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FullSweepArgmax:
    """Search every action."""


@dataclass(frozen=True)
class LocalSweepArgmax:
    """Search actions whose value lies strictly within ``radius`` of the current one."""

    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("local sweep radius must be positive")


@dataclass(frozen=True)
class CustomSpec:
    """User proposer ``propose(k, x, q_row, old) -> action index or None``.

    The proposal is accepted only if it is strictly better than ``old`` by
    more than the tie tolerance.
    """

    propose: Callable[[int, int, np.ndarray, int], int | None]


ActionSpec = FullSweepArgmax | LocalSweepArgmax | CustomSpec


def neighborhood(space: FiniteSpace, center: int, radius: float) -> np.ndarray:
    """Indices of actions ``u`` with ``|u - space[center]| < radius``."""
    if not radius > 0:
        raise ValueError("neighborhood radius must be positive")
    vals = space.values
    return np.flatnonzero(np.abs(vals - vals[center]) < radius)


def improve_action(q_row: np.ndarray, old: int, candidates: np.ndarray, eps: float = EPS_TIE) -> int:
    """Strictly-improving argmax over ``candidates`` with the consistent tie-break.

    Returns ``old`` unless some candidate beats it by more than ``eps``.
    Among near-maximizers the lowest index wins.
    """
    cand_q = q_row[candidates]
    best = cand_q.max()
    if not best > q_row[old] + eps:
        return old
    ok = candidates[(cand_q >= best - eps) & (cand_q > q_row[old] + eps)]
    return int(ok.min())


def _propose(problem: TicProblem, spec: ActionSpec, k: int, x: int, q_row: np.ndarray, old: int, eps: float) -> int:
    if isinstance(spec, FullSweepArgmax):
        return improve_action(q_row, old, np.arange(q_row.size), eps)
    if isinstance(spec, LocalSweepArgmax):
        space = problem.actions[k]
        assert isinstance(space, FiniteSpace)
        return improve_action(q_row, old, neighborhood(space, old, spec.radius), eps)
    proposal = spec.propose(k, x, q_row, old)
    if proposal is None or not q_row[proposal] > q_row[old] + eps:
        return old
    return int(proposal)


# ---------------------------------------------------------------------------
# Policy basis and orders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyBasis:
    """On-policy action values ``Q_k(x, pi_k(x))`` per time, in state-index order."""

    slices: tuple[np.ndarray, ...]

    @property
    def dim(self) -> int:
        return int(sum(s.size for s in self.slices))

    def flat(self) -> np.ndarray:
        return np.concatenate(self.slices) if self.slices else np.zeros(0)


def basis_from_tables(tables: ValueTables, policy: TabularPolicy) -> PolicyBasis:
    return PolicyBasis(
        tuple(tables.q(k)[np.arange(policy.at(k).size), policy.at(k)].copy() for k in range(tables.horizon))
    )


def policy_basis(problem: TicProblem, policy: TabularPolicy) -> PolicyBasis:
    return basis_from_tables(evaluate(problem, policy), policy)


def lex_compare(a: PolicyBasis, b: PolicyBasis, eps: float = EPS_TIE) -> Verdict:
    """Compare at the largest time whose slices differ, then element-wise."""
    if len(a.slices) != len(b.slices) or any(x.shape != y.shape for x, y in zip(a.slices, b.slices)):
        raise StructureError("policy bases have different shapes")
    for k in reversed(range(len(a.slices))):
        diff = a.slices[k] - b.slices[k]
        if np.any(np.abs(diff) > eps):
            if np.all(diff >= -eps):
                return Verdict.GREATER
            if np.all(diff <= eps):
                return Verdict.LESS
            return Verdict.INCOMPARABLE
    return Verdict.EQUAL


# ---------------------------------------------------------------------------
# Backward policy iteration
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    policy: TabularPolicy
    basis: PolicyBasis
    verdict: Verdict
    improved: tuple[np.ndarray, ...]
    changed: int


@dataclass
class BpiTrace:
    initial_basis: PolicyBasis
    iterations: list[IterationRecord] = field(default_factory=list)
    terminated: bool = False

    def __len__(self) -> int:
        return len(self.iterations)

    @property
    def termination_index(self) -> int | None:
        return len(self.iterations) if self.terminated else None

    def to_dict(self) -> dict:
        return {
            "terminated": self.terminated,
            "termination_index": self.termination_index,
            "initial_basis": [s.tolist() for s in self.initial_basis.slices],
            "iterations": [
                {
                    "policy": rec.policy.to_lists(),
                    "basis": [s.tolist() for s in rec.basis.slices],
                    "verdict": rec.verdict.value,
                    "improved": [f.astype(int).tolist() for f in rec.improved],
                    "changed": rec.changed,
                }
                for rec in self.iterations
            ],
        }


def sweep(
    problem: TicProblem, policy: TabularPolicy, spec: ActionSpec, eps: float = EPS_TIE
) -> tuple[TabularPolicy, ValueTables, tuple[np.ndarray, ...]]:
    """One backward evaluate-and-improve pass.

    Returns the new policy, its tables (``Q_k`` for the new policy at every
    ``k``) and per-time flags of the states whose action changed.
    """
    T = problem.horizon
    tables = ValueTables.empty(T)
    current = policy
    flags: list[np.ndarray] = [np.zeros(0, dtype=bool)] * T
    for k in reversed(range(T)):
        adjustments_at(problem, current, tables, k)
        q_at(problem, current, tables, k)
        q = tables.q(k)
        old = current.at(k)
        new = np.array([_propose(problem, spec, k, x, q[x], int(old[x]), eps) for x in range(old.size)])
        flags[k] = new != old
        current = current.with_slice(k, new)
    return current, tables, tuple(flags)


def bpi_run(
    problem: TicProblem,
    initial: TabularPolicy,
    spec: ActionSpec | None = None,
    max_iters: int = 50,
    eps: float = EPS_TIE,
) -> tuple[TabularPolicy, BpiTrace]:
    """Iterate backward sweeps until the policy stops changing.

    The trace holds one record per sweep; the last record of a terminated
    run repeats the returned policy. Running out of ``max_iters`` sets
    ``trace.terminated = False`` and emits a warning.
    """
    problem.require_finite()
    initial.validate(problem)
    if initial.start != 0:
        raise StructureError("bpi needs a full policy")
    spec = spec or FullSweepArgmax()
    trace = BpiTrace(initial_basis=policy_basis(problem, initial))
    policy = initial
    prev_basis = trace.initial_basis
    for _ in range(max_iters):
        new, tables, flags = sweep(problem, policy, spec, eps)
        basis = basis_from_tables(tables, new)
        trace.iterations.append(
            IterationRecord(
                policy=new,
                basis=basis,
                verdict=lex_compare(basis, prev_basis, eps),
                improved=flags,
                changed=int(sum(f.sum() for f in flags)),
            )
        )
        if new == policy:
            trace.terminated = True
            return new, trace
        policy, prev_basis = new, basis
    warnings.warn(f"backward policy iteration did not terminate within {max_iters} sweeps", RuntimeWarning)
    return policy, trace


# ---------------------------------------------------------------------------
# Equilibrium checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpeVerdict:
    ok: bool
    witness: tuple[int, int, int] | None = None
    gain: float = 0.0
    violations: int = 0


def _check(
    problem: TicProblem,
    policy: TabularPolicy,
    candidates: Callable[[int, int, int], np.ndarray],
    eps: float,
) -> SpeVerdict:
    tables = evaluate(problem, policy)
    witness, gain, count = None, 0.0, 0
    for t in range(problem.horizon):
        q = tables.q(t)
        acts = policy.at(t)
        for x in range(acts.size):
            for u in candidates(t, x, int(acts[x])):
                d = q[x, u] - q[x, acts[x]]
                if d > eps:
                    count += 1
                    if witness is None:
                        witness, gain = (t, x, int(u)), float(d)
    return SpeVerdict(ok=count == 0, witness=witness, gain=gain, violations=count)


def spe_check(problem: TicProblem, policy: TabularPolicy, eps: float = EPS_TIE) -> SpeVerdict:
    """No self can gain more than ``eps`` by a one-epoch deviation.

    The witness is the first violating ``(t, x, u)`` in index order.
    """
    problem.require_finite()
    return _check(problem, policy, lambda t, x, a: np.arange(problem.actions[t].size), eps)


def local_spe_check(problem: TicProblem, policy: TabularPolicy, radius: float, eps: float = EPS_TIE) -> SpeVerdict:
    """As :func:`spe_check` but deviations restricted to ``|u - pi_t(x)| < radius``."""
    problem.require_finite()
    if not radius > 0:
        raise ValueError("empty neighborhood: radius must be positive")

    def cands(t: int, x: int, a: int) -> np.ndarray:
        space = problem.actions[t]
        assert isinstance(space, FiniteSpace)
        return neighborhood(space, a, radius)

    return _check(problem, policy, cands, eps)
