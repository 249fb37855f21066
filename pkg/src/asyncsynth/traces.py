"""Trace orders, data-race detection, and the statement orders for repair.

Four strict partial orders are derived from one execution:

  mo  same-task program order;
  co  mo plus "the call action precedes everything its callee does";
  so  co plus "everything the callee does precedes everything the caller
      does after the call" — the order the statements would have in the
      synchronous program, which is why a callee action can be so-before a
      caller action that occurred earlier in the interleaving;
  hb  co plus what is genuinely enforced at runtime: the callee finishes
      before the caller's continuation after awaiting it; the callee's
      prefix up to its first await runs before the caller's continuation
      after the call; a callee with no await at all runs synchronously.

A data race is a pair of accesses to the same global, at least one a
store, unordered by hb either way; it is reported in so order, which is
well defined because conflicting actions of different tasks are always
so-comparable (they are ordered through their lowest common caller).

Orders are kept as one bitmask per action (bit j of mask i set iff action
i precedes action j), closed under transitivity.  mo/co/hb edges always
point forward in the interleaving, so is closed by fixpoint since its
callee-to-continuation edges may point backwards.

The statement order `s ≺ s'` ("some synchronous run first executes s
before first executing s'") is computed by replaying the bounded
synchronous runs and comparing first-occurrence indices — the same answer
the flag instrumentation gives, with the flag kept in the harness instead
of woven into the program text.  Its tie-break for loops uses forward
reachability in the interprocedural control-flow graph with back edges
removed; the graph is context-insensitive (a callee exit returns to every
call site), which can over-approximate reachability across call sites but
never misses a path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

from .frontend import (
    Call, ENTRY, EXIT, Program, StmtId, build_stmt_graph, iter_stmts,
)
from .interp import (
    AwaitEv, CallEv, Execution, ExplorationConfig, LoadEv, StoreEv, explore,
    run_synchronous,
)


# --------------------------------------------------------------------------
# Orders over one execution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Trace:
    execution: Execution
    mo: tuple  # bitmasks: bit j of mo[i] set iff action i mo-precedes j
    co: tuple
    so: tuple
    hb: tuple


def before(rel: tuple, i: int, j: int) -> bool:
    """Is action i ordered before action j in the given relation?"""
    return bool(rel[i] >> j & 1)


def _close(direct: list) -> tuple:
    """Transitive closure of a bitmask adjacency list by fixpoint."""
    succ = list(direct)
    changed = True
    while changed:
        changed = False
        for i in range(len(succ)):
            s = succ[i]
            new = s
            m = s
            while m:
                j = (m & -m).bit_length() - 1
                m &= m - 1
                new |= succ[j]
            if new != s:
                succ[i] = new
                changed = True
    return tuple(succ)


def compute_orders(ex: Execution) -> Trace:
    acts = ex.actions
    n = len(acts)
    by_task: dict = {}
    for i, a in enumerate(acts):
        by_task.setdefault(a.task, []).append(i)
    first_of = {t: ps[0] for t, ps in by_task.items()}
    last_of = {t: ps[-1] for t, ps in by_task.items()}
    first_await = {}
    for i, a in enumerate(acts):
        if isinstance(a.event, AwaitEv) and a.task not in first_await:
            first_await[a.task] = i

    def next_of(task: int, pos: int) -> Optional[int]:
        for p in by_task[task]:
            if p > pos:
                return p
        return None

    mo_d = [0] * n
    for ps in by_task.values():
        for a, b in zip(ps, ps[1:]):
            mo_d[a] |= 1 << b

    co_d = list(mo_d)
    so_extra = []
    hb_extra = []
    for c, a in enumerate(acts):
        if isinstance(a.event, CallEv):
            callee = a.event.callee
            if callee in first_of:
                co_d[c] |= 1 << first_of[callee]
            nxt = next_of(a.task, c)
            if nxt is not None and callee in by_task:
                # so: the whole callee precedes the caller's continuation
                so_extra.append((last_of[callee], nxt))
                # hb: the callee's prefix up to its first await does too;
                # a callee that never awaits ran synchronously in full
                if callee in first_await:
                    hb_extra.append((first_await[callee], nxt))
                else:
                    hb_extra.append((last_of[callee], nxt))
        if isinstance(a.event, AwaitEv) and isinstance(a.event.target, int):
            # hb: the awaited task is done before the awaiter's continuation
            target = a.event.target
            nxt = next_of(a.task, c)
            if nxt is not None and target in by_task:
                hb_extra.append((last_of[target], nxt))

    so_d = list(co_d)
    for u, v in so_extra:
        so_d[u] |= 1 << v
    hb_d = list(co_d)
    for u, v in hb_extra:
        hb_d[u] |= 1 << v

    return Trace(ex, _close(mo_d), _close(co_d), _close(so_d), _close(hb_d))


# --------------------------------------------------------------------------
# Data races
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DataRace:
    """A conflicting hb-unordered access pair, reported in so order.

    `first`/`second` are action positions inside `witness`; `stmts` the
    statement identities the pair is deduplicated by."""

    first: int
    second: int
    variable: str
    stmts: tuple
    witness: Execution

    def key(self) -> tuple:
        return (str(self.stmts[0]), str(self.stmts[1]))


def _execution_sort_key(ex: Execution):
    return (len(ex.actions),
            tuple((a.task, a.event.render(), str(a.stmt)) for a in ex.actions))


def races_in(ex: Execution, trace: Optional[Trace] = None) -> list:
    """All race pairs of one execution, so-ordered, in deterministic order."""
    t = trace or compute_orders(ex)
    acts = ex.actions
    by_var: dict = {}
    for i, a in enumerate(acts):
        if isinstance(a.event, (LoadEv, StoreEv)):
            by_var.setdefault(a.event.var, []).append(i)
    out = []
    for var, positions in sorted(by_var.items()):
        for x in range(len(positions)):
            for y in range(x + 1, len(positions)):
                i, j = positions[x], positions[y]
                if not (isinstance(acts[i].event, StoreEv)
                        or isinstance(acts[j].event, StoreEv)):
                    continue
                if before(t.hb, i, j) or before(t.hb, j, i):
                    continue
                if before(t.so, i, j):
                    first, second = i, j
                elif before(t.so, j, i):
                    first, second = j, i
                else:
                    raise AssertionError(
                        f"conflicting actions not so-comparable: "
                        f"{acts[i]} / {acts[j]}")
                out.append(DataRace(first, second, var,
                                    (acts[first].stmt, acts[second].stmt), ex))
    return out


def find_data_races(p: Program, cfg: ExplorationConfig = ExplorationConfig(),
                    init: Optional[dict] = None) -> set:
    """Union of race pairs over all exact explored executions, one witness
    per statement pair."""
    seen: dict = {}
    for ex in sorted(explore(p, cfg, init), key=_execution_sort_key):
        if ex.truncated:
            continue
        for race in races_in(ex):
            seen.setdefault(race.key(), race)
    return set(seen.values())


# --------------------------------------------------------------------------
# Statement order ≺ over the synchronous program
# --------------------------------------------------------------------------

class SyncOrder:
    """First-occurrence order of statements across bounded synchronous runs.

    prec(s, s') is true iff some run executes both and hits s first — the
    verdict the set-flag-then-assert instrumentation computes."""

    def __init__(self, p_sync: Program,
                 cfg: ExplorationConfig = ExplorationConfig(),
                 init: Optional[dict] = None):
        self.result = run_synchronous(p_sync, cfg, init)
        self.firsts = []
        for run in self.result.runs:
            first: dict = {}
            for idx, sid in enumerate(run.stmts):
                if sid not in first:
                    first[sid] = idx
            self.firsts.append(first)

    def prec(self, s: StmtId, s2: StmtId) -> bool:
        return any(s in f and s2 in f and f[s] < f[s2] for f in self.firsts)

    @property
    def reachable(self) -> frozenset:
        return self.result.reached


@lru_cache(maxsize=128)
def _sync_order(p_sync: Program, cfg: ExplorationConfig) -> SyncOrder:
    return SyncOrder(p_sync, cfg)


def stmt_prec(p_sync: Program, s: StmtId, s2: StmtId,
              cfg: ExplorationConfig = ExplorationConfig()) -> bool:
    """The order ≺: some bounded synchronous run first executes s, then s2."""
    return _sync_order(p_sync, cfg).prec(s, s2)


def synchronously_reachable(p_sync: Program,
                            cfg: ExplorationConfig = ExplorationConfig()
                            ) -> frozenset:
    """Statements executed by at least one bounded synchronous run."""
    return _sync_order(p_sync, cfg).reachable


# --------------------------------------------------------------------------
# Forward reachability tie-break
# --------------------------------------------------------------------------

class ForwardReach:
    """Interprocedural forward reachability with back edges removed."""

    def __init__(self, p: Program):
        succs: dict = {}

        def add(u, v):
            succs.setdefault(u, []).append(v)

        per_method = {}
        for m in p.methods:
            fs = build_stmt_graph(m).forward_succs()
            per_method[m.name] = fs
            for u, vs in fs.items():
                for v in vs:
                    add(self._key(m.name, u), self._key(m.name, v))
        for m in p.methods:
            for s in iter_stmts(m.body):
                if isinstance(s, Call):
                    add(s.id, (s.method, ENTRY))
                    for v in per_method[m.name].get(s.id, []):
                        add((s.method, EXIT), self._key(m.name, v))
        self.succs = succs
        self._memo: dict = {}

    @staticmethod
    def _key(method: str, node):
        return node if isinstance(node, StmtId) else (method, node)

    def forward(self, s: StmtId, s2: StmtId) -> bool:
        """Is s2 reachable from s along at least one forward edge?"""
        if s not in self._memo:
            seen = set()
            frontier = list(self.succs.get(s, []))
            while frontier:
                u = frontier.pop()
                if u in seen:
                    continue
                seen.add(u)
                frontier.extend(self.succs.get(u, []))
            self._memo[s] = seen
        return s2 in self._memo[s]


# --------------------------------------------------------------------------
# The race order ≺_so
# --------------------------------------------------------------------------

def stmt_prec_so(s: StmtId, s2: StmtId, order: SyncOrder,
                 reach: ForwardReach) -> bool:
    """s before s2 in the statement component of ≺_so: s ≺ s2 and either
    the reverse fails or s2 sits forward of s in the acyclic CFG."""
    if s == s2:
        return False
    return order.prec(s, s2) and (not order.prec(s2, s)
                                  or reach.forward(s, s2))


def action_prec_so(a, a2, order: SyncOrder, reach: ForwardReach) -> bool:
    return stmt_prec_so(a.stmt, a2.stmt, order, reach)


def race_prec_so(d: DataRace, d2: DataRace, order: SyncOrder,
                 reach: ForwardReach) -> bool:
    """Colexicographic race order: second components first."""
    if d.stmts == d2.stmts:
        return False
    s, t = d.stmts
    s2, t2 = d2.stmts
    if t != t2:
        return stmt_prec_so(t, t2, order, reach)
    return stmt_prec_so(s, s2, order, reach)


def sort_races(races, order: SyncOrder, reach: ForwardReach) -> list:
    """Deterministic list consistent with ≺_so where it orders the pairs.

    Starts from the statement-id order and lets ≺_so pull races forward;
    incomparable races keep their id order."""
    out = []
    for d in sorted(races, key=lambda d: (d.stmts[1].sort_key,
                                          d.stmts[0].sort_key)):
        i = len(out)
        while i > 0 and race_prec_so(d, out[i - 1], order, reach):
            i -= 1
        out.insert(i, d)
    return out
