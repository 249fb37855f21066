"""Await placement synthesis by access summaries instead of exploration.

The precise pipeline certifies every repair with the interpreter, which is
exact but exponential in the number of interleavings.  This module trades
that precision for a single bottom-up sweep over the call graph driven by
two syntactic summaries:

  * ``RW-var``: the globals a method (or a single statement) may read and
    write, unioned over all of its transitive callees.  Branch conditions
    never mention globals, so the summary ignores them entirely -- every
    branch counts as reachable.
  * ``CRW-var``: the subset of a method's accesses that can still be in
    flight after the method has suspended, i.e. accesses that may run
    concurrently with whatever the caller does between calling the method
    and awaiting it.  These are the accesses of statements reachable from
    an await inside the method, plus the in-flight accesses of its own
    callees.

A statement that sits between a call and its awaits races with the callee
exactly when its own accesses conflict with the callee's in-flight set, so
one pass -- methods bottom-up, statements in text order, repairing each
conflict by moving the offending await up -- yields a maximal sound
placement of the branch-blind program.  Because the analysis never looks at
data, it can over-repair programs whose races are dead under concrete
conditions; that is the price of running in polynomial time.

``abstract_program`` builds the branch-blind twin explicitly: conditions
become ``*`` and each loop is read as one guarded iteration (``while e {S}``
becomes ``if * {S}``), which keeps every statement id and therefore every
await slot stable.  The sweep itself accepts ordinary placements too: only
loop-free inputs are fully branch-blind, but on inputs that still carry
loops the reachability marking keeps the loop back edge, so accesses early
in a loop body count as in-flight once any await occurs in the body --
conservative, never unsound.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .frontend import (AwaitStar, AwaitVar, Call, If, MethodDef, Program,
                       Read, Star, StmtId, While, Write, call_graph,
                       iter_leaves, iter_stmts)
from .repair import RootCause, repair_data_race
from .space import Asynchronization, call_cover


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AccessSummary:
    """Globals a method or statement may read and write."""

    reads: frozenset
    writes: frozenset

    def to_json(self) -> dict:
        return {"R": sorted(self.reads), "W": sorted(self.writes)}


class ConcurrentSummary(AccessSummary):
    """The in-flight subset of a method's accesses: reads and writes that
    can run concurrently with the caller's continuation after the method
    suspends.  Always contained in the method's full summary."""


EMPTY = AccessSummary(frozenset(), frozenset())


def conflicts(s1: AccessSummary, s2: AccessSummary) -> bool:
    """One side writes something the other side touches."""
    return bool(s1.writes & (s2.reads | s2.writes)
                or s2.writes & (s1.reads | s1.writes))


def bottom_up_order(p: Program) -> list[str]:
    """Method names with every callee before its callers, ties by name."""
    calls = call_graph(p)
    names = sorted(calls)
    done: set[str] = set()
    out: list[str] = []
    while len(out) < len(names):
        for name in names:
            if name not in done and calls[name] <= done:
                done.add(name)
                out.append(name)
                break
        else:
            raise ValueError("call graph has a cycle")
    return out


def _stmt_rw(s, methods: dict) -> AccessSummary:
    if isinstance(s, Read):
        return AccessSummary(frozenset({s.var}), frozenset())
    if isinstance(s, Write):
        return AccessSummary(frozenset(), frozenset({s.var}))
    if isinstance(s, Call):
        return methods[s.method]
    return EMPTY


def rw_var(p: Program):
    """Per-method and per-statement read/write summaries.

    Methods are folded callees-first, so each call statement contributes
    its callee's already-complete summary; compound statements contribute
    nothing themselves (their children are distinct statements).
    """
    methods: dict[str, AccessSummary] = {}
    for name in bottom_up_order(p):
        reads: set = set()
        writes: set = set()
        for s in iter_stmts(p.method(name).body):
            part = _stmt_rw(s, methods)
            reads |= part.reads
            writes |= part.writes
        methods[name] = AccessSummary(frozenset(reads), frozenset(writes))
    stmts = {s.id: _stmt_rw(s, methods)
             for m in p.methods for s in iter_stmts(m.body)}
    return methods, stmts


# --------------------------------------------------------------------------
# Await reachability and in-flight summaries
# --------------------------------------------------------------------------

def _await_reachable(body) -> set:
    """Ids of statements reachable from an await in this body's own flow.

    Structured control flow only: a branch joins the arms, a loop feeds its
    exit -- and, through the back edge, its own start -- so one await inside
    a loop body makes the whole body reachable.
    """
    reached: set = set()

    def walk(seq, live: bool) -> bool:
        for s in seq:
            if live:
                reached.add(s.id)
            if isinstance(s, (AwaitVar, AwaitStar)):
                live = True
            elif isinstance(s, If):
                live_then = walk(s.then, live)
                live_else = walk(s.els, live)
                live = live_then or live_else
            elif isinstance(s, While):
                inner = walk(s.body, live)
                if inner and not live:
                    walk(s.body, True)
                live = live or inner
        return live

    walk(body, False)
    return reached


def _method_crw(m: MethodDef, rw_methods: dict, crw: dict) -> ConcurrentSummary:
    """In-flight accesses of one materialized method body.

    A call that no await precedes contributes only its callee's in-flight
    set; everything reachable from an await contributes its full accesses.
    """
    reached = _await_reachable(m.body)
    reads: set = set()
    writes: set = set()
    for s in iter_stmts(m.body):
        if isinstance(s, Call):
            part = rw_methods[s.method] if s.id in reached else crw[s.method]
        elif s.id in reached:
            part = _stmt_rw(s, rw_methods)
        else:
            continue
        reads |= part.reads
        writes |= part.writes
    return ConcurrentSummary(frozenset(reads), frozenset(writes))


def crw_var(a: Asynchronization) -> dict:
    """Per-method in-flight summaries of a materialized placement."""
    mat = a.program()
    rw_methods, _ = rw_var(a.base)
    out: dict[str, ConcurrentSummary] = {}
    for name in bottom_up_order(a.base):
        out[name] = _method_crw(mat.method(name), rw_methods, out)
    return out


# --------------------------------------------------------------------------
# The branch-blind twin
# --------------------------------------------------------------------------

def abstract_program(p: Program) -> Program:
    """Replace every branch condition with * and read each loop as a single
    guarded iteration.  Statement ids, and with them await slots, are
    preserved: a loop body keeps its path when the loop becomes a branch."""

    def rebuild(body):
        out = []
        for s in body:
            if isinstance(s, If):
                out.append(replace(s, cond=Star(), then=rebuild(s.then),
                                   els=rebuild(s.els)))
            elif isinstance(s, While):
                out.append(If(id=s.id, cond=Star(), then=rebuild(s.body),
                              els=(), line=s.line, col=s.col))
            else:
                out.append(s)
        return tuple(out)

    methods = tuple(MethodDef(m.name, rebuild(m.body)) for m in p.methods)
    return replace(p, methods=methods)


def abstract_async(a: Asynchronization) -> Asynchronization:
    """The same placement over the branch-blind base.

    Every await slot of the original base exists unchanged in the abstract
    one (loop bodies keep their container paths), so the placement carries
    over verbatim.
    """
    return Asynchronization(base=abstract_program(a.base),
                            star_positions=a.star_positions,
                            placement=a.placement)


# --------------------------------------------------------------------------
# The bottom-up repair sweep
# --------------------------------------------------------------------------

def maxrel_sharp(a: Asynchronization) -> Asynchronization:
    """Summary-driven maximal sound placement below ``a``.

    One sweep, callees first.  Inside each method, every statement that a
    pending await covers is checked against the callee's in-flight set and
    repaired on conflict; the method's own in-flight summary is computed
    afterwards, from its repaired placement, so callers see the final
    positions.  Methods that no call chain from Main reaches can never
    execute, so their placements are left untouched.  On loop-free inputs
    (in particular anything built by ``abstract_program``) the result is
    the unique maximal sound placement of the branch-blind program below
    ``a``.
    """
    base = a.base
    rw_methods, rw_stmts = rw_var(base)
    callee = {c: base.stmt(c).method for c in a.calls}
    calls_in: dict[str, list[StmtId]] = {}
    for c in a.calls:
        calls_in.setdefault(c.method, []).append(c)
    live = _reachable_methods(base)
    crw: dict[str, ConcurrentSummary] = {}
    for name in bottom_up_order(base):
        for s in iter_leaves(base.method(name).body) if name in live else ():
            for c in calls_in.get(name, ()):
                if s.id == c:
                    continue
                if (s.id in call_cover(a, c)
                        and conflicts(rw_stmts[s.id], crw[callee[c]])):
                    a = repair_data_race(
                        a, RootCause(call_stmt=c, anchor=s.id))
        crw[name] = _method_crw(a.program().method(name), rw_methods, crw)
    return a


def _reachable_methods(p: Program) -> set:
    """Methods some call chain from Main can enter."""
    calls = call_graph(p)
    if "Main" not in calls:
        return set(calls)
    live = {"Main"}
    frontier = ["Main"]
    while frontier:
        for name in calls[frontier.pop()]:
            if name not in live:
                live.add(name)
                frontier.append(name)
    return live
