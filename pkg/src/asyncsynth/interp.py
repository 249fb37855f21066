"""Bounded interpreter for the task-based asynchronous semantics.

A configuration is the sextuple from the operational semantics: the global
valuation, the call stack, the set of pending (suspended) tasks, the
completed-task map, the caller map and the waits-for map.  Three pieces of
bookkeeping ride along: fresh-id counters for tasks and actions, the task
currently inside an atomic resumption window, and a sticky `truncated` bit
set when a concrete loop is forced to exit at the iteration bound.

Execution rules, informally:

  * the top stack frame runs; loads/stores/calls/awaits/returns each emit
    one action, conditionals and loops are silent;
  * a call pushes the callee, which runs first;
  * `await r` continues silently past a completed task and otherwise
    suspends the whole frame (the continuation resumes after the await);
  * `await *` chooses between continuing and suspending;
  * a task suspended on `await r` resumes only when the stack is empty and
    the awaited task completed; a task suspended on `await *` may resume at
    any point — it models IO finishing on a background thread — but its
    resumed code then runs without interleaving until it suspends again or
    returns (the atomic window).

Nondeterminism therefore comes from `*` in expressions (ranging over a
small finite domain), from `await *`, and from the scheduling of resumed
tasks.  `explore` walks the whole choice tree and returns every maximal
execution; there is no state merging, so the tree must be small — the cap
`max_states` aborts runaway exploration.  Loops with concrete conditions
are cut at `loop_bound` iterations per invocation; an execution that took
such a forced exit is marked truncated, and callers are expected to keep
truncated executions out of soundness verdicts.  A `while` whose condition
can pick `* = 0` at the bound simply takes that exit, which is an exact
execution, not a truncation.

A program whose awaits have all been erased never suspends, so the same
machinery doubles as the synchronous interpreter: after a call only the
callee can run, which is exactly call-to-completion semantics.
`run_synchronous` wraps that and reports final valuations plus the set of
statements that some bounded run reaches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Union

from .frontend import (
    AwaitStar, AwaitVar, BinOp, Call, Expr, If, IntLit, LocalRef, MyTask,
    Program, Read, Return, Star, StmtId, StmtLit, While, Write,
    implicit_return_id,
)


# --------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------

class InterpError(Exception):
    pass


class StuckStateError(InterpError):
    """No rule applies although the stack is not empty (interpreter bug, or
    an ill-formed program executed anyway, e.g. awaiting an unbound local)."""

    code = "StuckState"


class StateBudgetExceededError(InterpError):
    """Exploration hit the max_states cap before finishing."""

    code = "StateBudgetExceeded"


# --------------------------------------------------------------------------
# Actions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadEv:
    var: str

    def render(self) -> str:
        return f"load({self.var})"


@dataclass(frozen=True)
class StoreEv:
    var: str

    def render(self) -> str:
        return f"store({self.var})"


@dataclass(frozen=True)
class CallEv:
    callee: int  # task id created by the call

    def render(self) -> str:
        return f"call({self.callee})"


@dataclass(frozen=True)
class AwaitEv:
    target: Union[int, str]  # a task id, or "*"

    def render(self) -> str:
        return f"await({self.target})"


@dataclass(frozen=True)
class ReturnEv:
    def render(self) -> str:
        return "return"


@dataclass(frozen=True)
class ContinueEv:
    def render(self) -> str:
        return "continue"


Event = Union[LoadEv, StoreEv, CallEv, AwaitEv, ReturnEv, ContinueEv]


@dataclass(frozen=True)
class Action:
    """One labeled transition: (id, executing task, event, statement).

    `stmt` is the statement that generated the event and is None exactly
    for ContinueEv; implicit returns carry the synthetic end-of-body id.
    Action ids are positions within their execution, so they are unique per
    execution, not globally.
    """

    act: int
    task: int
    event: Event
    stmt: Optional[StmtId]

    def to_json(self) -> str:
        return json.dumps({"act": self.act, "task": self.task,
                           "event": self.event.render(),
                           "stmt": str(self.stmt) if self.stmt else None})


# --------------------------------------------------------------------------
# Configurations
# --------------------------------------------------------------------------

Value = Union[int, StmtId]


@dataclass(frozen=True)
class Frame:
    """A stack or pending frame: task id, method, locals, and the worklist
    of ("s", stmt) items still to run — loop re-entries are ("w", loop, n)
    markers recording how many iterations already ran."""

    task: int
    method: str
    locals: tuple  # sorted (name, value) pairs
    work: tuple

    def local(self, name: str, default=0):
        for n, v in self.locals:
            if n == name:
                return v
        return default

    def bind(self, name: str, value: Value) -> "Frame":
        items = [(n, v) for n, v in self.locals if n != name]
        items.append((name, value))
        return replace(self, locals=tuple(sorted(items, key=lambda p: p[0])))


@dataclass(frozen=True)
class Configuration:
    g: tuple                 # sorted (global, value) pairs
    stack: tuple             # top frame first
    pending: tuple           # suspended frames, sorted by task id
    completed: tuple         # sorted task ids that returned
    caller: tuple            # sorted (task, calling task) pairs
    waits: tuple             # sorted (task, awaited task or "*") pairs
    next_task: int = 1
    next_act: int = 0
    atomic: Optional[int] = None   # task inside an atomic resumption window
    truncated: bool = False        # a concrete loop was forced to exit

    def global_value(self, name: str) -> Value:
        for n, v in self.g:
            if n == name:
                return v
        return 0

    def set_global(self, name: str, value: Value) -> tuple:
        items = [(n, v) for n, v in self.g if n != name]
        items.append((name, value))
        return tuple(sorted(items, key=lambda p: p[0]))

    def is_completed(self, task: int) -> bool:
        return task in self.completed

    def waits_on(self, task: int):
        for t, w in self.waits:
            if t == task:
                return w
        return None

    @property
    def done(self) -> bool:
        return not self.stack and not self.pending

    def valuation(self) -> dict:
        return dict(self.g)


@dataclass(frozen=True)
class ExplorationConfig:
    domain: tuple = (0, 1)     # values `*` ranges over inside expressions
    loop_bound: int = 2        # max iterations of a loop per invocation
    max_states: int = 200_000  # successor expansions before giving up

    def __post_init__(self):
        assert self.domain, "empty * domain"
        assert self.loop_bound >= 1


@dataclass(frozen=True)
class Execution:
    """A maximal run: action sequence, final globals, truncation marker.
    `truncated_at` is the index of the first action that ran after a forced
    loop exit (None when the execution is exact)."""

    actions: tuple
    final_globals: tuple
    truncated_at: Optional[int] = None

    @property
    def truncated(self) -> bool:
        return self.truncated_at is not None

    def valuation(self) -> dict:
        return dict(self.final_globals)

    def to_json_lines(self) -> list:
        return [a.to_json() for a in self.actions]


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------

_OPS = {
    "+": lambda a, b: a + b,
    "-": lambda a, b: a - b,
    "==": lambda a, b: int(a == b),
    "!=": lambda a, b: int(a != b),
    "<": lambda a, b: int(a < b),
}


def eval_expr(e: Expr, frame: Frame, domain: tuple) -> list:
    """All values the expression may take, one per assignment to its `*`s.

    Deterministic order: domain values are enumerated sorted, left to right
    across the expression.  Statement literals and task ids only ever meet
    == and !=; arithmetic over them signals an interpreter bug.
    """
    if isinstance(e, IntLit):
        return [e.value]
    if isinstance(e, LocalRef):
        return [frame.local(e.name)]
    if isinstance(e, Star):
        return sorted(domain)
    if isinstance(e, MyTask):
        return [frame.task]
    if isinstance(e, StmtLit):
        return [e.stmt]
    if isinstance(e, BinOp):
        out = []
        for lv in eval_expr(e.left, frame, domain):
            for rv in eval_expr(e.right, frame, domain):
                if e.op in ("+", "-", "<") and not (
                        isinstance(lv, int) and isinstance(rv, int)):
                    raise StuckStateError(
                        f"arithmetic over a statement literal: {e.op!r}")
                out.append(_OPS[e.op](lv, rv))
        return out
    raise StuckStateError(f"unknown expression {e!r}")


def _truth(v) -> bool:
    return bool(v) if isinstance(v, int) else True


# --------------------------------------------------------------------------
# Initial configuration and successors
# --------------------------------------------------------------------------

def initial_config(p: Program, init: Optional[dict] = None) -> Configuration:
    """Globals zero-initialized (overridable via `init`), Main as task 0."""
    g = tuple(sorted((name, (init or {}).get(name, 0))
                     for name in p.globals))
    main = p.method("Main")
    frame = Frame(task=0, method="Main", locals=(),
                  work=tuple(("s", s) for s in main.body))
    return Configuration(g=g, stack=(frame,), pending=(), completed=(),
                         caller=(), waits=(), next_task=1, next_act=0)


def enabled_steps(c: Configuration, p: Program,
                  cfg: ExplorationConfig) -> list:
    """All (Action, Configuration) successors licensed by the semantics.

    Conditionals and loops are resolved silently on the way to the next
    action-bearing statement, so every returned step carries an action.
    """
    steps = []
    if c.atomic is None:
        steps.extend(_continue_steps(c))
    if c.stack:
        steps.extend(_top_frame_steps(c, p, cfg))
    elif c.atomic is not None:
        raise StuckStateError("atomic window survived its frame")
    return steps


def _continue_steps(c: Configuration) -> list:
    steps = []
    for f in c.pending:
        w = c.waits_on(f.task)
        if w == "*":
            # IO finished on its background thread: resume on top of
            # whatever is running, then hold the window until this frame
            # suspends again or returns
            c2 = replace(
                c, stack=(f,) + c.stack,
                pending=tuple(x for x in c.pending if x.task != f.task),
                waits=tuple((t, v) for t, v in c.waits if t != f.task),
                next_act=c.next_act + 1, atomic=f.task)
            steps.append((Action(c.next_act, f.task, ContinueEv(), None), c2))
        elif w is not None and not c.stack and c.is_completed(w):
            c2 = replace(
                c, stack=(f,),
                pending=tuple(x for x in c.pending if x.task != f.task),
                waits=tuple((t, v) for t, v in c.waits if t != f.task),
                next_act=c.next_act + 1)
            steps.append((Action(c.next_act, f.task, ContinueEv(), None), c2))
    return steps


def _replace_top(c: Configuration, frame: Optional[Frame],
                 **kw) -> Configuration:
    stack = ((frame,) if frame is not None else ()) + c.stack[1:]
    return replace(c, stack=stack, **kw)


def _top_frame_steps(c: Configuration, p: Program,
                     cfg: ExplorationConfig) -> list:
    frame = c.stack[0]
    if not frame.work:
        return _return_steps(c, frame, implicit_return_id(frame.method))
    item, rest = frame.work[0], frame.work[1:]
    if item[0] == "s":
        return _stmt_steps(c, frame, item[1], rest, p, cfg)
    if item[0] == "w":
        return _loop_steps(c, frame, item[1], item[2], rest, p, cfg)
    raise StuckStateError(f"unknown work item {item!r}")


def _stmt_steps(c, frame, stmt, rest, p, cfg) -> list:
    act = c.next_act

    if isinstance(stmt, Read):
        f2 = replace(frame, work=rest).bind(stmt.local,
                                            c.global_value(stmt.var))
        c2 = _replace_top(c, f2, next_act=act + 1)
        return [(Action(act, frame.task, LoadEv(stmt.var), stmt.id), c2)]

    if isinstance(stmt, Write):
        out = []
        for v in eval_expr(stmt.expr, frame, cfg.domain):
            f2 = replace(frame, work=rest)
            c2 = _replace_top(c, f2, g=c.set_global(stmt.var, v),
                              next_act=act + 1)
            out.append((Action(act, frame.task, StoreEv(stmt.var), stmt.id),
                        c2))
        return out

    if isinstance(stmt, Call):
        callee = p.method(stmt.method)
        t_new = c.next_task
        caller_frame = replace(frame, work=rest).bind(stmt.local, t_new)
        callee_frame = Frame(task=t_new, method=callee.name, locals=(),
                             work=tuple(("s", s) for s in callee.body))
        c2 = replace(c, stack=(callee_frame, caller_frame) + c.stack[1:],
                     caller=tuple(sorted(c.caller + ((t_new, frame.task),))),
                     next_task=t_new + 1, next_act=act + 1)
        return [(Action(act, frame.task, CallEv(t_new), stmt.id), c2)]

    if isinstance(stmt, Return):
        return _return_steps(c, frame, stmt.id)

    if isinstance(stmt, AwaitVar):
        target = frame.local(stmt.local, None)
        if not isinstance(target, int):
            raise StuckStateError(
                f"await of {stmt.local!r}, which holds no task")
        ev = AwaitEv(target)
        f2 = replace(frame, work=rest)  # resumes after the await
        if c.is_completed(target):
            c2 = _replace_top(c, f2, next_act=act + 1)
            return [(Action(act, frame.task, ev, stmt.id), c2)]
        c2 = _replace_top(
            c, None,
            pending=tuple(sorted(c.pending + (f2,), key=lambda f: f.task)),
            waits=tuple(sorted(c.waits + ((frame.task, target),))),
            next_act=act + 1,
            atomic=None if c.atomic == frame.task else c.atomic)
        return [(Action(act, frame.task, ev, stmt.id), c2)]

    if isinstance(stmt, AwaitStar):
        ev = AwaitEv("*")
        f2 = replace(frame, work=rest)
        cont = _replace_top(c, f2, next_act=act + 1)
        susp = _replace_top(
            c, None,
            pending=tuple(sorted(c.pending + (f2,), key=lambda f: f.task)),
            waits=tuple(sorted(c.waits + ((frame.task, "*"),))),
            next_act=act + 1,
            atomic=None if c.atomic == frame.task else c.atomic)
        return [(Action(act, frame.task, ev, stmt.id), cont),
                (Action(act, frame.task, ev, stmt.id), susp)]

    if isinstance(stmt, If):
        out = []
        seen = set()
        for v in eval_expr(stmt.cond, frame, cfg.domain):
            t = _truth(v)
            if t in seen:
                continue
            seen.add(t)
            arm = stmt.then if t else stmt.els
            f2 = replace(frame, work=tuple(("s", s) for s in arm) + rest)
            out.extend(_top_frame_steps(_replace_top(c, f2), p, cfg))
        return out

    if isinstance(stmt, While):
        return _loop_steps(c, frame, stmt, 0, rest, p, cfg)

    raise StuckStateError(f"cannot execute {type(stmt).__name__}")


def _loop_steps(c, frame, loop, done, rest, p, cfg) -> list:
    truths = {_truth(v) for v in eval_expr(loop.cond, frame, cfg.domain)}
    out = []
    if False in truths:
        f2 = replace(frame, work=rest)
        out.extend(_top_frame_steps(_replace_top(c, f2), p, cfg))
    if True in truths:
        if done >= cfg.loop_bound:
            if False not in truths:
                # the condition is still true at the bound: force the exit
                # and poison the execution
                f2 = replace(frame, work=rest)
                out.extend(_top_frame_steps(
                    _replace_top(c, f2, truncated=True), p, cfg))
            # otherwise the exits above are exact choices and deeper
            # unrollings are simply not explored
        else:
            body = tuple(("s", s) for s in loop.body)
            f2 = replace(frame, work=body + (("w", loop, done + 1),) + rest)
            out.extend(_top_frame_steps(_replace_top(c, f2), p, cfg))
    return out


def _return_steps(c, frame, stmt_id) -> list:
    act = c.next_act
    c2 = _replace_top(c, None,
                      completed=tuple(sorted(c.completed + (frame.task,))),
                      next_act=act + 1,
                      atomic=None if c.atomic == frame.task else c.atomic)
    return [(Action(act, frame.task, ReturnEv(), stmt_id), c2)]


# --------------------------------------------------------------------------
# Exhaustive exploration
# --------------------------------------------------------------------------

def explore(p: Program, cfg: ExplorationConfig = ExplorationConfig(),
            init: Optional[dict] = None) -> set:
    """Every maximal execution of the asynchronized program within bounds.

    An execution ends when both the call stack and the pending set are
    empty.  Raises StateBudgetExceededError when the choice tree needs more
    than cfg.max_states expansions.
    """
    budget = cfg.max_states
    results = set()
    work = [(initial_config(p, init), (), None)]
    while work:
        c, actions, cut = work.pop()
        if c.done:
            results.add(Execution(actions, c.g, cut))
            continue
        budget -= 1
        if budget < 0:
            raise StateBudgetExceededError(
                f"exploration exceeded {cfg.max_states} expansions")
        steps = enabled_steps(c, p, cfg)
        if not steps:
            raise StuckStateError(
                f"no enabled step (stack={[f.method for f in c.stack]}, "
                f"pending={[f.method for f in c.pending]})")
        for action, c2 in steps:
            cut2 = cut
            if cut2 is None and c2.truncated:
                cut2 = len(actions)  # this very action is already poisoned
            work.append((c2, actions + (action,), cut2))
    return results


# --------------------------------------------------------------------------
# Synchronous runs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyncRun:
    """One bounded synchronous run.  `stmts` lists the executed statements
    in order, cut at the first forced loop exit, so everything in it was
    genuinely reached."""

    stmts: tuple
    final_globals: tuple
    truncated: bool

    def valuation(self) -> dict:
        return dict(self.final_globals)


@dataclass(frozen=True)
class SyncResult:
    runs: tuple
    valuations: frozenset   # final global valuations of exact runs
    reached: frozenset      # statements some run reaches before any cut


def run_synchronous(p: Program, cfg: ExplorationConfig = ExplorationConfig(),
                    init: Optional[dict] = None) -> SyncResult:
    """All bounded runs of a synchronous (await-free) program.

    The only nondeterminism left is `*` inside expressions; calls run to
    completion inline.  Final valuations of truncated runs are artifacts of
    the forced exit and are excluded from `valuations`.
    """
    for m in p.methods:
        for s in _walk(m.body):
            if isinstance(s, (AwaitVar, AwaitStar)):
                raise InterpError(
                    "run_synchronous on a program that still has awaits; "
                    "erase them first")
    runs = []
    for ex in explore(p, cfg, init):
        stmts = tuple(a.stmt for a in (
            ex.actions if ex.truncated_at is None
            else ex.actions[:ex.truncated_at]))
        runs.append(SyncRun(stmts, ex.final_globals, ex.truncated))
    return SyncResult(
        runs=tuple(runs),
        valuations=frozenset(r.final_globals for r in runs if not r.truncated),
        reached=frozenset(s for r in runs for s in r.stmts),
    )


def _walk(stmts):
    for s in stmts:
        yield s
        if isinstance(s, If):
            yield from _walk(s.then)
            yield from _walk(s.els)
        elif isinstance(s, While):
            yield from _walk(s.body)
