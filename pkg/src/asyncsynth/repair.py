"""Root causes of data races and await-strengthening repair.

A data race in an asynchronized program always traces back to one async
call: its awaits sit so far down that the callee's continuation is still
pending when a conflicting access runs.  A *root cause* names that call
plus an anchor statement the await has to beat.  Repair then replaces the
call's await placement with the weakest one, at or below the current one,
whose awaits all sit no later than the anchor on any forward control path;
awaits in branches that cannot reach the anchor stay at maximal distance.
Iterating find-root-cause / repair from any starting placement converges on
the weakest sound placement below it (`maxrel`).

Root causes are found without exploring the async program at all.  We build
a fully synchronous twin of the program that simulates exactly one delayed
task with a handful of bookkeeping globals:

  - before a candidate first access s1, a nondeterministic branch may mark
    the current task as delayed (`lastTaskDelayed`) and return early — the
    rest of that invocation is the deferred continuation;
  - every await of the delayed task, instead of suspending, marks its own
    frame interrupted and returns early too, so the interruption climbs the
    call chain exactly as far as a real deferral would;
  - a call whose callee can never suspend has the semantics of a call with
    an immediate await, so after it the same interrupt propagation applies
    (no await statement exists to record there, which is the one point
    where this twin goes beyond straight statement-for-statement rewriting);
  - whichever frame survives the climb records the interrupted call as
    `s_c`, then keeps `s` pointed at the latest statement it passes that
    leads toward the second access s2; reaching s2 while a delay with a
    crossed await is outstanding is the race witness, and (s_c, s) at that
    moment is the root cause.

`thisHasDoneAwait` tracks per frame whether an await was crossed before the
delay; a delay that crosses no await is no race, because the synchronous
order already runs those accesses back to back.  Racy pairs (s1, s2) are
taken colexicographically in the synchronous statement order, so the twin
locates the root cause of a minimal race and repairing root causes in this
order never moves an await below where a later repair needs it.

Anchors are compared with await slots structurally, one if/while level at a
time.  Loop bodies are read within one iteration (the comparison never
follows a back edge); a root cause whose anchor sits behind the call
through a loop back edge cannot be satisfied by any forward placement, and
repair falls back to the strongest cut for that call, which is sound.
"""

from dataclasses import dataclass, replace
from itertools import count
from typing import Optional

from .frontend import (AwaitStar, AwaitVar, BinOp, Call, If, IntLit,
                       LocalRef, MethodDef, MyTask, Program, Read, Return,
                       Star, StmtId, StmtLit, While, Write, iter_stmts,
                       sigma_star)
from .interp import CallEv, ExplorationConfig, explore
from .space import (Asynchronization, SpaceError, _call_cuts, _containers,
                    _le_cut, _region)
from .traces import (ForwardReach, Trace, _execution_sort_key, _sync_order,
                     before, compute_orders, find_data_races, sort_races)


class InvalidRootCauseError(SpaceError):
    """The anchor does not follow the call, or the call is not async."""

    code = "InvalidRootCause"


# --------------------------------------------------------------------------
# Root causes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RootCause:
    """The async call to blame and the statement its await must precede.

    Both statements belong to the same method: `call_stmt` is the call
    whose task was still pending, `anchor` the latest statement of that
    method on the way to the second racing access."""

    call_stmt: StmtId
    anchor: StmtId

    def to_json(self) -> dict:
        return {"call": str(self.call_stmt), "anchor": str(self.anchor)}


def lca_call_order(t: Trace, a1: int, a2: int) -> int:
    """Position of the deepest call action that is a co-ancestor of both.

    For a race pair reported in so order this is the call whose pending
    continuation carried the first access while the second ran."""
    common = [i for i, act in enumerate(t.execution.actions)
              if isinstance(act.event, CallEv)
              and before(t.co, i, a1) and before(t.co, i, a2)]
    if not common:
        raise InvalidRootCauseError(
            "actions have no common call ancestor in this execution")
    top = [i for i in common
           if not any(j != i and before(t.co, i, j) for j in common)]
    return max(top)


def root_cause(t: Trace, a1: int, a2: int) -> RootCause:
    """Root cause of a race pair, read off one witness execution.

    The anchor is the latest action of the blamed call's task that still
    leads to the second access: a2 itself when they share a task, otherwise
    the call toward a2's task."""
    c = lca_call_order(t, a1, a2)
    acts = t.execution.actions
    cands = [i for i in range(len(acts))
             if before(t.mo, c, i) and (i == a2 or before(t.co, i, a2))]
    if not cands:
        raise InvalidRootCauseError(
            "no action after the call leads to the second access")
    return RootCause(call_stmt=acts[c].stmt, anchor=acts[max(cands)].stmt)


# --------------------------------------------------------------------------
# The synchronous delayed-task twin
# --------------------------------------------------------------------------

_GLOBALS = ("lastTaskDelayed", "DescendantDidAwait", "task_sc", "s_c", "s",
            "violation", "rc_call", "rc_anchor", "one")

# every task id the interpreter hands out is >= 0, so -1 is a safe "nobody"
_NOBODY = -1


@dataclass(frozen=True)
class Instrumented:
    """A fully synchronous twin of the program, specialised to one pair.

    `names` maps the logical bookkeeping globals to their actual
    (collision-free) names in `program`; `init` is the valuation the
    exploration must start from.  After any exact run, violation == 1 means
    the pair races and (rc_call, rc_anchor) holds the root cause frozen at
    the first violation of that run."""

    program: Program
    s1: StmtId
    s2: StmtId
    names: tuple
    init: tuple

    def name(self, logical: str) -> str:
        return dict(self.names)[logical]

    def init_dict(self) -> dict:
        return dict(self.init)


def _used_locals(p: Program) -> set:
    used = set()
    for m in p.methods:
        for s in iter_stmts(m.body):
            if isinstance(s, (Read, Call, AwaitVar)):
                used.add(s.local)
    return used


def instrument_pair(a: Asynchronization, s1: StmtId, s2: StmtId
                    ) -> Instrumented:
    p = a.program()
    by_id = p.stmt_map()
    for sid in (s1, s2):
        if not isinstance(by_id.get(sid), (Read, Write)):
            raise ValueError(f"{sid} is not a read or write statement")
    x, y = by_id[s1], by_id[s2]
    if x.var != y.var or not (isinstance(x, Write) or isinstance(y, Write)):
        raise ValueError(
            f"{s1} and {s2} are not a conflicting access pair")

    taken = set(p.globals)
    names = {}
    for logical in _GLOBALS:
        actual = logical
        while actual in taken:
            actual += "_"
        taken.add(actual)
        names[logical] = actual

    used = _used_locals(p)
    temp = count()

    def fresh_local() -> str:
        while True:
            name = f"t{next(temp)}"
            if name not in used:
                return name

    thda = "thisHasDoneAwait"
    while thda in used:
        thda += "_"

    serial = count()

    def sid_after(anchor: StmtId) -> StmtId:
        return StmtId(anchor.method, anchor.path + (f"i{next(serial)}",))

    async_methods = sigma_star(a.base)

    def delay_block(st) -> list:
        # maybe mark this task delayed and defer the rest of the frame
        t = fresh_local()
        return [
            Read(sid_after(st.id), t, names["lastTaskDelayed"]),
            If(sid_after(st.id),
               BinOp("==", LocalRef(t), IntLit(_NOBODY)),
               then=(If(sid_after(st.id), Star(), then=(
                   Write(sid_after(st.id), names["lastTaskDelayed"],
                         MyTask()),
                   Write(sid_after(st.id), names["DescendantDidAwait"],
                         LocalRef(thda)),
                   Return(sid_after(st.id), None),
               ), els=()),),
               els=()),
        ]

    def interrupt_arm(anchor: StmtId) -> tuple:
        # the delayed task reached its suspension here: pass the
        # interruption (and whether any frame crossed an await) upward
        t = fresh_local()
        return (
            Read(sid_after(anchor), t, names["DescendantDidAwait"]),
            If(sid_after(anchor), BinOp("==", LocalRef(t), IntLit(0)),
               then=(Write(sid_after(anchor), names["DescendantDidAwait"],
                           LocalRef(thda)),),
               els=()),
            Write(sid_after(anchor), names["lastTaskDelayed"], MyTask()),
            Return(sid_after(anchor), None),
        )

    def await_block(st: AwaitVar) -> list:
        t = fresh_local()
        return [
            Read(sid_after(st.id), t, names["lastTaskDelayed"]),
            If(sid_after(st.id),
               BinOp("==", LocalRef(st.local), LocalRef(t)),
               then=interrupt_arm(st.id),
               els=(Read(sid_after(st.id), thda, names["one"]),)),
        ]

    def record_s_block(st: Call) -> list:
        # the frame that recorded s_c keeps s at its latest departure point
        t = fresh_local()
        return [
            Read(sid_after(st.id), t, names["task_sc"]),
            If(sid_after(st.id), BinOp("==", LocalRef(t), MyTask()),
               then=(Write(sid_after(st.id), names["s"], StmtLit(st.id)),),
               els=()),
        ]

    def after_call_blocks(st: Call) -> list:
        t = fresh_local()
        out = [
            Read(sid_after(st.id), t, names["lastTaskDelayed"]),
            If(sid_after(st.id),
               BinOp("==", LocalRef(st.local), LocalRef(t)),
               then=(
                   Write(sid_after(st.id), names["s_c"], StmtLit(st.id)),
                   Write(sid_after(st.id), names["task_sc"], MyTask()),
               ),
               els=()),
        ]
        if st.method not in async_methods:
            # a never-suspending callee completes within the call, so an
            # interrupted return from it interrupts this frame right here
            t2 = fresh_local()
            out += [
                Read(sid_after(st.id), t2, names["lastTaskDelayed"]),
                If(sid_after(st.id),
                   BinOp("==", LocalRef(st.local), LocalRef(t2)),
                   then=interrupt_arm(st.id),
                   els=()),
            ]
        return out

    def assert_block(st) -> list:
        ta, tb, tc, td = (fresh_local() for _ in range(4))
        te, tf = fresh_local(), fresh_local()
        return [
            Read(sid_after(st.id), ta, names["task_sc"]),
            If(sid_after(st.id), BinOp("==", LocalRef(ta), MyTask()),
               then=(Write(sid_after(st.id), names["s"], StmtLit(s2)),),
               els=()),
            Read(sid_after(st.id), tb, names["violation"]),
            If(sid_after(st.id), BinOp("==", LocalRef(tb), IntLit(0)),
               then=(
                   Read(sid_after(st.id), tc, names["lastTaskDelayed"]),
                   If(sid_after(st.id),
                      BinOp("!=", LocalRef(tc), IntLit(_NOBODY)),
                      then=(
                          Read(sid_after(st.id), td,
                               names["DescendantDidAwait"]),
                          If(sid_after(st.id),
                             BinOp("==", LocalRef(td), IntLit(1)),
                             then=(
                                 Read(sid_after(st.id), te, names["s_c"]),
                                 Read(sid_after(st.id), tf, names["s"]),
                                 Write(sid_after(st.id), names["rc_call"],
                                       LocalRef(te)),
                                 Write(sid_after(st.id), names["rc_anchor"],
                                       LocalRef(tf)),
                                 Write(sid_after(st.id), names["violation"],
                                       IntLit(1)),
                             ), els=()),
                      ), els=()),
               ), els=()),
        ]

    def build(body) -> tuple:
        out = []
        for st in body:
            if isinstance(st, If):
                st = replace(st, then=build(st.then), els=build(st.els))
            elif isinstance(st, While):
                st = replace(st, body=build(st.body))
            if isinstance(st, AwaitVar):
                out.extend(await_block(st))
                continue
            if isinstance(st, AwaitStar):
                # a crossed suspension point, whatever it waited on
                out.append(Read(sid_after(st.id), thda, names["one"]))
                continue
            if st.id == s2:
                out.extend(assert_block(st))
            if st.id == s1:
                out.extend(delay_block(st))
            if isinstance(st, Call):
                out.extend(record_s_block(st))
            out.append(st)
            if isinstance(st, Call):
                out.extend(after_call_blocks(st))
        return tuple(out)

    methods = tuple(MethodDef(m.name, build(m.body)) for m in p.methods)
    program = replace(p, methods=methods,
                      globals=p.globals + tuple(names[g] for g in _GLOBALS))
    init = (
        (names["lastTaskDelayed"], _NOBODY),
        (names["DescendantDidAwait"], 0),
        (names["task_sc"], _NOBODY),
        (names["s_c"], _NOBODY),
        (names["s"], _NOBODY),
        (names["violation"], 0),
        (names["rc_call"], _NOBODY),
        (names["rc_anchor"], _NOBODY),
        (names["one"], 1),
    )
    return Instrumented(program=program, s1=s1, s2=s2,
                        names=tuple(names.items()), init=init)


# --------------------------------------------------------------------------
# Minimal-race root cause
# --------------------------------------------------------------------------

def rc_min_drace(a: Asynchronization,
                 cfg: ExplorationConfig = ExplorationConfig(),
                 init: Optional[dict] = None) -> Optional[RootCause]:
    """Root cause of a minimal data race, or None when none races.

    Race existence is decided by the bounded exploration itself, so the
    fixpoint of repairing is exactly `find_data_races == {}`.  The twin
    would otherwise overshoot on programs whose executions never finish: its
    early returns escape infinite loops and witness races that no exact
    bounded execution certifies.  The twin then locates the root cause of
    the minimal certified race (colexicographically by statement pair); if
    it cannot reproduce one, the root cause is read off the witness trace
    directly."""
    races = find_data_races(a.program(), cfg, init)
    if not races:
        return None
    order = _sync_order(a.base, cfg)
    reach = ForwardReach(a.base)
    race = sort_races(races, order, reach)[0]
    s1, s2 = race.stmts
    inst = instrument_pair(a, s1, s2)
    merged = dict(init or {})
    merged.update(inst.init_dict())
    violating = [ex for ex in explore(inst.program, cfg, merged)
                 if not ex.truncated
                 and ex.valuation()[inst.name("violation")] == 1]
    if violating:
        g = min(violating, key=_execution_sort_key).valuation()
        call, anchor = g[inst.name("rc_call")], g[inst.name("rc_anchor")]
        assert isinstance(call, StmtId) and isinstance(anchor, StmtId)
        return RootCause(call_stmt=call, anchor=anchor)
    return root_cause(compute_orders(race.witness), race.first, race.second)


# --------------------------------------------------------------------------
# Repairing one root cause
# --------------------------------------------------------------------------

def _chain(containers: dict, cpath, index) -> list:
    """(container, index) hops from the method root down to a position.

    `index` may be a statement's own list position or an await slot
    boundary; both compare the same way."""
    hops = [(cpath, index)]
    while cpath:
        comp = cpath[:-1]  # id path of the enclosing if/while
        parent = comp[:-1]
        seq = containers[parent]
        index = next(k for k, s in enumerate(seq) if s.id.path == comp)
        cpath = parent
        hops.append((cpath, index))
    return hops[::-1]


def _stmt_chain(containers: dict, sid: StmtId) -> list:
    for cpath, seq in containers.items():
        for k, s in enumerate(seq):
            if s.id == sid:
                return _chain(containers, cpath, k)
    raise KeyError(str(sid))


def _follows(first: list, second: list) -> bool:
    """Is the second position strictly after the first on a forward path?

    Walks both chains from the method root; positions in different arms of
    one conditional never follow each other, and a boundary right before a
    statement (equal indexes all the way down) does not count as after."""
    for (ca, ia), (cb, ib) in zip(first, second):
        if ca != cb:
            return False
        if ia != ib:
            return ib > ia
    return False


def _inside_loop(containers: dict, chain: list) -> bool:
    for cpath, _ in chain[1:]:
        comp = cpath[:-1]
        parent = cpath[:-2]
        seq = containers[parent]
        holder = next(s for s in seq if s.id.path == comp)
        if isinstance(holder, While):
            return True
    return False


def repair_data_race(a: Asynchronization, rc: RootCause) -> Asynchronization:
    """Weakest placement at or below the current one that beats the anchor.

    Replaces the blamed call's cut with the unique maximal canonical cut
    below the current one none of whose awaits sits after the anchor on a
    forward control path.  Awaits in branches the anchor cannot see keep
    their distance.  A root cause already satisfied returns the placement
    unchanged."""
    call, anchor = rc.call_stmt, rc.anchor
    if call not in a.calls:
        raise InvalidRootCauseError(
            f"{call} is not an asynchronous call of this program")
    if anchor.method != call.method:
        raise InvalidRootCauseError(
            f"anchor {anchor} lives outside method {call.method}")
    containers = _containers(a.base.method(call.method))
    call_chain = _stmt_chain(containers, call)
    anchor_chain = _stmt_chain(containers, anchor)
    cpath, seq, i = _region(a.base, call)
    if not _follows(call_chain, anchor_chain):
        if _inside_loop(containers, call_chain):
            # the anchor is behind the call through a loop back edge; no
            # forward placement can beat it, so serialise the call outright
            return a.with_cut(call, frozenset({(cpath, i + 1)}))
        raise InvalidRootCauseError(
            f"anchor {anchor} does not follow call {call}")
    cur = a.cut(call)
    cands = [cut for cut, _ in _call_cuts(a.base, call)
             if _le_cut(cut, cur, cpath, seq, i + 1)
             and not any(_follows(anchor_chain, _chain(containers, sp, sj))
                         for sp, sj in cut)]
    tops = [c for c in cands
            if not any(d != c and _le_cut(c, d, cpath, seq, i + 1)
                       for d in cands)]
    if len(tops) != 1:
        raise SpaceError(
            f"no unique weakest placement beats anchor {anchor} "
            f"for call {call}")
    return a.with_cut(call, tops[0])


# --------------------------------------------------------------------------
# The repair loop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaxRelRun:
    """Final placement plus the root causes repaired on the way, in order."""

    result: Asynchronization
    repairs: tuple

    @property
    def iterations(self) -> int:
        return len(self.repairs)

    def to_json(self) -> dict:
        return {"iterations": self.iterations,
                "repairs": [rc.to_json() for rc in self.repairs]}


def maxrel_run(a: Asynchronization,
               cfg: ExplorationConfig = ExplorationConfig(),
               init: Optional[dict] = None) -> MaxRelRun:
    """Repair minimal races until none is left.

    Each round strictly strengthens one call's cut, so the loop ends after
    at most the total number of canonical cuts."""
    limit = 1 + sum(len(_call_cuts(a.base, c)) for c in a.calls)
    repairs = []
    current = a
    for _ in range(limit):
        rc = rc_min_drace(current, cfg, init)
        if rc is None:
            return MaxRelRun(result=current, repairs=tuple(repairs))
        fixed = repair_data_race(current, rc)
        if fixed.placement == current.placement:
            raise InvalidRootCauseError(
                f"repair of ({rc.call_stmt}, {rc.anchor}) left the "
                f"placement unchanged")
        repairs.append(rc)
        current = fixed
    raise SpaceError("await-strengthening loop exceeded its bound")


def maxrel(a: Asynchronization,
           cfg: ExplorationConfig = ExplorationConfig(),
           init: Optional[dict] = None) -> Asynchronization:
    """The weakest data-race-free placement at or below the given one."""
    return maxrel_run(a, cfg, init).result
