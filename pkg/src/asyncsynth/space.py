"""The space of await placements over a sequential base program.

An *asynchronization* of a base (await-free) program keeps the statements
of the base untouched and chooses, for every call to an async method, where
the matching ``await r`` statements go.  We represent that choice per call
as a *cut*: a set of insertion slots such that every control-flow path from
the call to the method exit crosses exactly one of them.  A slot is a pair
``(container_path, index)`` — insert just before position ``index`` of the
statement list addressed by ``container_path`` (the method body is ``()``,
the arms of ``if``/``while`` statements are addressed by the compound
statement's id path plus the arm number).

Cuts are kept in canonical form so that semantically identical placements
have one representative:

  * no path crosses two awaits of the same task (covers are exact);
  * an await at the top of both arms of an ``if`` is written before the
    ``if`` (conditions read no globals, so the two are indistinguishable);
  * an await at the end of both arms is written after the ``if``;
  * awaits cannot sit inside a loop the call is outside of (an iteration
    count of zero or two would break the one-await-per-path discipline),
    so moving an await past a loop skips the whole loop in one step;
  * a reachable ``return`` caps how far down an await can move.

Materializing an asynchronization inserts ``await r`` statements whose ids
extend the call's id path with ``w<k>``; base statements keep their ids, so
covers, data races and repair steps are directly comparable across the
whole space.  Inline ``await *`` statements of asyncified base methods are
part of the skeleton and are re-inserted verbatim.

The weaker-than order compares placements of the same base per call and
per path: ``a <= b`` when on every control-flow path each await of ``a``
sits no later than the await of ``b``.  On branch-free placements this is
exactly inclusion of the sets of covered statements.  The *cover* of an
await is the set of base statements on some path between the call and the
await; its size is the await's distance from the strongest placement, and
the tuple of distances (in ``await_order``) names each placement the way
the examples in this package's tests do.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Iterator, Optional, Union

from .frontend import (
    AwaitStar,
    AwaitVar,
    Call,
    If,
    MethodDef,
    PathElem,
    Program,
    Return,
    Stmt,
    StmtId,
    While,
    _elem_key,
    check_well_formed,
    iter_leaves,
    iter_stmts,
    pretty_print,
    sigma_star,
    synchronous_view,
    topo_order,
)

ContainerPath = tuple[PathElem, ...]
Slot = tuple[ContainerPath, int]
Cut = frozenset  # frozenset[Slot]


class SpaceError(Exception):
    code = "Space"


class SpaceBudgetExceededError(SpaceError):
    code = "SpaceBudgetExceeded"


class DifferentBaseError(SpaceError):
    code = "DifferentBase"


_END = (2,)  # sorts after int and str path-element keys


def _positional_key(containers: dict, slot: Slot):
    """Order slots by where they sit in the method text.

    Container paths are built from statement ids, slot indexes count
    positions in the base statement list; the two drift apart once awaits
    were erased, so the index is translated to the id path element of the
    statement the slot precedes (container end sorts last).
    """
    path, index = slot
    seq = containers[path]
    tail = _elem_key(seq[index].id.path[-1]) if index < len(seq) else _END
    return tuple(_elem_key(e) for e in path) + (tail,)


def _ordered(base: "Program", call: StmtId, slots) -> list[Slot]:
    containers = _containers(base.method(call.method))
    return sorted(slots, key=lambda s: _positional_key(containers, s))


# --------------------------------------------------------------------------
# Asynchronizations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Asynchronization:
    """A base program plus one canonical cut per async call."""

    base: Program
    star_positions: tuple[tuple[StmtId, ContainerPath, int], ...]
    placement: tuple[tuple[StmtId, Cut], ...]

    @property
    def calls(self) -> tuple[StmtId, ...]:
        return tuple(call for call, _ in self.placement)

    def cut(self, call: StmtId) -> Cut:
        for c, cut in self.placement:
            if c == call:
                return cut
        raise KeyError(str(call))

    def program(self) -> Program:
        """The runnable program with all awaits inserted."""
        return _materialize(self)

    def awaits(self) -> dict[StmtId, tuple[StmtId, ...]]:
        """Call id -> ids of its inserted awaits, in slot order."""
        out: dict[StmtId, tuple[StmtId, ...]] = {}
        for call, cut in self.placement:
            out[call] = tuple(
                StmtId(call.method, call.path + (f"w{k}",))
                for k in range(len(cut)))
        return out

    def with_cut(self, call: StmtId, cut: Cut) -> "Asynchronization":
        placement = tuple((c, cut if c == call else old)
                          for c, old in self.placement)
        return replace(self, placement=placement)


def _insertion_order(stmt: Stmt) -> tuple:
    return stmt.id.sort_key


@lru_cache(maxsize=4096)
def _materialize(a: Asynchronization) -> Program:
    stmts = a.base.stmt_map()
    # method -> (container path, index) -> statements to insert there
    ins: dict[str, dict[Slot, list[Stmt]]] = {}

    def at(method: str, slot: Slot) -> list[Stmt]:
        return ins.setdefault(method, {}).setdefault(slot, [])

    for sid, path, index in a.star_positions:
        at(sid.method, (path, index)).append(AwaitStar(sid))
    for call, cut in a.placement:
        local = stmts[call].local
        for k, (path, index) in enumerate(_ordered(a.base, call, cut)):
            aw = AwaitVar(StmtId(call.method, call.path + (f"w{k}",)), local)
            at(call.method, (path, index)).append(aw)

    def rebuild(body: tuple[Stmt, ...], cpath: ContainerPath,
                here: dict[Slot, list[Stmt]]) -> tuple[Stmt, ...]:
        out: list[Stmt] = []
        for index in range(len(body) + 1):
            out.extend(sorted(here.get((cpath, index), ()),
                              key=_insertion_order))
            if index == len(body):
                break
            s = body[index]
            if isinstance(s, If):
                s = replace(s, then=rebuild(s.then, s.id.path + (0,), here),
                            els=rebuild(s.els, s.id.path + (1,), here))
            elif isinstance(s, While):
                s = replace(s, body=rebuild(s.body, s.id.path + (0,), here))
            out.append(s)
        return tuple(out)

    methods = []
    for m in a.base.methods:
        here = ins.get(m.name)
        methods.append(MethodDef(m.name, rebuild(m.body, (), here))
                       if here else m)
    return replace(a.base, methods=tuple(methods))


# --------------------------------------------------------------------------
# Per-call cut enumeration
# --------------------------------------------------------------------------

def _leaf_ids(s: Stmt) -> frozenset:
    return frozenset(x.id for x in iter_leaves((s,)))


def _has_return(s: Stmt) -> bool:
    return any(isinstance(x, Return) for x in iter_stmts((s,)))


def _cut_options(path: ContainerPath, seq: tuple[Stmt, ...], j: int,
                 prefix: frozenset) -> list[dict]:
    """Canonical cuts of the paths leaving position j, with their covers.

    Each option maps slot -> set of base statements between the call and
    that slot along the paths the slot cuts.
    """
    options: list[dict] = [{(path, j): prefix}]
    if j == len(seq):
        return options
    s = seq[j]
    if isinstance(s, Return):
        return options  # a path may not pass a return before its await
    if isinstance(s, While):
        if _has_return(s):
            return options
        options.extend(_cut_options(path, seq, j + 1, prefix | _leaf_ids(s)))
    elif isinstance(s, If):
        tp, ep = s.id.path + (0,), s.id.path + (1,)
        tops = (frozenset({(tp, 0)}), frozenset({(ep, 0)}))
        ends = (frozenset({(tp, len(s.then))}), frozenset({(ep, len(s.els))}))
        for ct in _cut_options(tp, s.then, 0, prefix):
            for ce in _cut_options(ep, s.els, 0, prefix):
                pair = (frozenset(ct), frozenset(ce))
                if pair == tops or pair == ends:
                    continue  # written before / after the if instead
                options.append({**ct, **ce})
        if not _has_return(s):
            options.extend(
                _cut_options(path, seq, j + 1, prefix | _leaf_ids(s)))
    else:
        options.extend(_cut_options(path, seq, j + 1, prefix | {s.id}))
    return options


@lru_cache(maxsize=2048)
def _region(base: Program, call: StmtId):
    """Container path, statement list and list index of a call statement."""
    cpath = call.path[:-1]
    seq = _container_seq(base.method(call.method), cpath)
    for i, s in enumerate(seq):
        if s.id == call:
            return cpath, seq, i
    raise KeyError(str(call))


def _container_seq(m: MethodDef, cpath: ContainerPath) -> tuple[Stmt, ...]:
    containers = _containers(m)
    return containers[cpath]


@lru_cache(maxsize=2048)
def _containers(m: MethodDef) -> dict:
    out: dict[ContainerPath, tuple[Stmt, ...]] = {}

    def walk(body: tuple[Stmt, ...], cpath: ContainerPath) -> None:
        out[cpath] = body
        for s in body:
            if isinstance(s, If):
                walk(s.then, s.id.path + (0,))
                walk(s.els, s.id.path + (1,))
            elif isinstance(s, While):
                walk(s.body, s.id.path + (0,))

    walk(m.body, ())
    return out


MAX_CUTS_PER_CALL = 400


@lru_cache(maxsize=2048)
def _call_cuts(base: Program, call: StmtId) -> tuple:
    """All canonical cuts for one call: ((cut, covers), ...)."""
    cpath, seq, i = _region(base, call)
    opts = _cut_options(cpath, seq, i + 1, frozenset())
    if len(opts) > MAX_CUTS_PER_CALL:
        raise SpaceBudgetExceededError(
            f"{len(opts)} await positions for {call} exceed the per-call "
            f"limit of {MAX_CUTS_PER_CALL}")
    return tuple((frozenset(d), d) for d in opts)


def _covers_for(base: Program, call: StmtId, cut: Cut) -> dict:
    for c, covers in _call_cuts(base, call):
        if c == cut:
            return covers
    raise KeyError(f"cut for {call} is not in canonical form")


def _async_calls(base: Program) -> list[StmtId]:
    async_methods = sigma_star(base)
    out = [s.id for m in base.methods for s in iter_stmts(m.body)
           if isinstance(s, Call) and s.method in async_methods]
    out.sort(key=lambda sid: sid.sort_key)
    return out


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------

def _skeleton(p: Program):
    """Base program and await-* positions of an input program."""
    base = synchronous_view(p)
    stars: list[tuple[StmtId, ContainerPath, int]] = []

    def walk(body: tuple[Stmt, ...], cpath: ContainerPath) -> None:
        kept = 0
        for s in body:
            if isinstance(s, AwaitStar):
                stars.append((s.id, cpath, kept))
                continue
            if isinstance(s, AwaitVar):
                continue
            if isinstance(s, If):
                walk(s.then, s.id.path + (0,))
                walk(s.els, s.id.path + (1,))
            elif isinstance(s, While):
                walk(s.body, s.id.path + (0,))
            kept += 1

    for m in p.methods:
        walk(m.body, ())
    return base, tuple(stars)


def from_program(p: Program) -> Asynchronization:
    """Read the await placement off an existing well-formed program.

    Awaits of calls to methods that can never suspend carry no information
    and are dropped.  Raises ValueError for ill-formed or non-canonical
    placements.
    """
    bad = check_well_formed(p, require_awaits=True)
    if bad:
        raise ValueError("; ".join(str(v) for v in bad))
    base, stars = _skeleton(p)
    async_methods = sigma_star(base)

    binding: dict[tuple[str, str], StmtId] = {}
    for m in p.methods:
        for s in iter_stmts(m.body):
            if isinstance(s, Call):
                binding[(m.name, s.local)] = s.id

    cuts: dict[StmtId, set[Slot]] = {c: set() for c in _async_calls(base)}

    def walk(method: str, body: tuple[Stmt, ...], cpath: ContainerPath):
        kept = 0
        for s in body:
            if isinstance(s, AwaitVar):
                call = binding[(method, s.local)]
                if call in cuts:
                    cuts[call].add((cpath, kept))
                continue
            if isinstance(s, AwaitStar):
                continue
            if isinstance(s, If):
                walk(method, s.then, s.id.path + (0,))
                walk(method, s.els, s.id.path + (1,))
            elif isinstance(s, While):
                walk(method, s.body, s.id.path + (0,))
            kept += 1

    for m in p.methods:
        walk(m.name, m.body, ())

    placement = []
    for call in _async_calls(base):
        cut = frozenset(cuts[call])
        try:
            _covers_for(base, call, cut)
        except KeyError as e:
            raise ValueError(str(e)) from None
        placement.append((call, cut))
    return Asynchronization(base, stars, tuple(placement))


def strong_async(p: Program) -> Asynchronization:
    """Every await immediately after its call."""
    base, stars = _skeleton(p)
    placement = []
    for call in _async_calls(base):
        cpath, _, i = _region(base, call)
        placement.append((call, frozenset({(cpath, i + 1)})))
    return Asynchronization(base, stars, tuple(placement))


def weakest_async(p: Program) -> Asynchronization:
    """Every await as late as the structural rules allow."""
    base, stars = _skeleton(p)
    placement = []
    for call in _async_calls(base):
        cuts = [c for c, _ in _call_cuts(base, call)]
        top = _poset(base, call).top
        placement.append((call, top))
        assert top in cuts
    return Asynchronization(base, stars, tuple(placement))


# --------------------------------------------------------------------------
# The weaker-than order
# --------------------------------------------------------------------------

def _within(cut: Cut, arm: ContainerPath) -> bool:
    return any(path[:len(arm)] == arm for path, _ in cut)


def _le_cut(a: Cut, b: Cut, path: ContainerPath, seq: tuple[Stmt, ...],
            j: int) -> bool:
    """Pathwise: does every await of `a` sit no later than `b`'s?"""
    while True:
        if (path, j) in a:
            return True  # a cuts all remaining paths right here
        if (path, j) in b:
            return False  # b already cut, a cuts later on some path
        assert j < len(seq), "cut escaped its region"
        s = seq[j]
        if isinstance(s, If):
            tp, ep = s.id.path + (0,), s.id.path + (1,)
            a_in = _within(a, tp) or _within(a, ep)
            b_in = _within(b, tp) or _within(b, ep)
            if a_in and b_in:
                return (_le_cut(a, b, tp, s.then, 0)
                        and _le_cut(a, b, ep, s.els, 0))
            if a_in:
                return True  # b's cut comes after the whole if
            if b_in:
                return False
        j += 1


def _check_same_base(a: Asynchronization, b: Asynchronization) -> None:
    if a.base != b.base or a.star_positions != b.star_positions:
        raise DifferentBaseError(
            "asynchronizations of different base programs are unordered")


def leq(a: Asynchronization, b: Asynchronization) -> bool:
    """a is as strong as b: per call, every await no later on any path."""
    _check_same_base(a, b)
    for call, cut in a.placement:
        cpath, seq, i = _region(a.base, call)
        if not _le_cut(cut, b.cut(call), cpath, seq, i + 1):
            return False
    return True


# --------------------------------------------------------------------------
# Covers and distances
# --------------------------------------------------------------------------

def cover(a: Asynchronization) -> dict[StmtId, frozenset]:
    """Await id -> base statements some path crosses before that await."""
    out: dict[StmtId, frozenset] = {}
    for call, cut in a.placement:
        covers = _covers_for(a.base, call, cut)
        for k, slot in enumerate(_ordered(a.base, call, cut)):
            sid = StmtId(call.method, call.path + (f"w{k}",))
            out[sid] = frozenset(covers[slot])
    return out


def call_cover(a: Asynchronization, call: StmtId) -> frozenset:
    """Union of the covers of a call's awaits."""
    covers = _covers_for(a.base, call, a.cut(call))
    out: frozenset = frozenset()
    for c in covers.values():
        out |= c
    return out


@lru_cache(maxsize=2048)
def _call_order(base: Program) -> tuple[StmtId, ...]:
    rank = {name: i for i, name in enumerate(topo_order(base))}

    def key(call: StmtId):
        top = _poset(base, call).top
        containers = _containers(base.method(call.method))
        earliest = min(_positional_key(containers, s) for s in top)
        return (rank[call.method], earliest, call.sort_key)

    return tuple(sorted(_async_calls(base), key=key))


def await_order(a: Asynchronization) -> list[StmtId]:
    """Async calls, most-constrained last.

    Total order over the awaits (named by their call): awaits of a caller
    come before awaits of its (transitive) callees, awaits of one method
    follow the body position of their latest legal slot.  The order only
    depends on the base program, so it is shared across the whole space.
    Awaits of the *same* call (branch copies) refine this order by their
    slot position in the method text.
    """
    return list(_call_order(a.base))


def await_key(a: Asynchronization, sid: StmtId):
    """Sort key of one await (or a call id, naming its last) in that order."""
    call, slot = _resolve_await(a, sid)
    order = _call_order(a.base)
    containers = _containers(a.base.method(call.method))
    return (order.index(call), _positional_key(containers, slot))


def distance_vector(a: Asynchronization) -> tuple[int, ...]:
    """Covered-statement counts, one entry per await, in await_order.

    For branch-free placements this is one count per call; an await that
    had to be duplicated across branch arms contributes one entry per arm.
    """
    out: list[int] = []
    for call in await_order(a):
        covers = _covers_for(a.base, call, a.cut(call))
        for slot in _ordered(a.base, call, a.cut(call)):
            out.append(len(covers[slot]))
    return tuple(out)


# --------------------------------------------------------------------------
# Neighbourhood: one await, one step stronger
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _CutPoset:
    cuts: tuple
    top: Cut
    preds: dict  # cut -> tuple of immediate predecessors

    def __hash__(self):  # only ever cached, never compared
        return id(self)


@lru_cache(maxsize=2048)
def _poset(base: Program, call: StmtId) -> _CutPoset:
    cpath, seq, i = _region(base, call)
    cuts = [c for c, _ in _call_cuts(base, call)]
    le = {(x, y): _le_cut(x, y, cpath, seq, i + 1)
          for x in cuts for y in cuts}
    tops = [x for x in cuts if all(le[(y, x)] for y in cuts)]
    assert len(tops) == 1, "weakest cut is not unique"
    preds = {}
    for x in cuts:
        below = [y for y in cuts if y != x and le[(y, x)]]
        preds[x] = tuple(
            y for y in below
            if not any(le[(y, z)] and le[(z, x)] and z != y and z != x
                       for z in below))
    return _CutPoset(tuple(cuts), tops[0], preds)


def _step_slots(base: Program, call: StmtId, old: Cut,
                new: Cut) -> tuple[Slot, Slot]:
    """(filter position, landing slot) of the await moved in old -> new.

    Exactly one await advances by one unit per immediate step.  Crossing
    an if-join downward it splits — the copies left at an arm end restate
    the old position, the strictly-interior copy is the one that moved.
    Reaching its arm top while every sibling copy already sits at theirs,
    it fuses back into a single await before the if; the filter position
    of a fused await is the arm top it advanced to, not the slot it fused
    into, which keeps descents from generating a merge once per arm.
    """
    added = list(new - old)
    removed = list(old - new)
    assert added and removed, "immediate step changed nothing"
    if len(added) == 1 and len(removed) == 1:
        return added[0], added[0]
    containers = _containers(base.method(call.method))
    if len(added) > 1:  # split
        inner = [s for s in added if s[1] != len(containers[s[0]])]
        assert len(inner) == 1, f"ambiguous moved await in {added}"
        return inner[0], inner[0]
    movers = [s for s in removed if s[1] != 0]  # merge
    assert len(movers) == 1, f"ambiguous fused await in {removed}"
    return (movers[0][0], 0), added[0]


def _pred_pairs(a: Asynchronization):
    """Immediate predecessors with the moved await's positions."""
    out = []
    for call, cut in a.placement:
        for smaller in _poset(a.base, call).preds[cut]:
            tag, landing = _step_slots(a.base, call, cut, smaller)
            out.append((a.with_cut(call, smaller), call, tag, landing))
    return out


def immediate_predecessors(a: Asynchronization) -> frozenset:
    """One await moved one step up (one covered statement, or one region)."""
    return frozenset(b for b, _, _, _ in _pred_pairs(a))


def _as_call_sid(sid: StmtId) -> StmtId:
    if sid.path and isinstance(sid.path[-1], str) and sid.path[-1][0] == "w":
        return StmtId(sid.method, sid.path[:-1])
    return sid


def _await_id(base: Program, call: StmtId, cut: Cut, slot: Slot) -> StmtId:
    k = _ordered(base, call, cut).index(slot)
    return StmtId(call.method, call.path + (f"w{k}",))


def _resolve_await(a: Asynchronization, sid: StmtId) -> tuple[StmtId, Slot]:
    """Await id (or call id) -> (call, slot) within this placement."""
    call = _as_call_sid(sid)
    slots = _ordered(a.base, call, a.cut(call))
    if sid == call:
        return call, slots[-1]
    return call, slots[int(sid.path[-1][1:])]


def next_ele(a: Asynchronization, s_w: StmtId) -> frozenset:
    """Immediate predecessors reached by moving an await at or below s_w.

    s_w is one of a's await ids (a call id names its last await).  Returns
    (asynchronization, moved await id) pairs, the id naming the moved await
    within the returned placement.  Restricting moves to awaits that do not
    come after s_w — by call in await_order, then by position in the method
    text — makes a recursive descent from the weakest placement visit every
    placement exactly once.
    """
    base = a.base
    order = _call_order(base)

    def key(call: StmtId, slot: Slot):
        containers = _containers(base.method(call.method))
        return (order.index(call), _positional_key(containers, slot))

    sw_call, sw_slot = _resolve_await(a, s_w)
    sw_key = key(sw_call, sw_slot)
    out = []
    for b, call, tag, landing in _pred_pairs(a):
        if key(call, tag) <= sw_key:
            out.append((b, _await_id(base, call, b.cut(call), landing)))
    return frozenset(out)


# --------------------------------------------------------------------------
# Exhaustive enumeration
# --------------------------------------------------------------------------

def all_asyncs_bruteforce(p: Program, budget: int = 20000) -> frozenset:
    """Every canonical placement, as a set.  Guard rail for the search."""
    base, stars = _skeleton(p)
    calls = _async_calls(base)
    per_call = [[c for c, _ in _call_cuts(base, call)] for call in calls]
    total = 1
    for options in per_call:
        total *= len(options)
    if total > budget:
        raise SpaceBudgetExceededError(
            f"{total} placements exceed the budget of {budget}")
    out = set()
    for combo in itertools.product(*per_call):
        placement = tuple(zip(calls, combo))
        out.add(Asynchronization(base, stars, placement))
    return frozenset(out)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def to_tal(a: Asynchronization) -> str:
    return pretty_print(a.program())


def to_json(a: Asynchronization) -> dict:
    placement = {}
    for call, cut in a.placement:
        placement[str(call)] = [
            {"container": list(path), "index": index}
            for path, index in _ordered(a.base, call, cut)]
    return {
        "placement": placement,
        "distance_vector": list(distance_vector(a)),
    }
