"""Tests for the await-placement space.

The readfile example is worked out by hand below: two async calls, one with
three legal positions and one with two, giving a 3x2 grid whose order,
covers, Hasse diagram and descent are all pinned exactly.  Random programs
then check the structural invariants the search relies on: the weaker-than
relation is a partial order with unique top and bottom, covers grow along
it, and the filtered-predecessor descent from the weakest placement visits
every placement exactly once.
"""

import glob
import os
import random

import pytest

from asyncsynth.frontend import (
    StmtId, check_well_formed, parse_file, parse_program, pretty_print,
    synchronous_view,
)
from asyncsynth.space import (
    Asynchronization, DifferentBaseError, SpaceBudgetExceededError,
    all_asyncs_bruteforce, await_order, call_cover, cover, distance_vector,
    from_program, immediate_predecessors, leq, next_ele, strong_async,
    to_json, to_tal, weakest_async,
)
from randprog import random_program

CORPUS = os.path.join(os.path.dirname(__file__), "..", "corpus")
sid = StmtId.parse


def corpus(name):
    return parse_file(os.path.join(CORPUS, name))


def assert_well_formed(p):
    assert not check_well_formed(p, require_awaits=True)


def by_vector(placements):
    out = {}
    for a in placements:
        v = distance_vector(a)
        assert v not in out, f"distance vector {v} is ambiguous here"
        out[v] = a
    return out


# --------------------------------------------------------------------------
# reading placements off programs, and writing them back
# --------------------------------------------------------------------------

def test_corpus_programs_round_trip():
    rejected = []
    for path in sorted(glob.glob(os.path.join(CORPUS, "*.tal"))):
        p = parse_file(path)
        if check_well_formed(p, require_awaits=True):
            with pytest.raises(ValueError):
                from_program(p)
            rejected.append(os.path.basename(path))
            continue
        a = from_program(p)
        # materializing the placement reproduces the source text
        assert pretty_print(a.program()) == pretty_print(p)
        # the base is the await-erased view, ids untouched
        assert a.base == synchronous_view(p)
        # and reading the placement back is the identity
        assert from_program(a.program()) == a
    # the corpus carries two deliberately ill-formed examples
    assert rejected == ["await_after_loop.tal", "await_one_branch.tal"]


def test_strongest_placement_awaits_immediately():
    p = corpus("readfile.tal")
    s = strong_async(p)
    assert distance_vector(s) == (0, 0)
    for c in cover(s).values():
        assert c == frozenset()
    assert_well_formed(s.program())


def test_from_program_rejects_ill_formed_input():
    p = parse_program("""
globals x;
asyncify m;
method m { await *; x := 1; return; }
method Main { await r; r := call m; }
""", "bad")
    with pytest.raises(ValueError):
        from_program(p)


def test_from_program_rejects_await_on_one_path_twice():
    p = parse_program("""
globals x;
asyncify m;
method m { await *; x := 1; return; }
method Main { r := call m; await r; x := 2; await r; }
""", "twice")
    with pytest.raises(ValueError):
        from_program(p)


def test_from_program_rejects_unhoisted_branch_awaits():
    # an await at the top of both arms is the same placement as one await
    # before the if; only the latter spelling is canonical
    p = parse_program("""
globals x, y;
asyncify m;
method m { await *; x := 1; return; }
method Main {
  r := call m;
  if (*) { await r; r1 := x; } else { await r; r2 := y; }
}
""", "unhoisted")
    with pytest.raises(ValueError):
        from_program(p)


def test_awaits_of_never_suspending_calls_are_dropped():
    p = parse_program("""
globals x;
asyncify m;
method m { await *; x := 1; return; }
method helper { x := 2; return; }
method Main { r := call m; h := call helper; await h; await r; }
""", "drop")
    a = from_program(p)
    assert [str(c) for c in a.calls] == ["Main:0"]
    # the helper's await is gone from the materialized program
    assert "await h" not in pretty_print(a.program())


# --------------------------------------------------------------------------
# the readfile space, worked out by hand
# --------------------------------------------------------------------------
#
# Main's await over RdFile can sit before the two statements following the
# call, between them, or after both (distances 0/1/2); RdFile's await over
# WtFile can sit before or after the write it covers (0/1).  Six placements
# in a 3x2 grid ordered componentwise.

def test_readfile_space_is_a_grid():
    p = corpus("readfile.tal")
    placements = all_asyncs_bruteforce(p)
    assert len(placements) == 6
    vecs = by_vector(placements)
    assert set(vecs) == {(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)}

    w, s = weakest_async(p), strong_async(p)
    assert distance_vector(w) == (2, 1)
    assert distance_vector(s) == (0, 0)
    assert from_program(p) == w  # the corpus file is the weakest placement
    assert [str(c) for c in await_order(w)] == ["Main:1", "RdFile:0"]

    # weaker-than is exactly the componentwise order on distance vectors
    for a in placements:
        for b in placements:
            expect = all(x <= y for x, y in
                         zip(distance_vector(a), distance_vector(b)))
            assert leq(a, b) == expect


def test_readfile_hasse_diagram():
    placements = all_asyncs_bruteforce(corpus("readfile.tal"))
    vecs = by_vector(placements)
    edges = {(distance_vector(b), distance_vector(a))
             for a in placements for b in immediate_predecessors(a)}
    assert edges == {
        ((0, 0), (0, 1)), ((0, 0), (1, 0)),
        ((0, 1), (1, 1)), ((1, 0), (1, 1)),
        ((1, 0), (2, 0)), ((1, 1), (2, 1)),
        ((2, 0), (2, 1)),
    }
    assert immediate_predecessors(vecs[(1, 1)]) == {vecs[(0, 1)], vecs[(1, 0)]}
    assert immediate_predecessors(vecs[(0, 0)]) == frozenset()


def test_readfile_covers():
    p = corpus("readfile.tal")
    w = weakest_async(p)
    covers = {str(aw): c for aw, c in cover(w).items()}
    assert covers == {
        "Main:1.w0": frozenset({sid("Main:2"), sid("Main:3")}),
        "RdFile:0.w0": frozenset({sid("RdFile:1")}),
    }
    assert call_cover(w, sid("Main:1")) == frozenset({sid("Main:2"),
                                                      sid("Main:3")})
    assert w.awaits() == {
        sid("Main:1"): (sid("Main:1.w0"),),
        sid("RdFile:0"): (sid("RdFile:0.w0"),),
    }


def test_readfile_materializations_are_well_formed():
    for a in all_asyncs_bruteforce(corpus("readfile.tal")):
        assert_well_formed(a.program())


def test_readfile_next_ele_walkthrough():
    placements = all_asyncs_bruteforce(corpus("readfile.tal"))
    vecs = by_vector(placements)
    w = vecs[(2, 1)]
    last = await_order(w)[-1]  # RdFile's await sorts after Main's

    def step(a, aw):
        return {(distance_vector(b), str(moved))
                for b, moved in next_ele(a, aw)}

    # at the weakest placement every await may move
    assert step(w, last) == {((1, 1), "Main:1.w0"), ((2, 0), "RdFile:0.w0")}
    assert step(vecs[(1, 1)], last) == {((0, 1), "Main:1.w0"),
                                        ((1, 0), "RdFile:0.w0")}
    # after moving Main's await, RdFile's may no longer move
    assert step(vecs[(0, 1)], sid("Main:1.w0")) == set()
    assert step(vecs[(2, 0)], sid("RdFile:0.w0")) == {((1, 0), "Main:1.w0")}
    # moves are always immediate predecessor steps
    for a in placements:
        for aw in (str(x) for xs in a.awaits().values() for x in xs):
            for b, _ in next_ele(a, sid(aw)):
                assert b in immediate_predecessors(a)


# --------------------------------------------------------------------------
# branching: awaits split across arms, merge back above the if
# --------------------------------------------------------------------------

def test_branch_split_space():
    p = corpus("branch_split.tal")
    placements = all_asyncs_bruteforce(p)
    assert len(placements) == 4
    vecs = by_vector(placements)
    assert set(vecs) == {(0,), (0, 1), (1, 0), (2,)}

    call = sid("Main:0")
    w = weakest_async(p)
    assert w == vecs[(2,)]
    assert w.cut(call) == frozenset({((), 2)})  # one await after the if
    # one step stronger: the await splits into one copy per arm
    assert immediate_predecessors(w) == {vecs[(0, 1)], vecs[(1, 0)]}
    assert vecs[(0, 1)].cut(call) == frozenset({((1, 0), 0), ((1, 1), 1)})
    assert vecs[(1, 0)].cut(call) == frozenset({((1, 0), 1), ((1, 1), 0)})
    # both copies at their arm tops is spelled as one await before the if
    assert immediate_predecessors(vecs[(0, 1)]) == {vecs[(0,)]}
    assert immediate_predecessors(vecs[(1, 0)]) == {vecs[(0,)]}
    assert vecs[(0,)].cut(call) == frozenset({((), 1)})

    # split placements materialize two awaits of the same task variable
    assert [str(x) for x in vecs[(0, 1)].awaits()[call]] == [
        "Main:0.w0", "Main:0.w1"]
    for a in placements:
        assert_well_formed(a.program())


def test_straight_line_cuts_are_suffix_positions():
    p = parse_program("""
globals a, b, c;
asyncify leaf;
method leaf { await *; a := 1; return; }
method Main { r := call leaf; b := 1; c := 2; b := 3; await r; }
""", "line")
    placements = all_asyncs_bruteforce(p)
    assert sorted(distance_vector(a) for a in placements) == [
        (0,), (1,), (2,), (3,)]
    # a single chain: the order is total
    chain = sorted(placements, key=distance_vector)
    for i, a in enumerate(chain):
        for j, b in enumerate(chain):
            assert leq(a, b) == (i <= j)


def test_two_vars_xy_space():
    p = corpus("two_vars_xy.tal")
    placements = all_asyncs_bruteforce(p)
    assert len(placements) == 24
    w = weakest_async(p)
    assert [str(c) for c in await_order(w)] == ["Main:0", "m:0", "m:1"]
    assert distance_vector(w) == (1, 3, 2)
    # the corpus placement parks m's first await mid-body: not the weakest
    assert distance_vector(from_program(p)) == (1, 1, 2)


def test_await_cannot_move_past_a_reachable_return():
    p = parse_program("""
globals x, y;
asyncify leaf;
method leaf { await *; x := 1; return; }
method m {
  r := call leaf;
  if (*) { y := 1; return; } else { r2 := y; }
  y := 3;
  await r;
  return;
}
method Main { q := call m; await q; }
""", "armret")
    placements = all_asyncs_bruteforce(p)
    call = sid("m:0")
    cuts = {a.cut(call) for a in placements}
    # then arm: before the write or before the return; never after it
    assert frozenset({((1, 0), 1), ((1, 1), 1)}) in cuts
    assert all(((1, 0), 2) not in c for c in cuts)
    # no placement may put m's await after the if either (one path returns)
    assert all(not any(slot == ((), 2) for slot in c) for c in cuts)
    for a in placements:
        assert_well_formed(a.program())


def test_loops_are_skipped_whole():
    p = parse_program("""
globals x, y;
asyncify leaf;
method leaf { await *; x := 1; return; }
method Main {
  r := call leaf;
  while (*) { y := 1; y := 2; }
  r2 := y;
  await r;
}
""", "loop")
    placements = all_asyncs_bruteforce(p)
    vecs = sorted(distance_vector(a) for a in placements)
    # before the loop (0), after it (its two statements), after the read
    assert vecs == [(0,), (2,), (3,)]
    for a in placements:
        for slot_path, _ in a.cut(sid("Main:0")):
            assert slot_path == ()  # never inside the loop body


# --------------------------------------------------------------------------
# degenerate and guarded cases
# --------------------------------------------------------------------------

def test_program_without_async_calls_has_one_placement():
    p = parse_program("""
globals x;
method helper { x := 1; return; }
method Main { r := call helper; r2 := x; }
""", "sync")
    placements = all_asyncs_bruteforce(p)
    assert len(placements) == 1
    (a,) = placements
    assert a.placement == ()
    assert a.program() == a.base
    assert weakest_async(p) == a == strong_async(p)
    assert distance_vector(a) == ()


def test_bruteforce_budget_guard():
    with pytest.raises(SpaceBudgetExceededError):
        all_asyncs_bruteforce(corpus("two_vars_xy.tal"), budget=3)


def test_different_bases_are_unordered():
    a = weakest_async(corpus("readfile.tal"))
    b = weakest_async(corpus("increment_racy.tal"))
    with pytest.raises(DifferentBaseError):
        leq(a, b)


def test_serialization_shapes():
    p = corpus("readfile.tal")
    w = weakest_async(p)
    doc = to_json(w)
    assert doc == {
        "placement": {
            "Main:1": [{"container": [], "index": 4}],
            "RdFile:0": [{"container": [], "index": 2}],
        },
        "distance_vector": [2, 1],
    }
    # the rendered program parses back to the same placement
    s = strong_async(p)
    again = from_program(parse_program(to_tal(s), "again"))
    assert distance_vector(again) == distance_vector(s) == (0, 0)


# --------------------------------------------------------------------------
# order and descent invariants on whole spaces
# --------------------------------------------------------------------------

def walk_next_ele(p):
    """Visit the space the way the enumeration does; list, not set."""
    w = weakest_async(p)
    order = await_order(w)
    seen = []

    def visit(a, aw):
        seen.append(a)
        for b, moved in next_ele(a, aw):
            visit(b, moved)

    if order:
        visit(w, order[-1])
    else:
        seen.append(w)
    return seen


def test_descent_covers_corpus_spaces_exactly_once():
    for path in sorted(glob.glob(os.path.join(CORPUS, "*.tal"))):
        p = parse_file(path)
        placements = all_asyncs_bruteforce(p)
        seen = walk_next_ele(p)
        assert len(seen) == len(set(seen)), os.path.basename(path)
        assert set(seen) == placements, os.path.basename(path)


def test_descent_handles_nested_branches():
    p = parse_program("""
globals a, b, c, d;
asyncify leaf;
method leaf { await *; a := 1; return; }
method Main {
  r := call leaf;
  if (*) { if (*) { b := 1; c := 1; } else { b := 2; } d := 1; }
  else { if (*) { c := 2; } else { } }
  b := 3;
  await r;
}
""", "deep")
    placements = all_asyncs_bruteforce(p)
    assert len(placements) == 15
    seen = walk_next_ele(p)
    assert len(seen) == len(set(seen)) == 15
    assert set(seen) == placements
    for a in placements:
        assert_well_formed(a.program())


def test_descent_and_order_on_random_programs():
    checked = 0
    for seed in range(40):
        p = synchronous_view(random_program(seed, max_methods=3,
                                            max_calls=3))
        try:
            placements = all_asyncs_bruteforce(p, budget=2000)
        except SpaceBudgetExceededError:
            continue
        checked += 1
        seen = walk_next_ele(p)
        assert len(seen) == len(set(seen)), f"duplicate visit, seed {seed}"
        assert set(seen) == placements, f"missed placements, seed {seed}"
        for a in placements:
            assert_well_formed(a.program())
    assert checked >= 30


def test_order_invariants_on_random_programs():
    rng = random.Random(4)
    checked = 0
    for seed in range(40, 80):
        p = synchronous_view(random_program(seed, max_methods=3,
                                            max_calls=3))
        try:
            placements = list(all_asyncs_bruteforce(p, budget=300))
        except SpaceBudgetExceededError:
            continue
        checked += 1
        w, s = weakest_async(p), strong_async(p)
        assert w in placements and s in placements
        for a in placements:
            assert leq(a, a)
            assert leq(s, a) and leq(a, w)

        for _ in range(3 * len(placements)):
            a, b, c = (rng.choice(placements) for _ in range(3))
            if leq(a, b) and leq(b, a):
                assert a == b
            if leq(a, b) and leq(b, c):
                assert leq(a, c)
            if leq(a, b):
                for call in a.calls:
                    assert call_cover(a, call) <= call_cover(b, call)

        if len(placements) <= 60:
            # immediate predecessors are exactly the covering relation
            for a in rng.sample(placements, min(5, len(placements))):
                below = [b for b in placements if b != a and leq(b, a)]
                covering = {
                    b for b in below
                    if not any(leq(b, z) and leq(z, a)
                               for z in below if z != b)}
                assert immediate_predecessors(a) == covering
    assert checked >= 30
