"""Interpreter tests: single steps, exhaustive exploration, sync runs.

The exploration oracles are small enough to reason out by hand; the hand
counts are frozen here so a scheduling regression shows up as a changed
execution count rather than a silently different race report downstream.
"""

import glob
import os
import random

import pytest

from asyncsynth.frontend import (
    check_well_formed, parse_file, parse_program, synchronous_view,
)
from asyncsynth.interp import (
    AwaitEv, CallEv, ContinueEv, ExplorationConfig, InterpError, ReturnEv,
    StoreEv, StateBudgetExceededError, enabled_steps, explore,
    initial_config, run_synchronous,
)
from randprog import random_program

CORPUS = os.path.join(os.path.dirname(__file__), "..", "corpus")
CFG = ExplorationConfig()


def corpus_programs():
    out = []
    for path in sorted(glob.glob(os.path.join(CORPUS, "*.tal"))):
        p = parse_file(path)
        if not check_well_formed(p):
            out.append(p)
    return out


# --------------------------------------------------------------------------
# initial configurations
# --------------------------------------------------------------------------

def test_initial_config_zero_globals():
    p = parse_program("""
globals a, b, c;
method Main { a := 1; }
""", "t")
    c = initial_config(p)
    assert c.valuation() == {"a": 0, "b": 0, "c": 0}
    assert len(c.stack) == 1
    assert c.stack[0].method == "Main" and c.stack[0].task == 0
    assert not c.pending and not c.completed and not c.waits


def test_initial_config_override():
    p = parse_program("globals a, b;\nmethod Main { a := 1; }", "t")
    c = initial_config(p, init={"b": 5})
    assert c.valuation() == {"a": 0, "b": 5}


# --------------------------------------------------------------------------
# single steps
# --------------------------------------------------------------------------

def only(steps):
    assert len(steps) == 1, [a.event.render() for a, _ in steps]
    return steps[0]


def test_await_of_completed_task_is_a_single_silent_continue():
    p = parse_program("""
globals x;
method Main { r := call m1; await r; }
method m1 { x := 1; return; }
""", "t")
    c = initial_config(p)
    a, c = only(enabled_steps(c, p, CFG))          # call
    assert isinstance(a.event, CallEv) and a.event.callee == 1
    a, c = only(enabled_steps(c, p, CFG))          # m1: x := 1
    assert isinstance(a.event, StoreEv)
    a, c = only(enabled_steps(c, p, CFG))          # m1: return
    assert isinstance(a.event, ReturnEv) and a.task == 1
    a, c = only(enabled_steps(c, p, CFG))          # Main: await r, ψ(1)=⊤
    assert isinstance(a.event, AwaitEv) and a.event.target == 1
    assert c.stack and c.stack[0].task == 0        # Main kept running
    a, c = only(enabled_steps(c, p, CFG))          # implicit return
    assert isinstance(a.event, ReturnEv) and a.task == 0
    assert c.done


def test_await_star_branches_two_ways():
    p = parse_program("""
globals x;
asyncify m1;
method Main { r := call m1; await r; }
method m1 { await *; return; }
""", "t")
    c = initial_config(p)
    _, c = only(enabled_steps(c, p, CFG))
    steps = enabled_steps(c, p, CFG)               # m1 at await *
    assert len(steps) == 2
    (a1, cont), (a2, susp) = steps
    assert a1 == a2 and a1.event == AwaitEv("*")
    assert cont.stack[0].task == 1                 # continued in place
    assert susp.stack[0].task == 0                 # suspended into pending
    assert [f.task for f in susp.pending] == [1]
    assert susp.waits_on(1) == "*"


def test_pending_task_on_completed_target_gets_one_continue():
    p = parse_program("""
globals x;
asyncify m1;
method Main { r := call m1; await r; }
method m1 { await *; return; }
""", "t")
    c = initial_config(p)
    _, c = only(enabled_steps(c, p, CFG))          # call
    c = enabled_steps(c, p, CFG)[1][1]             # await *: suspend branch
    # m1's background continue and Main's await now compete; take the await
    steps = [(a, c2) for a, c2 in enabled_steps(c, p, CFG)
             if isinstance(a.event, AwaitEv)]
    a, c = only(steps)                             # Main: await r, ψ(1)=⊥
    assert not c.stack
    a, c = only(enabled_steps(c, p, CFG))          # only m1's *-continue
    assert isinstance(a.event, ContinueEv) and a.task == 1 and a.stmt is None
    a, c = only(enabled_steps(c, p, CFG))          # m1 returns (atomic)
    assert isinstance(a.event, ReturnEv) and a.task == 1
    # stack empty, Main pends on completed task 1: exactly one ContinueEv
    a, c = only(enabled_steps(c, p, CFG))
    assert isinstance(a.event, ContinueEv) and a.task == 0
    _, c = only(enabled_steps(c, p, CFG))
    assert c.done


def test_star_expression_fans_out_over_domain():
    p = parse_program("globals x;\nmethod Main { x := *; }", "t")
    c = initial_config(p)
    steps = enabled_steps(c, p, CFG)
    assert sorted(c2.global_value("x") for _, c2 in steps) == [0, 1]
    steps3 = enabled_steps(c, p, ExplorationConfig(domain=(0, 1, 2)))
    assert sorted(c2.global_value("x") for _, c2 in steps3) == [0, 1, 2]


def test_enabled_steps_is_deterministic():
    p = parse_file(os.path.join(CORPUS, "readfile.tal"))
    c = initial_config(p)
    for _ in range(4):
        first = enabled_steps(c, p, CFG)
        again = enabled_steps(c, p, CFG)
        assert first == again
        c = first[0][1]


# --------------------------------------------------------------------------
# exhaustive exploration
# --------------------------------------------------------------------------

def test_single_await_star_means_exactly_two_executions():
    # the only nondeterminism is the continue/suspend choice itself
    p = parse_program("""
globals x;
asyncify Main;
method Main { await *; x := 1; }
""", "t")
    exs = explore(p)
    assert len(exs) == 2
    assert {ex.final_globals for ex in exs} == {(("x", 1),)}


def test_call_then_await_star_has_three_schedules():
    # continue inline / resume before Main's await / resume after it
    p = parse_program("""
globals x;
asyncify m1;
method Main { r := call m1; await r; }
method m1 { await *; x := 1; return; }
""", "t")
    exs = explore(p)
    assert len(exs) == 3
    assert all(ex.valuation() == {"x": 1} for ex in exs)


def test_readfile_interleaves_both_ways():
    # the publishing store can land before or after the caller's store
    p = parse_file(os.path.join(CORPUS, "readfile.tal"))
    orders = set()
    for ex in explore(p):
        stores = [str(a.stmt) for a in ex.actions
                  if isinstance(a.event, StoreEv)
                  and a.event.var in ("y", "len")]
        orders.add(tuple(stores))
    assert ("Main:2", "ReadToEnd:1") in orders
    assert ("ReadToEnd:1", "Main:2") in orders


def test_strong_placement_matches_synchronous_valuations():
    # awaits immediately after their calls: the task never overlaps the
    # caller's accesses, so async and sync final states coincide
    p = parse_program("""
globals x, input, retVal;
asyncify m1;
method Main { r1 := call m1; await r1; r2 := x; }
method m1 { await *; rv := x; retVal := rv; ri := input; x := ri; return; }
""", "t")
    avals = {ex.final_globals for ex in explore(p) if not ex.truncated}
    svals = run_synchronous(synchronous_view(p)).valuations
    assert avals == set(svals)


def test_task_discipline_on_corpus():
    for p in corpus_programs():
        for ex in explore(p):
            calls = sorted(a.event.callee for a in ex.actions
                           if isinstance(a.event, CallEv))
            rets = sorted(a.task for a in ex.actions
                          if isinstance(a.event, ReturnEv))
            assert sorted(calls + [0]) == rets, p.source_name
            # every awaited task id is awaited exactly once
            awaited = [a.event.target for a in ex.actions
                       if isinstance(a.event, AwaitEv)
                       and a.event.target != "*"]
            assert len(awaited) == len(set(awaited)), p.source_name


def test_resumed_star_code_runs_atomically():
    # from a *-continue to that task's return or next suspension, only the
    # resumed task acts
    for p in corpus_programs():
        for ex in explore(p):
            star_suspended = set()
            last_await = {}
            for i, a in enumerate(ex.actions):
                if isinstance(a.event, AwaitEv):
                    last_await[a.task] = a.event.target
                if not isinstance(a.event, ContinueEv):
                    continue
                if last_await.get(a.task) != "*":
                    continue
                j = i + 1
                while j < len(ex.actions) and ex.actions[j].task == a.task:
                    j += 1
                window = ex.actions[i + 1:j]
                assert window, p.source_name
                assert isinstance(window[-1].event, (ReturnEv, AwaitEv)), (
                    p.source_name, [x.event.render() for x in ex.actions])


def test_concrete_loop_is_cut_and_marked():
    p = parse_program("""
globals x;
method Main {
  while (1 == 1) {
    x := 1;
  }
  x := 2;
}
""", "t")
    exs = explore(p, ExplorationConfig(loop_bound=3))
    assert len(exs) == 1
    ex = next(iter(exs))
    assert ex.truncated and ex.truncated_at == 3   # after three iterations
    assert ex.valuation() == {"x": 2}              # artifact of the cut


def test_star_loop_exits_exactly_within_bound():
    p = parse_program("""
globals x;
method Main {
  while (*) {
    x := 1;
  }
}
""", "t")
    exs = explore(p, ExplorationConfig(loop_bound=2))
    assert len(exs) == 3                           # 0, 1 or 2 iterations
    assert not any(ex.truncated for ex in exs)


def test_state_budget_is_enforced():
    p = parse_file(os.path.join(CORPUS, "await_in_loop.tal"))
    with pytest.raises(StateBudgetExceededError):
        explore(p, ExplorationConfig(max_states=10))


def test_execution_dump_is_json_lines():
    import json
    p = parse_file(os.path.join(CORPUS, "overlap_read.tal"))
    ex = sorted(explore(p), key=lambda e: len(e.actions))[0]
    lines = ex.to_json_lines()
    assert len(lines) == len(ex.actions)
    for line, a in zip(lines, ex.actions):
        rec = json.loads(line)
        assert set(rec) == {"act", "task", "event", "stmt"}
        assert rec["task"] == a.task
        assert (rec["stmt"] is None) == isinstance(a.event, ContinueEv)


# --------------------------------------------------------------------------
# synchronous runs
# --------------------------------------------------------------------------

def test_sync_two_stores():
    p = parse_program("globals x;\nmethod Main { x := 1; x := 2; }", "t")
    res = run_synchronous(p)
    assert set(res.valuations) == {(("x", 2),)}


def test_sync_file_read_always_sees_the_published_length():
    # synchronous version of the file-read example: the read of the cache
    # happens after the callee chain finished, so it sees the final length
    p = parse_program("""
globals x, y, len, got;
method Main { x := 0; r1 := call RdFile; y := 1; rlen := len; got := rlen; }
method RdFile { r2 := call ReadToEnd; rx := x; return; }
method ReadToEnd { len := 7; return; }
""", "t")
    res = run_synchronous(p)
    assert res.valuations
    for v in res.valuations:
        assert dict(v)["got"] == 7


def test_sync_star_branch_reaches_both_arms():
    p = parse_program("""
globals x, y;
method Main {
  if (*) {
    x := 1;
  } else {
    y := 1;
  }
}
""", "t")
    res = run_synchronous(p)
    reached = {str(s) for s in res.reached}
    assert "Main:0.0.0" in reached and "Main:0.1.0" in reached


def test_sync_rejects_programs_with_awaits():
    p = parse_file(os.path.join(CORPUS, "readfile.tal"))
    with pytest.raises(InterpError):
        run_synchronous(p)


def test_sync_truncated_runs_are_not_trusted():
    p = parse_program("""
globals x;
method Main {
  while (1 == 1) {
    x := 1;
  }
  x := 2;
}
""", "t")
    res = run_synchronous(p)
    assert not res.valuations                      # the only run was cut
    assert {str(s) for s in res.reached} == {"Main:0.0.0"}


def test_race_free_corpus_valuations_match_sync():
    # programs whose shipped placement is race-free must show synchronous
    # behavior; racy ones may diverge (two_vars_xy does, via its dead branch)
    for name in ["increment_sound.tal", "parallel_writes.tal"]:
        p = parse_file(os.path.join(CORPUS, name))
        avals = {ex.final_globals for ex in explore(p) if not ex.truncated}
        svals = run_synchronous(synchronous_view(p)).valuations
        assert avals == set(svals), name


# --------------------------------------------------------------------------
# random programs
# --------------------------------------------------------------------------

def test_random_programs_explore_cleanly():
    rng = random.Random(20240817)
    checked = 0
    for _ in range(60):
        seed = rng.randrange(10 ** 6)
        p = random_program(seed, max_methods=3, max_calls=3)
        try:
            exs = explore(p, ExplorationConfig(max_states=150_000))
        except StateBudgetExceededError:
            continue
        checked += 1
        for ex in exs:
            calls = sorted(a.event.callee for a in ex.actions
                           if isinstance(a.event, CallEv))
            rets = sorted(a.task for a in ex.actions
                          if isinstance(a.event, ReturnEv))
            assert sorted(calls + [0]) == rets, seed
    assert checked >= 50
