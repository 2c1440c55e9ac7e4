import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajrag.errors import ConfigError, ParseError
from trajrag.gridmap import SemanticMap
from trajrag.nav import FORWARD, TURN_LEFT, TURN_RIGHT, AgentPose, HeuristicPlanner
from trajrag.sim import (
    DEFAULT_CATEGORIES,
    EpisodeResult,
    EpisodeSpec,
    ObjectInstance,
    Scene,
    SceneParams,
    build_store,
    compute_metrics,
    consolidate,
    episode_specs,
    evaluate,
    generate_scene,
    load_scene,
    observe,
    planner_factory,
    result_row,
    run_episode,
    save_scene,
    scene_from_text,
    scene_to_text,
    step,
)
from trajrag.store import TrajRagStore, insert_trajectory

CATS = ("chair", "bed", "plant")


def flood(free, start):
    """8-connected flood fill from ``start`` over ``free``; returns the reached set."""
    h, w = free.shape
    seen = {start}
    q = deque([start])
    while q:
        r, c = q.popleft()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nb = (r + dr, c + dc)
                if 0 <= nb[0] < h and 0 <= nb[1] < w and free[nb] and nb not in seen:
                    seen.add(nb)
                    q.append(nb)
    return seen


def box_scene(h=40, w=60, res=0.1, objects=(), walls=()):
    """Walled room; ``objects`` are (category, r0, r1, c0, c1) blocks, ``walls`` extra obstacle blocks."""
    obstacle = np.zeros((h, w), dtype=bool)
    obstacle[0, :] = obstacle[-1, :] = obstacle[:, 0] = obstacle[:, -1] = True
    for r0, r1, c0, c1 in walls:
        obstacle[r0:r1, c0:c1] = True
    semantic = np.zeros((len(CATS), h, w), dtype=bool)
    objs = []
    for cat, r0, r1, c0, c1 in objects:
        obstacle[r0:r1, c0:c1] = True
        semantic[cat, r0:r1, c0:c1] = True
        cells = np.argwhere(_block(h, w, r0, r1, c0, c1))
        objs.append(ObjectInstance(cat, cells))
    gt = SemanticMap(w, h, res, (0.0, 0.0), CATS, obstacle, np.ones((h, w), dtype=bool), semantic)
    return Scene(gt, objs, 0, 0, [(0.0, 0.0, w * res, h * res)])


def _block(h, w, r0, r1, c0, c1):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def result(success, path, shortest):
    return EpisodeResult(success, path, shortest, 10, success)


# -- generate_scene ---------------------------------------------------------------


def test_same_seed_same_scene():
    assert generate_scene(11) == generate_scene(11)
    assert scene_to_text(generate_scene(11)) == scene_to_text(generate_scene(11))
    assert generate_scene(11) != generate_scene(12)


def test_single_room_scene():
    s = generate_scene(3, SceneParams(rooms=1, corridors=0))
    assert len(s.rooms) == 1
    free = s.map.free
    start = tuple(int(v) for v in np.argwhere(free)[0])
    assert len(flood(free, start)) == free.sum()
    x0, y0, x1, y1 = s.rooms[0]
    cells = np.argwhere(free) * s.map.resolution
    assert cells[:, 1].min() >= x0 - 0.1 and cells[:, 1].max() <= x1
    assert cells[:, 0].min() >= y0 - 0.1 and cells[:, 0].max() <= y1


def test_infeasible_params_rejected():
    with pytest.raises(ConfigError):
        generate_scene(0, SceneParams(rooms=0))
    with pytest.raises(ConfigError):
        generate_scene(0, SceneParams(rooms=4, corridors=1))
    with pytest.raises(ConfigError):
        generate_scene(0, SceneParams(rooms=2, corridors=5))


@pytest.mark.parametrize("seed", range(100))
def test_scene_reachability(seed):
    s = generate_scene(seed)
    free = s.map.free
    start = tuple(int(v) for v in np.argwhere(free)[0])
    reach = flood(free, start)
    assert len(reach) == free.sum()
    assert s.objects
    for obj in s.objects:
        # some neighbour of the object is reachable free space
        touching = {
            (r + dr, c + dc) for r, c in obj.cells.tolist() for dr in (-1, 0, 1) for dc in (-1, 0, 1)
        }
        assert touching & reach


def test_scene_text_round_trip(tmp_path):
    s = generate_scene(5)
    assert scene_from_text(scene_to_text(s)) == s
    save_scene(s, tmp_path / "x.scene")
    assert load_scene(tmp_path / "x.scene") == s
    with pytest.raises(ParseError):
        scene_from_text("trajrag-scene v0\n")


# -- observe ----------------------------------------------------------------------


def test_wall_occludes_cells_behind():
    s = box_scene(60, 80, walls=[(1, 59, 40, 41)])  # wall 1 m east of the agent at x = 3.0 m
    m = observe(s, AgentPose((3.0, 3.0), 0.0), fov_deg=90, range_m=5.0)
    assert m.explored[28:33, 40].all() and m.obstacle[28:33, 40].all()
    assert not m.explored[:, 41:].any()
    assert not m.explored[:, :20].any()  # behind the agent with a 90 degree view


def test_full_view_is_disc():
    s = box_scene(100, 100)
    pose = AgentPose((5.0, 5.0), 0.0)
    m = observe(s, pose, 360.0, 2.0)
    rr, cc = np.mgrid[:100, :100]
    d = np.hypot(rr - 50, cc - 50) * 0.1
    assert m.explored[d <= 1.9].all()
    assert not m.explored[d > 2.1].any()


def test_observe_idempotent_monotone_and_gt_untouched():
    s = generate_scene(2)
    gt_before = s.map.copy()
    pose = AgentPose(s.map.cell_to_world(tuple(np.argwhere(s.map.free)[100])), 0.0)
    m1 = observe(s, pose)
    snap = m1.copy()
    observe(s, pose, agent_map=m1)
    assert m1 == snap
    other = AgentPose(s.map.cell_to_world(tuple(np.argwhere(s.map.free)[-100])), 1.0)
    observe(s, other, agent_map=m1)
    assert (snap.explored <= m1.explored).all() and (snap.semantic <= m1.semantic).all()
    assert s.map == gt_before
    m1.validate()


# -- step -------------------------------------------------------------------------


def test_step_examples():
    s = box_scene(40, 40)
    p = AgentPose((2.0, 2.0), 0.0)
    q = step(s, p, FORWARD)
    assert math.isclose(q.position[0], 2.25) and math.isclose(q.position[1], 2.0)
    wall = AgentPose((3.8, 2.0), 0.0)
    assert step(s, wall, FORWARD) == wall
    h = p
    for _ in range(12):
        h = step(s, h, TURN_LEFT)
    assert h.heading == p.heading
    assert math.isclose(step(s, p, TURN_RIGHT).heading, -math.pi / 6)
    with pytest.raises(ValueError):
        step(s, p, "jump")


# -- metrics ----------------------------------------------------------------------


def test_metric_examples():
    assert compute_metrics([result(False, 3, 2), result(False, 1, 2)]) == {"SR": 0.0, "SPL": 0.0}
    assert compute_metrics([result(True, 2.0, 2.0)]) == {"SR": 1.0, "SPL": 1.0}
    assert compute_metrics([result(True, 4.0, 2.0)])["SPL"] == 0.5
    with pytest.raises(ValueError):
        compute_metrics([])


@given(st.lists(st.tuples(st.booleans(), st.floats(0.01, 50), st.floats(0.01, 50)), min_size=1, max_size=20))
def test_spl_bounded_by_sr(rows):
    m = compute_metrics([result(*r) for r in rows])
    assert 0 <= m["SPL"] <= m["SR"] <= 1


# -- episodes ---------------------------------------------------------------------


def test_visible_goal_reached_near_shortest():
    s = box_scene(40, 60, objects=[(1, 18, 23, 45, 50)])
    start = AgentPose((1.5, 2.0), 0.0)
    r = run_episode(s, 1, HeuristicPlanner(), None, start=start)
    assert r.success and r.stop_issued
    assert r.path_length <= 1.25 * r.shortest_length + 0.3


def test_blocked_goal_fails_after_exhaustion():
    s = box_scene(40, 60, objects=[(1, 18, 23, 50, 55)], walls=[(1, 39, 30, 32)])
    r = run_episode(s, 1, HeuristicPlanner(), None, start=AgentPose((1.0, 2.0), 0.0))
    assert not r.success and not r.stop_issued
    assert r.steps < 500 and math.isinf(r.shortest_length)


def test_missing_goal_rejected():
    s = box_scene(objects=[(1, 10, 12, 10, 12)])
    with pytest.raises(ConfigError):
        run_episode(s, 0)


def test_episode_deterministic_and_replans_on_node_change():
    s = generate_scene(21)
    goal = s.present_categories()[0]
    t1, t2 = [], []
    a = run_episode(s, goal, HeuristicPlanner(), None, seed=4, trace=t1)
    b = run_episode(s, goal, HeuristicPlanner(), None, seed=4, trace=t2)
    assert a == b and t1 == t2
    assert [x.to_line() for x in t1] == [x.to_line() for x in t2]
    assert a.steps <= 500 and (not a.success or a.path_length + 1e-9 >= a.shortest_length)
    for prev, cur in zip(t1, t1[1:]):
        if cur.reason.startswith("new-node"):
            assert cur.node != prev.node


def test_self_consolidation():
    scenes = [generate_scene(s, SceneParams(layout=s % 3)) for s in range(4)]
    store, _ = build_store(scenes, 3)
    scene = generate_scene(1000, SceneParams(layout=0))
    goal = scene.present_categories()[1]
    r = run_episode(scene, goal, HeuristicPlanner(), store, seed=0)
    assert r.success
    before = set(store.chunks)
    insert_trajectory(store, r.trajectory)
    new = set(store.chunks) - before
    trace = []
    again = run_episode(scene, goal, HeuristicPlanner(), store, seed=0, trace=trace)
    retrieved = {c for rec in trace for c in rec.retrieved}
    assert new and new & retrieved
    assert again.steps <= 500


# -- evaluation -------------------------------------------------------------------


def test_evaluate_reproducible_and_thread_invariant():
    specs = episode_specs([30, 31], [0, 1], 1, SceneParams())
    planners = {n: planner_factory(n, 2) for n in ("random", "nearest")}
    a = evaluate(specs, planners, None)
    b = evaluate(specs, planners, None, workers=2)
    rows = lambda res: [result_row(n, sp, r, DEFAULT_CATEGORIES) for n in res for sp, r in res[n]]
    assert rows(a) == rows(b)
    assert [sp for sp, _ in a["random"]] == specs


def test_planner_factory_and_consolidate():
    with pytest.raises(ConfigError):
        planner_factory("oracle")
    spec = EpisodeSpec(1, 0, 2, 0)
    p1, p2 = planner_factory("random", 5)(spec), planner_factory("random", 5)(spec)
    assert p1.rng.integers(1000) == p2.rng.integers(1000)
    store = TrajRagStore(CATS)
    assert consolidate(store, [(spec, result(False, 1, 1))]) == []
