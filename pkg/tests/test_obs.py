import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raillab.env.core import ActionKind, Status, reset, step
from raillab.env.gen import GeneratorParams, generate_env
from raillab.env.grid import GridBuilder
from raillab.errors import DomainError
from raillab.obs import (
    N_NODES, NODE_DIM, OBS_DIM, SectionNode, SectionTree, build_tree, is_decision_point, observe,
    trace_section,
)

E, W = 1, 3


def line(n=6):
    b = GridBuilder(n, 1)
    b.add_path([(0, c) for c in range(n)])
    return b.build()


def fork():
    """West end splits into an upper and lower branch at (1, 2)."""
    b = GridBuilder(7, 3)
    b.add_path([(1, 0), (1, 1), (1, 2), (1, 3), (1, 4), (1, 5), (1, 6)])
    b.add_path([(1, 1), (1, 2), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6)], node_ends=False)
    b.add_path([(0, 5), (0, 6)])
    return b.build()


def test_dimensions():
    assert N_NODES == 15
    assert OBS_DIM == 15 * NODE_DIM + 7


def test_trace_to_dead_end():
    env = reset(line(), [((0, 1), E, (0, 0), 1)])
    node, end = trace_section(env, ((0, 1), E))
    assert node.length_cells == 5
    assert end is None


def test_trace_counts_opposing_trains():
    env = reset(line(), [((0, 1), E, (0, 5), 1), ((0, 4), W, (0, 0), 1)])
    step(env, {0: ActionKind.FORWARD, 1: ActionKind.FORWARD})
    node, _ = trace_section(env, ((0, 1), E), target=(0, 5), observer=0)
    assert node.agent_count == 1 and node.opposing_count == 1
    assert node.contains_target == 1


def test_trace_stops_at_switch():
    env = reset(fork(), [((1, 0), E, (1, 6), 1)])
    node, end = trace_section(env, ((1, 0), E), target=(1, 6))
    assert node.length_cells == 3
    assert end == ((1, 2), E)


def test_tree_has_two_children_at_switch():
    env = reset(fork(), [((1, 0), E, (1, 6), 1)])
    tree = build_tree(env, 0)
    tree.validate()
    assert tree.present()[:3] == [1, 1, 1]
    # left (north) branch first; mirroring lists the right branch first
    left, right = tree.nodes[1], tree.nodes[2]
    assert left.contains_target == 0 and right.contains_target == 1
    mirrored = build_tree(env, 0, mirror=True)
    assert mirrored.nodes[1] == right and mirrored.nodes[2] == left


def test_tree_validate_catches_orphans():
    tree = SectionTree()
    tree.nodes[3] = SectionNode(present=1)
    with pytest.raises(DomainError):
        tree.validate()
    tree = SectionTree()
    tree.nodes[0] = SectionNode(present=1)
    tree.nodes[2] = SectionNode(present=0, length_cells=3)
    with pytest.raises(DomainError):
        tree.validate()


def test_done_agent_has_no_tree():
    env = reset(line(), [((0, 0), E, (0, 1), 1)])
    step(env, {0: ActionKind.FORWARD})
    step(env, {0: ActionKind.FORWARD})
    assert env.agents[0].status == Status.DONE
    with pytest.raises(DomainError):
        build_tree(env, 0)


def test_decision_points():
    env = reset(fork(), [((1, 0), E, (1, 6), 1)])
    assert is_decision_point(env, 0)  # ready
    step(env, {0: ActionKind.FORWARD})
    assert not is_decision_point(env, 0)
    step(env, {0: ActionKind.FORWARD})
    step(env, {0: ActionKind.FORWARD})
    assert env.agents[0].position == (1, 2)
    assert is_decision_point(env, 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_observations_in_unit_interval(seed):
    env = generate_env(GeneratorParams(25, 25, 4, seed=seed, malfunction_rate=0.05))
    rng = np.random.default_rng(seed)
    while not env.done and env.step_count < 80:
        for a in env.agents:
            if a.status != Status.DONE:
                for mirror in (False, True):
                    o = observe(env, a.id, mirror)
                    assert o.shape == (OBS_DIM,)
                    assert np.all(o >= 0.0) and np.all(o <= 1.0)
        step(env, {a.id: int(rng.integers(5)) for a in env.agents if a.status != Status.DONE})


def test_switchless_loop_counts_each_train_once():
    b = GridBuilder(3, 3)
    b.add_path([(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0), (0, 0), (0, 1)], node_ends=False)
    env = reset(b.build(), [((0, 1), E, (2, 1), 1), ((1, 0), 0, (0, 2), 1)])
    step(env, {0: ActionKind.FORWARD, 1: ActionKind.FORWARD})
    node, end = trace_section(env, ((0, 1), E), observer=0)
    assert end is None
    assert node.length_cells == 8 and node.agent_count == 1
    o = observe(env, 0)
    assert np.all(o >= 0.0) and np.all(o <= 1.0)
