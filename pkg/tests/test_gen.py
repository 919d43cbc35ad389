import pytest
from hypothesis import given, settings, strategies as st

from raillab.env.gen import (
    CurriculumStage, CurriculumTracker, GeneratorParams, curriculum_advance, default_curriculum,
    default_hubs, generate_env, validate_curriculum,
)
from raillab.env.grid import validate_grid
from raillab.errors import DomainError, GenerationError

from oracles import bfs_distance


def test_deterministic_in_seed():
    p = GeneratorParams(25, 25, 4, seed=7)
    a, b = generate_env(p), generate_env(p)
    assert a.state_hash() == b.state_hash()
    assert generate_env(p.with_seed(8)).state_hash() != a.state_hash()


@pytest.mark.parametrize("kwargs", [
    dict(n_hubs=1), dict(n_agents=0), dict(corridor_density=0.0), dict(corridor_density=1.5),
    dict(rails_per_link=3), dict(width=4),
])
def test_param_validation(kwargs):
    base = dict(width=25, height=25, n_agents=4)
    base.update(kwargs)
    with pytest.raises(DomainError):
        GeneratorParams(**base)


def test_infeasible_grid_errors():
    with pytest.raises(GenerationError):
        generate_env(GeneratorParams(6, 6, 2, n_hubs=8))


def test_default_hubs():
    assert default_hubs(10, 10) == 2
    assert default_hubs(25, 25) == 6
    assert default_hubs(100, 100) == 8


def test_params_dict_round_trip():
    p = GeneratorParams(15, 15, 3, seed=4, speeds=(1, 0.5))
    assert GeneratorParams.from_dict(p.to_dict()) == GeneratorParams(15, 15, 3, seed=4, speeds=(1, 0.5))


@pytest.mark.parametrize("rails", [1, 2])
def test_targets_reachable_per_oracle(rails):
    for seed in range(100):
        env = generate_env(GeneratorParams(15, 15, 3, seed=seed, rails_per_link=rails))
        assert validate_grid(env.grid) == []
        starts = set()
        for a in env.agents:
            assert a.start not in starts
            starts.add(a.start)
            d = bfs_distance(env.grid.masks, (a.start, a.start_heading), a.target)
            assert d is not None and d >= 3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(10, 2), (25, 4), (35, 8)]))
def test_binary_switches(seed, size):
    s, n = size
    env = generate_env(GeneratorParams(s, s, n, seed=seed))
    g = env.grid
    for cell in g.rail_cells():
        for h in range(4):
            assert len(g.moves[g.idx(cell)][h]) <= 2


def test_default_curriculum_shape():
    stages = default_curriculum()
    assert [(s.params.width, s.params.n_agents) for s in stages] == [
        (10, 2), (15, 3), (25, 4), (35, 8), (50, 14)
    ]
    assert all(s.promote_threshold == 0.8 and s.window == 200 for s in stages)
    validate_curriculum(stages)


def test_curriculum_must_not_shrink():
    big = CurriculumStage(GeneratorParams(25, 25, 4))
    small = CurriculumStage(GeneratorParams(10, 10, 2))
    with pytest.raises(DomainError):
        validate_curriculum([big, small])
    with pytest.raises(DomainError):
        validate_curriculum([])


def test_stage_dict_round_trip():
    s = CurriculumStage(GeneratorParams(15, 15, 3), 0.7, 50)
    assert CurriculumStage.from_dict(s.to_dict()) == s


def _stages(window=3):
    return [CurriculumStage(GeneratorParams(10 + 5 * k, 10 + 5 * k, 2 + k), 0.8, window) for k in range(3)]


def test_advance_examples():
    stages = _stages()
    assert curriculum_advance(0, [0.83] * 3, stages) == 1
    assert curriculum_advance(0, [0.5] * 3, stages) == 0
    assert curriculum_advance(2, [1.0] * 3, stages) == 2
    # not enough history yet
    assert curriculum_advance(0, [1.0] * 2, stages) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=60))
def test_progression_monotone(history):
    tracker = CurriculumTracker(_stages())
    seen = [0]
    for x in history:
        tracker.record(x)
        seen.append(tracker.index)
    assert all(b - a in (0, 1) for a, b in zip(seen, seen[1:]))
