import itertools
import random

import pytest

from services.exceptions import InfeasibleMappingError, NoReliefError, PlacementError
from services.placement import (
    DeploymentMatrix,
    LoadSample,
    MappingInstance,
    Move,
    NodeCapacity,
    PhysicalNode,
    VirtualRequirement,
    Weights,
    apply_moves,
    check_deployment,
    deployment_from_csv,
    deployment_to_csv,
    generate_instance,
    instance_to_csv,
    load_instance_csv,
    modeled_contribution,
    node_load,
    plan_migration,
    preference,
    solve_heuristic,
    solve_naive
)


def _random_instance(seed):
    rng = random.Random(seed)
    m, n = rng.randint(1, 3), rng.randint(1, 4)
    nodes = tuple(
        PhysicalNode(
            NodeCapacity(
                cpu=rng.uniform(1, 4), mem=rng.uniform(16, 64),
                egress=rng.uniform(100, 400), ingress=rng.uniform(100, 400),
                slots=rng.randint(1, n)
            ),
            LoadSample(rng.random(), rng.random(), rng.random(), rng.random())
        )
        for _ in range(m)
    )
    virtuals = tuple(
        VirtualRequirement(
            cpu=rng.uniform(0.5, 2), mem=rng.uniform(8, 32),
            egress=rng.uniform(50, 200), ingress=rng.uniform(50, 200)
        )
        for _ in range(n)
    )
    return MappingInstance(nodes, virtuals)


def _brute_force(inst):
    """Ottimo per enumerazione completa, None se infattibile"""
    preferences = inst.preferences()
    best = None
    for assignment in itertools.product(range(inst.m), repeat=inst.n):
        d = DeploymentMatrix.from_assignment(assignment, inst.m)
        if check_deployment(d, inst):
            continue
        value = d.objective(preferences)
        if best is None or value > best[0]:
            best = (value, d)
    return best


@pytest.mark.parametrize("seed", range(40))
def test_naive_matches_brute_force(seed):
    inst = _random_instance(seed)
    best = _brute_force(inst)
    if best is None:
        with pytest.raises(InfeasibleMappingError):
            solve_naive(inst)
        return
    d = solve_naive(inst)
    assert check_deployment(d, inst) == []
    assert d.objective(inst.preferences()) == pytest.approx(best[0], rel=1e-9)


@pytest.mark.parametrize("seed", range(40))
def test_heuristic_feasible_iff_instance_feasible(seed):
    inst = _random_instance(seed)
    feasible = _brute_force(inst) is not None
    if not feasible:
        with pytest.raises(InfeasibleMappingError):
            solve_heuristic(inst)
        return
    d, considered = solve_heuristic(inst)
    assert check_deployment(d, inst) == []
    assert 1 <= considered <= inst.m


def test_ties_resolved_to_lexicographically_smallest_matrix():
    node = PhysicalNode(NodeCapacity(cpu=4, mem=64, egress=400, ingress=400))
    inst = MappingInstance((node, node), (VirtualRequirement(), VirtualRequirement()))
    d = solve_naive(inst)
    # indicizzazione per righe: gli zeri vanno prima nella riga del nodo 0
    assert d.flattened() == (0, 0, 1, 1)
    assert d.assignment() == [1, 1]


def test_naive_prefers_least_loaded_node():
    big = NodeCapacity(cpu=10, mem=100, egress=1000, ingress=1000)
    inst = MappingInstance(
        (PhysicalNode(big, LoadSample(0.9, 0.9, 0.9, 0.9)), PhysicalNode(big, LoadSample(0.1, 0.1, 0.1, 0.1))),
        tuple(VirtualRequirement() for _ in range(3))
    )
    assert solve_naive(inst).assignment() == [1, 1, 1]


def test_aggregate_infeasibility_is_reported():
    inst = MappingInstance(
        (PhysicalNode(NodeCapacity(cpu=1, mem=100, egress=1000, ingress=1000)),),
        (VirtualRequirement(cpu=0.75), VirtualRequirement(cpu=0.75))
    )
    with pytest.raises(InfeasibleMappingError) as info:
        solve_naive(inst)
    assert "aggregate cpu" in info.value.report
    assert info.value.nodes_considered == 1


def test_slots_limit_is_enforced():
    capacity = NodeCapacity(cpu=10, mem=100, egress=1000, ingress=1000, slots=1)
    inst = MappingInstance((PhysicalNode(capacity),), (VirtualRequirement(), VirtualRequirement()))
    with pytest.raises(InfeasibleMappingError):
        solve_naive(inst)


def test_naive_respects_capacity_in_exact_arithmetic():
    # 0.1 + 0.2 supera 0.3 in aritmetica esatta, anche se HiGHS lo accetta
    capacity = NodeCapacity(cpu=0.3, mem=100, egress=1000, ingress=1000)
    inst = MappingInstance(
        (PhysicalNode(capacity), PhysicalNode(capacity, LoadSample(0.9, 0.9, 0.9, 0.9))),
        (VirtualRequirement(cpu=0.1, mem=1, egress=1, ingress=1), VirtualRequirement(cpu=0.2, mem=1, egress=1, ingress=1))
    )
    d = solve_naive(inst)
    assert check_deployment(d, inst) == []
    assert sorted(d.assignment()) == [0, 1]


def test_heuristic_ignores_heavier_padding():
    base = generate_instance(4, 6, seed=2, headroom=3.0)
    light = tuple(
        PhysicalNode(node.capacity, LoadSample(0.1 * (i + 1), 0.1, 0.1, 0.0))
        for i, node in enumerate(base.nodes)
    )
    heavy = tuple(
        PhysicalNode(base.nodes[i % 4].capacity, LoadSample(0.95, 0.95, 0.95, 0.95))
        for i in range(28)
    )
    small = MappingInstance(light, base.virtuals)
    padded = MappingInstance(light + heavy, base.virtuals)
    d_small, considered_small = solve_heuristic(small)
    d_padded, considered_padded = solve_heuristic(padded)
    assert considered_padded == considered_small
    assert d_padded.assignment() == d_small.assignment()
    assert check_deployment(d_padded, padded) == []


def test_check_deployment_reports_violations():
    inst = MappingInstance(
        (PhysicalNode(NodeCapacity(cpu=1, mem=100, egress=1000, ingress=1000)),),
        (VirtualRequirement(), VirtualRequirement())
    )
    violations = check_deployment(DeploymentMatrix.from_assignment([0, 0], 1), inst)
    assert violations == ["node 0: cpu 2 exceeds capacity 1"]
    unassigned = DeploymentMatrix([[1, 0]])
    assert "virtual 1 assigned 0 times" in check_deployment(unassigned, inst)
    assert check_deployment(DeploymentMatrix([[1]]), inst)[0].startswith("shape")


def test_load_and_preference():
    weights = Weights()
    assert node_load(LoadSample(1.0, 0.0, 0.0, 0.0), weights) == pytest.approx(0.4)
    assert preference(0.0) == pytest.approx(1000.0)
    assert preference(0.5) == pytest.approx(2.0)


@pytest.mark.parametrize("values", [(0.3, 0.4, 0.2, 0.1), (0.4, 0.3, 0.2, 0.2), (0.5, 0.3, 0.2, 0.0)])
def test_invalid_weights(values):
    with pytest.raises(PlacementError):
        Weights(*values)


def test_invalid_inputs():
    with pytest.raises(PlacementError):
        LoadSample(avg_cpu_load=1.5)
    with pytest.raises(PlacementError):
        NodeCapacity(cpu=0, mem=1, egress=1, ingress=1)
    with pytest.raises(PlacementError):
        VirtualRequirement(cpu=0, mem=0, egress=0, ingress=0)
    with pytest.raises(PlacementError):
        MappingInstance((), (VirtualRequirement(),))


def test_normalized_load_sample():
    capacity = NodeCapacity(cpu=4, mem=1000, egress=500, ingress=500)
    sample = LoadSample.normalized(50.0, 250.0, 2000.0, capacity)
    assert sample == LoadSample(0.5, 0.25, 1.0, 0.0)


@pytest.fixture
def overloaded_instance():
    capacity = NodeCapacity(cpu=10, mem=100, egress=1000, ingress=1000)

    def make(target_load):
        target = LoadSample(*(target_load,) * 4)
        return MappingInstance(
            (PhysicalNode(capacity, LoadSample(1.0, 1.0, 1.0, 1.0)), PhysicalNode(capacity, target)),
            tuple(VirtualRequirement(cpu=1, mem=10, egress=100, ingress=100) for _ in range(5))
        )
    return make


def test_plan_migration_minimal_moves(overloaded_instance):
    inst = overloaded_instance(0.0)
    current = DeploymentMatrix.from_assignment([0] * 5, 2)
    assert modeled_contribution(inst, 0, 0) == pytest.approx(0.09)
    moves = plan_migration(current, inst, overloaded=0, threshold=0.8)
    # due spostamenti lasciano il nodo a 0.82, ne servono tre
    assert moves == [Move(0, 0, 1), Move(1, 0, 1), Move(2, 0, 1)]
    after = apply_moves(current, moves)
    assert after.assignment() == [1, 1, 1, 0, 0]
    assert check_deployment(after, inst) == []


def test_plan_migration_without_relief(overloaded_instance):
    inst = overloaded_instance(0.75)
    current = DeploymentMatrix.from_assignment([0] * 5, 2)
    with pytest.raises(NoReliefError):
        plan_migration(current, inst, overloaded=0, threshold=0.8)


@pytest.fixture
def crowded_instance():
    """40 router piccoli sul nodo 0 a carico 0.95; ne servono 17 per scendere a 0.8"""
    capacity = NodeCapacity(cpu=1, mem=1, egress=1, ingress=1)

    def make(target_load):
        return MappingInstance(
            (PhysicalNode(capacity, LoadSample(*(0.95,) * 4)), PhysicalNode(capacity, LoadSample(*(target_load,) * 4))),
            tuple(VirtualRequirement(cpu=0.01, mem=0.01, egress=0.01, ingress=0.01) for _ in range(40))
        )
    return make


def test_plan_migration_skips_sizes_that_cannot_relieve(crowded_instance):
    inst = crowded_instance(0.0)
    current = DeploymentMatrix.from_assignment([0] * 40, 2)
    assert modeled_contribution(inst, 0, 0) == pytest.approx(0.009)
    moves = plan_migration(current, inst, overloaded=0, threshold=0.8)
    assert moves == [Move(j, 0, 1) for j in range(17)]
    assert check_deployment(apply_moves(current, moves), inst) == []


def test_plan_migration_greedy_after_budget(crowded_instance):
    inst = crowded_instance(0.0)
    current = DeploymentMatrix.from_assignment([0] * 40, 2)
    moves = plan_migration(current, inst, overloaded=0, threshold=0.8, search_budget=1)
    assert moves == [Move(j, 0, 1) for j in range(17)]


def test_plan_migration_budget_ends_hopeless_search(crowded_instance):
    # il nodo 1 accetta un solo router prima di superare la soglia
    inst = crowded_instance(0.79)
    current = DeploymentMatrix.from_assignment([0] * 40, 2)
    with pytest.raises(NoReliefError):
        plan_migration(current, inst, overloaded=0, threshold=0.8)


def test_plan_migration_not_needed_below_threshold(overloaded_instance):
    inst = overloaded_instance(0.0)
    current = DeploymentMatrix.from_assignment([1] * 5, 2)
    assert plan_migration(current, inst, overloaded=1, threshold=0.8) == []


def test_instance_csv_round_trip(tmp_path):
    inst = generate_instance(3, 5, seed=4)
    path = tmp_path / "instance.csv"
    path.write_text(instance_to_csv(inst))
    assert load_instance_csv(path.read_text()) == inst


def test_instance_csv_errors():
    header = "kind,cpu,mem,egress,ingress,slots,avg_cpu_load,traffic,memory_usage,user_activities\n"
    with pytest.raises(PlacementError, match="row 2"):
        load_instance_csv(header + "switch,1,1,1,1,,,,,\n")
    with pytest.raises(PlacementError, match="row 3"):
        load_instance_csv(header + "node,1,1,1,1,4,0,0,0,0\nvirtual,x,1,1,1,,,,,\n")


def test_deployment_csv():
    d = DeploymentMatrix.from_assignment([1, 0, 1], 2)
    text = deployment_to_csv(d)
    assert text.splitlines() == ["virtual,node,value", "0,1,1", "1,0,1", "2,1,1"]
    assert deployment_from_csv(text, 2, 3) == d


def test_generated_instance_has_headroom():
    inst = generate_instance(5, 20, seed=1, headroom=2.0)
    total_cpu = sum(node.capacity.cpu for node in inst.nodes)
    assert total_cpu == pytest.approx(2.0 * sum(v.cpu for v in inst.virtuals))
    assert generate_instance(5, 20, seed=1) == inst
