"""Mapping dei router virtuali sui nodi fisici.

Il problema e' un programma 0-1: massimizzare sum_ij p_i * D_ij con D binaria
m x n, ogni colonna con un solo 1 e, per ogni nodo, somma dei requisiti
ospitati entro CPU, memoria, banda in uscita e in ingresso (piu' il limite
operativo di slot). p_i = 1 / max(L_i, epsilon) e L e' il carico pesato.

Le verifiche dei vincoli usano aritmetica razionale esatta; il solver e'
`scipy.optimize.milp` (HiGHS, branch and bound sul rilassamento LP).
"""
import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, milp

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.exceptions import InfeasibleMappingError, NoReliefError, PlacementError

logger = logging.getLogger(__name__)

PLACEMENT_CONFIG = APP_CONFIG["placement"]
RESOURCES = ("cpu", "mem", "egress", "ingress")


@dataclass(frozen=True)
class NodeCapacity:
    cpu: float
    mem: float
    egress: float
    ingress: float
    slots: int = APP_CONFIG["agent"]["capacity"]["slots"]

    def __post_init__(self):
        for name in (*RESOURCES, "slots"):
            if not getattr(self, name) > 0:
                raise PlacementError(f"node capacity {name} must be positive: {getattr(self, name)}")


@dataclass(frozen=True)
class VirtualRequirement:
    cpu: float = PLACEMENT_CONFIG["default_requirement"]["cpu"]
    mem: float = PLACEMENT_CONFIG["default_requirement"]["mem"]
    egress: float = PLACEMENT_CONFIG["default_requirement"]["egress"]
    ingress: float = PLACEMENT_CONFIG["default_requirement"]["ingress"]

    def __post_init__(self):
        values = [getattr(self, name) for name in RESOURCES]
        if any(v < 0 for v in values) or not any(v > 0 for v in values):
            raise PlacementError(f"virtual requirement must be non-negative and not all zero: {values}")


@dataclass(frozen=True)
class LoadSample:
    avg_cpu_load: float = 0.0
    traffic: float = 0.0
    memory_usage: float = 0.0
    user_activities: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not 0.0 <= value <= 1.0:
                raise PlacementError(f"load component {f.name} outside [0, 1]: {value}")

    @classmethod
    def normalized(
        cls,
        cpu_percent: float,
        traffic_kbps: float,
        memory_mb: float,
        capacity: NodeCapacity,
        user_activities: float = 0.0
    ) -> "LoadSample":
        """Normalizza misure grezze rispetto alle capacita' configurate del nodo"""
        clamp = lambda x: min(1.0, max(0.0, x))
        return cls(
            avg_cpu_load=clamp(cpu_percent / 100.0),
            traffic=clamp(traffic_kbps / (capacity.egress + capacity.ingress)),
            memory_usage=clamp(memory_mb / capacity.mem),
            user_activities=clamp(user_activities)
        )

    def scaled(self, factor: float) -> "LoadSample":
        return LoadSample(*(getattr(self, f.name) * factor for f in fields(self)))


@dataclass(frozen=True)
class Weights:
    w1: float = PLACEMENT_CONFIG["weights"][0]
    w2: float = PLACEMENT_CONFIG["weights"][1]
    w3: float = PLACEMENT_CONFIG["weights"][2]
    w4: float = PLACEMENT_CONFIG["weights"][3]

    def __post_init__(self):
        if not self.w1 > self.w2 > self.w3 > self.w4 > 0:
            raise PlacementError(f"weights must satisfy w1 > w2 > w3 > w4 > 0: {self.as_tuple()}")
        if not math.isclose(sum(self.as_tuple()), 1.0, abs_tol=1e-9):
            raise PlacementError(f"weights must sum to 1: {self.as_tuple()}")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)


@dataclass(frozen=True)
class PhysicalNode:
    capacity: NodeCapacity
    load: LoadSample = field(default_factory=LoadSample)


@dataclass(frozen=True)
class MappingInstance:
    nodes: Tuple[PhysicalNode, ...]
    virtuals: Tuple[VirtualRequirement, ...]
    weights: Weights = field(default_factory=Weights)

    def __post_init__(self):
        if not self.nodes or not self.virtuals:
            raise PlacementError("mapping instance requires m >= 1 nodes and n >= 1 virtuals")

    @property
    def m(self) -> int:
        return len(self.nodes)

    @property
    def n(self) -> int:
        return len(self.virtuals)

    def loads(self) -> np.ndarray:
        return np.array([node_load(node.load, self.weights) for node in self.nodes])

    def preferences(self) -> np.ndarray:
        return np.array([preference(load) for load in self.loads()])

    def restricted(self, indices: Sequence[int]) -> "MappingInstance":
        return MappingInstance(tuple(self.nodes[i] for i in indices), self.virtuals, self.weights)


class DeploymentMatrix:
    """Matrice binaria m x n: colonna j = router virtuale, riga i = nodo fisico"""

    def __init__(self, assign: np.ndarray):
        self.assign = np.asarray(assign, dtype=np.int8)
        if self.assign.ndim != 2:
            raise PlacementError(f"deployment matrix must be 2-D, got shape {self.assign.shape}")

    @classmethod
    def from_assignment(cls, nodes: Sequence[int], m: int) -> "DeploymentMatrix":
        assign = np.zeros((m, len(nodes)), dtype=np.int8)
        assign[list(nodes), np.arange(len(nodes))] = 1
        return cls(assign)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.assign.shape

    def node_of(self, j: int) -> int:
        return int(np.argmax(self.assign[:, j]))

    def assignment(self) -> List[int]:
        return [self.node_of(j) for j in range(self.shape[1])]

    def hosted(self, i: int) -> List[int]:
        return [int(j) for j in np.flatnonzero(self.assign[i])]

    def objective(self, preferences: np.ndarray) -> float:
        return float(preferences @ self.assign.sum(axis=1))

    def flattened(self) -> Tuple[int, ...]:
        return tuple(int(x) for x in self.assign.ravel())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DeploymentMatrix) and np.array_equal(self.assign, other.assign)

    def __repr__(self) -> str:
        return f"DeploymentMatrix({self.assignment()}, m={self.shape[0]})"


@dataclass(frozen=True)
class Move:
    virtual: int
    source: int
    target: int


def node_load(s: LoadSample, w: Weights) -> float:
    return w.w1 * s.avg_cpu_load + w.w2 * s.traffic + w.w3 * s.memory_usage + w.w4 * s.user_activities


def preference(load: float, epsilon: Optional[float] = None) -> float:
    epsilon = PLACEMENT_CONFIG["epsilon"] if epsilon is None else epsilon
    return 1.0 / max(load, epsilon)


def _demand(virtual: VirtualRequirement) -> Tuple[Fraction, ...]:
    return tuple(Fraction(getattr(virtual, r)) for r in RESOURCES)


def check_deployment(d: DeploymentMatrix, inst: MappingInstance) -> List[str]:
    """Violazioni dei vincoli di assegnazione e capacita', in aritmetica esatta"""
    violations: List[str] = []
    if d.shape != (inst.m, inst.n):
        return [f"shape {d.shape} does not match instance ({inst.m}, {inst.n})"]
    if not np.isin(d.assign, (0, 1)).all():
        violations.append("matrix is not binary")
    columns = d.assign.sum(axis=0)
    for j in np.flatnonzero(columns != 1):
        violations.append(f"virtual {j} assigned {columns[j]} times")
    if int(d.assign.sum()) != inst.n:
        violations.append(f"total assignments {int(d.assign.sum())} != {inst.n}")

    for i, node in enumerate(inst.nodes):
        hosted = d.hosted(i)
        if len(hosted) > node.capacity.slots:
            violations.append(f"node {i}: {len(hosted)} routers exceed {node.capacity.slots} slots")
    for i, resource, used, capacity in _overflows(d, inst):
        violations.append(f"node {i}: {resource} {float(used):g} exceeds capacity {float(capacity):g}")
    return violations


def _overflows(d: DeploymentMatrix, inst: MappingInstance) -> List[Tuple[int, str, Fraction, Fraction]]:
    """(nodo, risorsa, uso, capacita') per ogni capacita' superata in aritmetica esatta"""
    result = []
    for i, node in enumerate(inst.nodes):
        hosted = d.hosted(i)
        for k, resource in enumerate(RESOURCES):
            used = sum((_demand(inst.virtuals[j])[k] for j in hosted), Fraction(0))
            capacity = Fraction(getattr(node.capacity, resource))
            if used > capacity:
                result.append((i, resource, used, capacity))
    return result


def _aggregate_report(inst: MappingInstance) -> Optional[str]:
    for resource in RESOURCES:
        required = sum(Fraction(getattr(v, resource)) for v in inst.virtuals)
        available = sum(Fraction(getattr(node.capacity, resource)) for node in inst.nodes)
        if required > available:
            return (
                f"{ERROR_MESSAGES['infeasible']}: aggregate {resource} requirement "
                f"{float(required):g} exceeds total capacity {float(available):g}"
            )
    slots = sum(node.capacity.slots for node in inst.nodes)
    if inst.n > slots:
        return f"{ERROR_MESSAGES['infeasible']}: {inst.n} routers exceed {slots} slots"
    return None


def _capacities(inst: MappingInstance) -> Dict[str, np.ndarray]:
    return {
        resource: np.array([getattr(node.capacity, resource) for node in inst.nodes], dtype=float)
        for resource in RESOURCES
    }


def _constraints(inst: MappingInstance, capacities: Dict[str, np.ndarray]) -> List[LinearConstraint]:
    """Vincoli con indicizzazione per righe: variabile k = i * n + j"""
    m, n = inst.m, inst.n
    assign = sparse.kron(np.ones((1, m)), sparse.identity(n), format="csr")
    constraints = [LinearConstraint(assign, lb=np.ones(n), ub=np.ones(n))]
    for resource in RESOURCES:
        demand = np.array([getattr(v, resource) for v in inst.virtuals], dtype=float).reshape(1, n)
        constraints.append(
            LinearConstraint(
                sparse.kron(sparse.identity(m), demand, format="csr"), lb=-np.inf, ub=capacities[resource]
            )
        )
    slots = np.array([node.capacity.slots for node in inst.nodes], dtype=float)
    constraints.append(
        LinearConstraint(sparse.kron(sparse.identity(m), np.ones((1, n)), format="csr"), lb=-np.inf, ub=slots)
    )
    return constraints


def _milp(
    objective: np.ndarray,
    constraints: List[LinearConstraint],
    lower: np.ndarray,
    upper: np.ndarray
) -> Optional[np.ndarray]:
    options = {"mip_rel_gap": 0.0}
    if PLACEMENT_CONFIG["milp_time_limit_s"] is not None:
        options["time_limit"] = PLACEMENT_CONFIG["milp_time_limit_s"]
    result = milp(
        objective,
        constraints=constraints,
        integrality=np.ones_like(objective),
        bounds=Bounds(lower, upper),
        options=options
    )
    if result.status != 0 or result.x is None:
        return None
    return np.rint(result.x).astype(np.int8)


def _lex_smallest(
    x: np.ndarray,
    weights: np.ndarray,
    optimum: float,
    constraints: List[LinearConstraint]
) -> np.ndarray:
    """Tra le soluzioni ottime sceglie la D appiattita lessicograficamente minima.

    Fissa le variabili in ordine: se l'incumbent ha gia' 0 la scelta e'
    gratuita, altrimenti si prova a fissare 0 mantenendo l'ottimo.
    """
    tolerance = 1e-9 * max(1.0, abs(optimum))
    keep_optimum = LinearConstraint(weights.reshape(1, -1), lb=optimum - tolerance, ub=np.inf)
    lower = np.zeros(len(x))
    upper = np.ones(len(x))
    incumbent = x.copy()
    for k in range(len(x)):
        if incumbent[k] == 1:
            upper[k] = 0
            candidate = _milp(-weights, constraints + [keep_optimum], lower, upper)
            if candidate is None:
                upper[k] = 1
                lower[k] = 1
            else:
                incumbent = candidate
        else:
            upper[k] = 0
    return incumbent


def solve_naive(inst: MappingInstance) -> DeploymentMatrix:
    """Soluzione esatta del programma 0-1; solleva InfeasibleMappingError"""
    report = _aggregate_report(inst)
    if report:
        raise InfeasibleMappingError(report, nodes_considered=inst.m)

    m, n = inst.m, inst.n
    weights = np.repeat(inst.preferences(), n)
    capacities = _capacities(inst)
    # HiGHS accetta violazioni entro la sua tolleranza: i vincoli superati in
    # aritmetica esatta vengono stretti sotto l'uso trovato e si risolve di nuovo
    for _ in range(PLACEMENT_CONFIG["exact_repair_rounds"]):
        constraints = _constraints(inst, capacities)
        x = _milp(-weights, constraints, np.zeros(m * n), np.ones(m * n))
        if x is None:
            raise InfeasibleMappingError(
                f"{ERROR_MESSAGES['infeasible']} (m={m}, n={n})", nodes_considered=m
            )
        if m * n <= PLACEMENT_CONFIG["lex_tiebreak_max_vars"]:
            x = _lex_smallest(x, weights, float(weights @ x), constraints)
        else:
            logger.debug("Tie-break lessicografico saltato: %d variabili", m * n)

        deployment = DeploymentMatrix(x.reshape(m, n))
        overflows = _overflows(deployment, inst)
        if not overflows:
            violations = check_deployment(deployment, inst)
            if violations:
                raise PlacementError(f"solver returned an invalid deployment: {'; '.join(violations)}")
            return deployment
        for i, resource, used, _capacity in overflows:
            tightened = float(used) - PLACEMENT_CONFIG["exact_repair_margin"] * max(1.0, float(used))
            capacities[resource][i] = min(capacities[resource][i], tightened)
            logger.debug("Nodo %d: %s stretto a %r dopo il controllo esatto", i, resource, tightened)
    raise PlacementError(
        f"solver returned an invalid deployment after {PLACEMENT_CONFIG['exact_repair_rounds']} rounds"
    )


def _covers(inst: MappingInstance, indices: Iterable[int], required: Tuple[float, ...]) -> bool:
    indices = list(indices)
    available = [sum(getattr(inst.nodes[i].capacity, r) for i in indices) for r in RESOURCES]
    available.append(sum(inst.nodes[i].capacity.slots for i in indices))
    return all(a >= r for a, r in zip(available, required))


def solve_heuristic(inst: MappingInstance) -> Tuple[DeploymentMatrix, int]:
    """Insieme candidato crescente di nodi, dal meno carico; solver esatto su S.

    Quando S copre il requisito aggregato R (dimensione per dimensione) si
    risolve il problema ristretto a S; se e' infattibile R raddoppia. A S
    completo si tenta comunque un'ultima risoluzione prima di arrendersi.
    """
    required = tuple(
        [sum(getattr(v, r) for v in inst.virtuals) for r in RESOURCES] + [float(inst.n)]
    )
    loads = inst.loads()
    order = sorted(range(inst.m), key=lambda i: (loads[i], i))
    candidate: List[int] = []
    attempted_full = False

    for i in order:
        candidate.append(i)
        if not _covers(inst, candidate, required):
            continue
        chosen = sorted(candidate)
        attempted_full = len(chosen) == inst.m
        try:
            restricted = solve_naive(inst.restricted(chosen))
        except InfeasibleMappingError:
            required = tuple(2 * r for r in required)
            logger.debug("Insieme di %d nodi insufficiente, requisito raddoppiato", len(chosen))
            continue
        assign = np.zeros((inst.m, inst.n), dtype=np.int8)
        assign[chosen, :] = restricted.assign
        return DeploymentMatrix(assign), len(candidate)

    if not attempted_full:
        try:
            return solve_naive(inst), inst.m
        except InfeasibleMappingError:
            pass
    raise InfeasibleMappingError(
        _aggregate_report(inst) or f"{ERROR_MESSAGES['infeasible']} (m={inst.m}, n={inst.n})",
        nodes_considered=inst.m
    )


def modeled_contribution(inst: MappingInstance, j: int, i: int) -> float:
    """Quota di carico modellata del virtuale j sul nodo i"""
    w = inst.weights
    v = inst.virtuals[j]
    c = inst.nodes[i].capacity
    return (
        w.w1 * v.cpu / c.cpu
        + w.w2 * (v.egress + v.ingress) / (c.egress + c.ingress)
        + w.w3 * v.mem / c.mem
    )


def _fits(inst: MappingInstance, used: Dict[int, List[Fraction]], slots: Dict[int, int], j: int, i: int) -> bool:
    capacity = inst.nodes[i].capacity
    if slots[i] + 1 > capacity.slots:
        return False
    demand = _demand(inst.virtuals[j])
    return all(used[i][k] + demand[k] <= Fraction(getattr(capacity, r)) for k, r in enumerate(RESOURCES))


def plan_migration(
    current: DeploymentMatrix,
    inst: MappingInstance,
    overloaded: int,
    threshold: Optional[float] = None,
    search_budget: Optional[int] = None
) -> List[Move]:
    """Insieme minimo di spostamenti dal nodo sovraccarico.

    Dopo gli spostamenti il carico modellato del nodo non supera la soglia,
    ogni destinazione resta entro capacita' e sotto soglia. Le cardinalita'
    che nemmeno con i contributi maggiori danno sollievo sono saltate; oltre
    search_budget passi di ricerca si ripiega su un piano greedy reso
    irridondante (nessuno spostamento superfluo).
    """
    threshold = PLACEMENT_CONFIG["migration_threshold"] if threshold is None else threshold
    budget = PLACEMENT_CONFIG["migration_search_budget"] if search_budget is None else search_budget
    steps = 0
    loads = inst.loads()
    if loads[overloaded] <= threshold:
        return []

    assignment = current.assignment()
    used = {i: [Fraction(0)] * len(RESOURCES) for i in range(inst.m)}
    slots = {i: 0 for i in range(inst.m)}
    for j, i in enumerate(assignment):
        slots[i] += 1
        used[i] = [u + d for u, d in zip(used[i], _demand(inst.virtuals[j]))]
    target_load = {i: float(loads[i]) for i in range(inst.m)}
    targets = sorted(
        (i for i in range(inst.m) if i != overloaded),
        key=lambda i: (-preference(loads[i]), i)
    )
    hosted = sorted(
        current.hosted(overloaded),
        key=lambda j: (-modeled_contribution(inst, j, overloaded), j)
    )

    contribution = {j: modeled_contribution(inst, j, overloaded) for j in hosted}

    def place(moving: Sequence[int]) -> Optional[List[Move]]:
        nonlocal steps
        if not moving:
            return []
        j, rest = moving[0], moving[1:]
        for i in targets:
            steps += 1
            if steps > budget:
                return None
            added = modeled_contribution(inst, j, i)
            if target_load[i] + added > threshold or not _fits(inst, used, slots, j, i):
                continue
            demand = _demand(inst.virtuals[j])
            used[i] = [u + d for u, d in zip(used[i], demand)]
            slots[i] += 1
            target_load[i] += added
            tail = place(rest)
            used[i] = [u - d for u, d in zip(used[i], demand)]
            slots[i] -= 1
            target_load[i] -= added
            if tail is not None:
                return [Move(j, overloaded, i)] + tail
        return None

    best_relief = list(itertools.accumulate(contribution[j] for j in hosted))
    for size in range(1, len(hosted) + 1):
        if loads[overloaded] - best_relief[size - 1] > threshold:
            continue
        for combo in itertools.combinations(hosted, size):
            steps += 1
            if steps > budget:
                break
            relieved = loads[overloaded] - sum(contribution[j] for j in combo)
            if relieved > threshold:
                continue
            moves = place(combo)
            if moves is not None:
                logger.info("Piano di migrazione dal nodo %d: %d spostamenti", overloaded, len(moves))
                return moves
        if steps > budget:
            logger.warning("Ricerca esatta interrotta dopo %d passi, piano greedy per il nodo %d", budget, overloaded)
            break

    if steps > budget:
        plan: List[Move] = []
        remaining = float(loads[overloaded])
        for j in hosted:
            if remaining <= threshold:
                break
            for i in targets:
                added = modeled_contribution(inst, j, i)
                if target_load[i] + added > threshold or not _fits(inst, used, slots, j, i):
                    continue
                used[i] = [u + d for u, d in zip(used[i], _demand(inst.virtuals[j]))]
                slots[i] += 1
                target_load[i] += added
                remaining -= contribution[j]
                plan.append(Move(j, overloaded, i))
                break
        if remaining <= threshold:
            for move in sorted(plan, key=lambda mv: (contribution[mv.virtual], -mv.virtual)):
                if remaining + contribution[move.virtual] <= threshold:
                    remaining += contribution[move.virtual]
                    plan.remove(move)
            logger.info("Piano greedy dal nodo %d: %d spostamenti", overloaded, len(plan))
            return plan
    raise NoReliefError(f"{ERROR_MESSAGES['no_relief']}: node {overloaded} (load {loads[overloaded]:.3f})")


def apply_moves(current: DeploymentMatrix, moves: Iterable[Move]) -> DeploymentMatrix:
    assignment = current.assignment()
    for move in moves:
        assignment[move.virtual] = move.target
    return DeploymentMatrix.from_assignment(assignment, current.shape[0])


# formato CSV delle istanze

INSTANCE_HEADER = (
    "kind", "cpu", "mem", "egress", "ingress", "slots",
    "avg_cpu_load", "traffic", "memory_usage", "user_activities"
)


def instance_to_csv(inst: MappingInstance) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(INSTANCE_HEADER)
    for node in inst.nodes:
        c, s = node.capacity, node.load
        writer.writerow((
            "node", c.cpu, c.mem, c.egress, c.ingress, c.slots,
            s.avg_cpu_load, s.traffic, s.memory_usage, s.user_activities
        ))
    for v in inst.virtuals:
        writer.writerow(("virtual", v.cpu, v.mem, v.egress, v.ingress, "", "", "", "", ""))
    return buffer.getvalue()


def load_instance_csv(text: str, weights: Optional[Weights] = None) -> MappingInstance:
    nodes: List[PhysicalNode] = []
    virtuals: List[VirtualRequirement] = []
    reader = csv.DictReader(io.StringIO(text))
    for row_no, row in enumerate(reader, start=2):
        try:
            kind = (row.get("kind") or "").strip()
            resources = {r: float(row[r]) for r in RESOURCES}
            if kind == "node":
                slots = int(row["slots"]) if row.get("slots") else APP_CONFIG["agent"]["capacity"]["slots"]
                load = LoadSample(**{
                    name: float(row[name]) if row.get(name) else 0.0
                    for name in ("avg_cpu_load", "traffic", "memory_usage", "user_activities")
                })
                nodes.append(PhysicalNode(NodeCapacity(slots=slots, **resources), load))
            elif kind == "virtual":
                virtuals.append(VirtualRequirement(**resources))
            else:
                raise PlacementError(f"unknown row kind '{kind}'")
        except (KeyError, TypeError, ValueError) as e:
            raise PlacementError(f"row {row_no}: {e}") from e
        except PlacementError as e:
            raise PlacementError(f"row {row_no}: {e}") from e
    return MappingInstance(tuple(nodes), tuple(virtuals), weights or Weights())


def deployment_to_csv(d: DeploymentMatrix) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("virtual", "node", "value"))
    for j, i in enumerate(d.assignment()):
        writer.writerow((j, i, 1))
    return buffer.getvalue()


def deployment_from_csv(text: str, m: int, n: int) -> DeploymentMatrix:
    assign = np.zeros((m, n), dtype=np.int8)
    for row in csv.DictReader(io.StringIO(text)):
        assign[int(row["node"]), int(row["virtual"])] = int(row["value"])
    return DeploymentMatrix(assign)


def generate_instance(
    m: int,
    n: int,
    seed: int,
    headroom: float = 2.0,
    weights: Optional[Weights] = None
) -> MappingInstance:
    """Istanza sintetica: requisiti casuali, capacita' totale pari a headroom volte il requisito"""
    rng = np.random.default_rng(seed)
    demand = rng.uniform(0.5, 2.0, size=(n, len(RESOURCES))) * np.array([1.0, 16.0, 100.0, 100.0])
    share = rng.uniform(0.5, 1.5, size=(m, len(RESOURCES)))
    share = share / share.sum(axis=0) * demand.sum(axis=0) * headroom
    loads = rng.uniform(0.0, 1.0, size=(m, 3))
    slots = max(1, math.ceil(headroom * n / m) + 1)
    nodes = tuple(
        PhysicalNode(
            NodeCapacity(*(float(x) for x in share[i]), slots=slots),
            LoadSample(*(float(x) for x in loads[i]))
        )
        for i in range(m)
    )
    virtuals = tuple(VirtualRequirement(*(float(x) for x in demand[j])) for j in range(n))
    return MappingInstance(nodes, virtuals, weights or Weights())
