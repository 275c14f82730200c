"""Tabelle di inoltro basate su VID: OTF (Dijkstra per sorgente), SYM
(Floyd-Warshall con tie-break simmetrico) e STC (caricate da file).

Grammatica del file STC:

    table <owner-vid>
    route <dst-vid> via <nexthop-vid>
"""
import enum
import logging
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Dict, List, Mapping, Optional, Tuple, Union

import networkx as nx
import numpy as np

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.exceptions import (
    DisconnectedTopologyError,
    ForwardingLoopError,
    NoRouteError,
    RoutingError,
    StcRouteError
)
from services.topology import Topology, Vid, to_vid, vid_text

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"\S+")


class RoutingMode(str, enum.Enum):
    OTF = "OTF"
    SYM = "SYM"
    STC = "STC"


class Deliver(enum.Enum):
    """Esito di next_hop quando il pacchetto e' arrivato a destinazione"""
    LOCAL = "deliver"


DELIVER = Deliver.LOCAL


@dataclass(frozen=True)
class RoutingTable:
    owner: Vid
    entries: Mapping[Vid, Vid]
    mode: RoutingMode

    def lookup(self, dst: Vid) -> Optional[Vid]:
        return self.entries.get(dst)


@dataclass(frozen=True)
class RouteSet:
    tables: Mapping[Vid, RoutingTable]
    topology_hash: str
    mode: RoutingMode
    warnings: Tuple[str, ...] = field(default=())

    def table(self, owner: Vid) -> RoutingTable:
        return self.tables[owner]


def _require_connected(t: Topology) -> nx.DiGraph:
    graph = t.to_digraph()
    if graph.number_of_nodes() > 1 and not nx.is_strongly_connected(graph):
        sizes = sorted((len(c) for c in nx.strongly_connected_components(graph)), reverse=True)
        raise DisconnectedTopologyError(f"{ERROR_MESSAGES['disconnected']}: component sizes {sizes}")
    return graph


def _sorted_tables(tables: Dict[Vid, Dict[Vid, Vid]], mode: RoutingMode) -> Dict[Vid, RoutingTable]:
    return {
        owner: RoutingTable(owner=owner, entries=dict(sorted(entries.items())), mode=mode)
        for owner, entries in sorted(tables.items())
    }


def build_otf(t: Topology) -> RouteSet:
    """Cammini minimi per ogni sorgente (Dijkstra), tie-break sul next hop con VID minimo"""
    graph = _require_connected(t)
    tolerance = APP_CONFIG["routing"]["float_tolerance"]
    distances = dict(nx.all_pairs_dijkstra_path_length(graph, weight="weight"))

    tables: Dict[Vid, Dict[Vid, Vid]] = {}
    for src in t.vids:
        neighbors = sorted(graph.successors(src))
        entries: Dict[Vid, Vid] = {}
        for dst, cost in distances[src].items():
            if dst == src:
                continue
            for hop in neighbors:
                through = graph[src][hop]["weight"] + distances[hop].get(dst, math.inf)
                if math.isclose(through, cost, rel_tol=tolerance, abs_tol=tolerance):
                    entries[dst] = hop
                    break
        tables[src] = entries
    return RouteSet(tables=_sorted_tables(tables, RoutingMode.OTF),
                    topology_hash=t.content_hash(), mode=RoutingMode.OTF)


def _integer_weights(t: Topology) -> Dict[frozenset, int]:
    """Pesi razionali esatti scalati a interi con il mcm dei denominatori"""
    weights: Dict[frozenset, Fraction] = {}
    for link in t.links:
        forward = t.link_spec(link.a, link.b)
        backward = t.link_spec(link.b, link.a)
        if forward is None or backward is None or forward.weight != backward.weight:
            raise RoutingError(
                f"SYM requires symmetric weights: link {vid_text(link.a)}-{vid_text(link.b)}"
            )
        weights[link.pair] = Fraction(link.weight)
    scale = reduce(lambda acc, w: acc * w.denominator // math.gcd(acc, w.denominator),
                   weights.values(), 1)
    return {pair: int(w * scale) for pair, w in weights.items()}


def build_sym(t: Topology) -> RouteSet:
    """Floyd-Warshall con costi perturbati in modo simmetrico.

    Ogni arco riceve un bit distinto, il suo rango nell'ordine delle coppie
    di VID: il costo di un cammino e' (peso_intero << E) piu' la somma dei
    bit degli archi usati. A parita' di peso vince il cammino il cui arco di
    rango massimo, tra quelli non in comune, ha rango minore; non e' la
    sequenza di nodi lessicograficamente minima, che non e' invariante per
    inversione. Con pesi positivi i cammini minimi diventano unici, quindi
    path(a, b) e' sempre il rovescio di path(b, a) e le tabelle hop-by-hop
    restano coerenti.
    """
    _require_connected(t)
    vids = sorted(t.vids)
    index = {vid: i for i, vid in enumerate(vids)}
    size = len(vids)
    weights = _integer_weights(t)
    pairs = sorted(weights, key=lambda p: tuple(sorted(p)))
    edge_count = len(pairs)

    unreachable = (sum(weights.values()) + 1) << (edge_count + 2)
    dist = np.full((size, size), unreachable, dtype=object)
    nxt = np.full((size, size), -1, dtype=np.int64)
    for i in range(size):
        dist[i, i] = 0
        nxt[i, i] = i
    for rank, pair in enumerate(pairs):
        a, b = sorted(pair)
        cost = (weights[pair] << edge_count) | (1 << rank)
        i, j = index[a], index[b]
        dist[i, j] = dist[j, i] = cost
        nxt[i, j], nxt[j, i] = j, i

    for k in range(size):
        candidate = dist[:, k:k + 1] + dist[k:k + 1, :]
        better = np.less(candidate, dist).astype(bool)
        if better.any():
            dist = np.where(better, candidate, dist)
            nxt = np.where(better, np.broadcast_to(nxt[:, k:k + 1], nxt.shape), nxt)

    tables: Dict[Vid, Dict[Vid, Vid]] = {}
    for i, src in enumerate(vids):
        tables[src] = {vids[j]: vids[int(nxt[i, j])] for j in range(size) if j != i}
    return RouteSet(tables=_sorted_tables(tables, RoutingMode.SYM),
                    topology_hash=t.content_hash(), mode=RoutingMode.SYM)


def _find_loops(tables: Dict[Vid, Dict[Vid, Vid]], vids: List[Vid]) -> None:
    """Per ogni destinazione il grafo owner -> next hop deve essere aciclico"""
    for dst in vids:
        state: Dict[Vid, int] = {}
        for start in vids:
            path: List[Vid] = []
            node: Optional[Vid] = start
            while node is not None and node != dst and state.get(node) is None:
                state[node] = 1
                path.append(node)
                node = tables.get(node, {}).get(dst)
            if node is not None and state.get(node) == 1:
                cycle = path[path.index(node):] + [node]
                raise ForwardingLoopError(dst, cycle)
            for visited in path:
                state[visited] = 2


def load_stc(t: Topology, text: str) -> RouteSet:
    """Carica le tabelle da file, verifica vicinato e assenza di cicli"""
    tables: Dict[Vid, Dict[Vid, Vid]] = {vid: {} for vid in t.vids}
    owner: Optional[Vid] = None

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        tokens = _TOKEN.findall(raw_line.split("#", 1)[0])
        if not tokens:
            continue
        if tokens[0] == "table" and len(tokens) == 2:
            owner = to_vid(tokens[1])
            if not t.has_router(owner):
                raise StcRouteError(f"{ERROR_MESSAGES['unknown_vid']}: {tokens[1]}", line_no)
        elif tokens[0] == "route" and len(tokens) == 4 and tokens[2] == "via":
            if owner is None:
                raise StcRouteError("route outside of a table block", line_no)
            dst, hop = to_vid(tokens[1]), to_vid(tokens[3])
            for vid, raw in ((dst, tokens[1]), (hop, tokens[3])):
                if not t.has_router(vid):
                    raise StcRouteError(f"{ERROR_MESSAGES['unknown_vid']}: {raw}", line_no)
            if dst == owner:
                raise StcRouteError(f"route to the table owner itself: {tokens[1]}", line_no)
            if t.link_spec(owner, hop) is None:
                raise StcRouteError(
                    f"{ERROR_MESSAGES['not_neighbor']}: {tokens[3]} for table {vid_text(owner)}",
                    line_no
                )
            if dst in tables[owner]:
                raise StcRouteError(f"duplicate route to {tokens[1]}", line_no)
            tables[owner][dst] = hop
        else:
            raise StcRouteError(f"cannot parse '{raw_line.strip()}'", line_no)

    _find_loops(tables, list(t.vids))

    warnings: List[str] = []
    graph = t.to_digraph()
    for src in t.vids:
        reachable = nx.descendants(graph, src)
        missing = sorted(dst for dst in reachable if dst not in tables[src])
        for dst in missing:
            warnings.append(f"incomplete table: ({vid_text(src)}, {vid_text(dst)})")
    if warnings:
        logger.warning("Tabelle STC incomplete: %d voci mancanti", len(warnings))
    return RouteSet(tables=_sorted_tables(tables, RoutingMode.STC),
                    topology_hash=t.content_hash(), mode=RoutingMode.STC,
                    warnings=tuple(warnings))


def serialize_routes(rs: RouteSet) -> str:
    """Serializza un RouteSet nella grammatica STC, ordinato per byte"""
    lines = []
    for owner, table in sorted(rs.tables.items()):
        lines.append(f"table {vid_text(owner)}")
        for dst, hop in sorted(table.entries.items()):
            lines.append(f"route {vid_text(dst)} via {vid_text(hop)}")
    return "\n".join(lines) + "\n"


def next_hop(rs: RouteSet, at: Vid, dst: Vid) -> Union[Vid, Deliver]:
    if at not in rs.tables:
        raise RoutingError(f"{ERROR_MESSAGES['unknown_vid']}: {vid_text(at)}")
    if at == dst:
        return DELIVER
    hop = rs.tables[at].lookup(dst)
    if hop is None:
        raise NoRouteError(at, dst)
    return hop


def route_path(rs: RouteSet, a: Vid, b: Vid) -> List[Vid]:
    """Sequenza dei VID attraversati seguendo i next hop da a fino a b"""
    path = [a]
    node = a
    for _ in range(len(rs.tables)):
        hop = next_hop(rs, node, b)
        if hop is DELIVER:
            return path
        path.append(hop)
        node = hop
    raise ForwardingLoopError(b, path)


def build_routes(t: Topology, mode: Union[RoutingMode, str], stc_text: Optional[str] = None) -> RouteSet:
    mode = RoutingMode(mode)
    if mode is RoutingMode.OTF:
        return build_otf(t)
    if mode is RoutingMode.SYM:
        return build_sym(t)
    if stc_text is None:
        raise StcRouteError("STC routing requires a routes file")
    return load_stc(t, stc_text)
