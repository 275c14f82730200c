"""Costruzione, parsing, validazione e generazione delle topologie di esperimento.

Grammatica del file di topologia (UTF-8, commenti con '#'):

    router <vid> [app=<name>] [handlers=<name>,<name>...]
    link <vid> <vid> [delay=<ms>] [loss=<p>] [bw=<kbps>|unlimited] [qlen=<n>]
         [qpolicy=droptail|red:<min>:<max>:<maxp>:<wq>] [weight=<w>]
    option connectivity=required|optional

Un link dichiarato una sola volta e' bidirezionale con attributi simmetrici.
Dichiarando sia `link a b` sia `link b a` ogni riga diventa la specifica
della propria direzione.
"""
import hashlib
import logging
import re
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx

from config.settings import APP_CONFIG, ERROR_MESSAGES
from services.exceptions import TopologyError, TopologySyntaxError, TopologyValidationError

logger = logging.getLogger(__name__)

Vid = bytes

TOPOLOGY_CONFIG = APP_CONFIG["topology"]
_TOKEN = re.compile(r"\S+")


def to_vid(value: Union[bytes, str, int, float]) -> Vid:
    """Normalizza interi, float e stringhe nella forma a byte del VID"""
    if isinstance(value, bytes):
        return value
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value).encode("utf-8")
    raise TypeError(f"unsupported VID type: {type(value).__name__}")


def vid_text(vid: Vid) -> str:
    return vid.decode("utf-8", "backslashreplace")


@dataclass(frozen=True)
class QueuePolicy:
    """Politica di coda: droptail oppure RED(min_th, max_th, max_p, w_q)"""
    kind: str = "droptail"
    min_th: float = 0.0
    max_th: float = 0.0
    max_p: float = 0.0
    w_q: float = 0.0

    @classmethod
    def red(cls, min_th: float, max_th: float, max_p: float, w_q: float) -> "QueuePolicy":
        return cls("red", float(min_th), float(max_th), float(max_p), float(w_q))

    @property
    def is_red(self) -> bool:
        return self.kind == "red"

    def to_text(self) -> str:
        if not self.is_red:
            return "droptail"
        return "red:" + ":".join(_fmt(x) for x in (self.min_th, self.max_th, self.max_p, self.w_q))


DROPTAIL = QueuePolicy()


@dataclass(frozen=True)
class LinkSpec:
    a: Vid
    b: Vid
    delay_ms: float = TOPOLOGY_CONFIG["default_delay_ms"]
    loss_rate: float = TOPOLOGY_CONFIG["default_loss_rate"]
    bandwidth_kbps: Optional[float] = TOPOLOGY_CONFIG["default_bandwidth_kbps"]
    queue_len: int = TOPOLOGY_CONFIG["default_queue_len"]
    queue_policy: QueuePolicy = DROPTAIL
    weight: float = TOPOLOGY_CONFIG["default_weight"]
    directed: bool = False

    @property
    def pair(self) -> frozenset:
        return frozenset((self.a, self.b))

    def oriented(self, src: Vid) -> "LinkSpec":
        """Vista del link nella direzione che parte da src"""
        if self.a == src:
            return self
        return replace(self, a=self.b, b=self.a)


@dataclass(frozen=True)
class RouterConfig:
    vid: Vid
    app: Optional[str] = None
    handlers: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Topology:
    routers: Tuple[RouterConfig, ...]
    links: Tuple[LinkSpec, ...] = ()
    connectivity_required: bool = True

    @property
    def vids(self) -> Tuple[Vid, ...]:
        return tuple(r.vid for r in self.routers)

    @cached_property
    def _router_index(self) -> Dict[Vid, RouterConfig]:
        return {r.vid: r for r in self.routers}

    @cached_property
    def _directions(self) -> Dict[Tuple[Vid, Vid], LinkSpec]:
        directions: Dict[Tuple[Vid, Vid], LinkSpec] = {}
        for link in self.links:
            directions[(link.a, link.b)] = link
            if not link.directed:
                directions.setdefault((link.b, link.a), link.oriented(link.b))
        return directions

    @cached_property
    def _adjacency(self) -> Dict[Vid, Tuple[Vid, ...]]:
        adjacency: Dict[Vid, List[Vid]] = {vid: [] for vid in self.vids}
        for (src, dst) in self._directions:
            adjacency.setdefault(src, []).append(dst)
        return {vid: tuple(sorted(set(n))) for vid, n in adjacency.items()}

    def router(self, vid: Vid) -> RouterConfig:
        return self._router_index[vid]

    def has_router(self, vid: Vid) -> bool:
        return vid in self._router_index

    def link_spec(self, src: Vid, dst: Vid) -> Optional[LinkSpec]:
        """Specifica del link nella direzione src -> dst, se esiste"""
        return self._directions.get((src, dst))

    def neighbors(self, vid: Vid) -> Tuple[Vid, ...]:
        return self._adjacency.get(vid, ())

    def to_graph(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(self.vids)
        for link in self.links:
            graph.add_edge(link.a, link.b, weight=link.weight)
        return graph

    def to_digraph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.vids)
        for (src, dst), spec in self._directions.items():
            graph.add_edge(src, dst, weight=spec.weight)
        return graph

    def content_hash(self) -> str:
        return hashlib.sha256(serialize_topology(self).encode("utf-8")).hexdigest()


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def _syntax(message: str, line_no: int, column: int):
    return TopologySyntaxError(message, line_no, column)


def _parse_number(raw: str, line_no: int, column: int, suffixes: Sequence[str] = ()) -> float:
    text = raw
    for suffix in suffixes:
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    try:
        return float(text)
    except ValueError:
        raise _syntax(f"invalid number '{raw}'", line_no, column)


def _parse_policy(raw: str, line_no: int, column: int) -> QueuePolicy:
    if raw == "droptail":
        return DROPTAIL
    parts = raw.split(":")
    if parts[0] != "red" or len(parts) != 5:
        raise _syntax(f"invalid queue policy '{raw}'", line_no, column)
    values = [_parse_number(p, line_no, column) for p in parts[1:]]
    return QueuePolicy.red(*values)


def _parse_link(tokens: List[Tuple[str, int]], line_no: int) -> LinkSpec:
    if len(tokens) < 3:
        raise _syntax("link requires two endpoints", line_no, tokens[0][1])
    attrs: Dict[str, object] = {}
    for raw, column in tokens[3:]:
        key, sep, value = raw.partition("=")
        if not sep or not value:
            raise _syntax(f"expected key=value, got '{raw}'", line_no, column)
        if key == "delay":
            attrs["delay_ms"] = _parse_number(value, line_no, column, ("ms",))
        elif key == "loss":
            attrs["loss_rate"] = _parse_number(value, line_no, column)
        elif key == "bw":
            attrs["bandwidth_kbps"] = (
                None if value == "unlimited" else _parse_number(value, line_no, column, ("kbps",))
            )
        elif key == "qlen":
            qlen = _parse_number(value, line_no, column)
            if not qlen.is_integer():
                raise _syntax(f"qlen must be an integer, got '{value}'", line_no, column)
            attrs["queue_len"] = int(qlen)
        elif key == "qpolicy":
            attrs["queue_policy"] = _parse_policy(value, line_no, column)
        elif key == "weight":
            attrs["weight"] = _parse_number(value, line_no, column)
        else:
            raise _syntax(f"unknown link attribute '{key}'", line_no, column)
    return LinkSpec(a=to_vid(tokens[1][0]), b=to_vid(tokens[2][0]), **attrs)


def _parse_router(tokens: List[Tuple[str, int]], line_no: int) -> RouterConfig:
    if len(tokens) < 2:
        raise _syntax("router requires a VID", line_no, tokens[0][1])
    app = None
    handlers: Tuple[str, ...] = ()
    for raw, column in tokens[2:]:
        key, sep, value = raw.partition("=")
        if not sep or not value:
            raise _syntax(f"expected key=value, got '{raw}'", line_no, column)
        if key == "app":
            app = value
        elif key == "handlers":
            handlers = tuple(h for h in value.split(",") if h)
        else:
            raise _syntax(f"unknown router attribute '{key}'", line_no, column)
    return RouterConfig(vid=to_vid(tokens[1][0]), app=app, handlers=handlers)


def _pair_directed(links: List[LinkSpec]) -> List[LinkSpec]:
    """Due dichiarazioni opposte della stessa coppia diventano link orientati"""
    by_pair: Dict[frozenset, List[int]] = {}
    for index, link in enumerate(links):
        by_pair.setdefault(link.pair, []).append(index)
    result = list(links)
    for indexes in by_pair.values():
        if len(indexes) != 2:
            continue
        first, second = (links[i] for i in indexes)
        if first.a == second.b and first.b == second.a:
            result[indexes[0]] = replace(first, directed=True)
            result[indexes[1]] = replace(second, directed=True)
    return result


def parse_topology(text: str) -> Topology:
    """Legge un file di topologia e restituisce una Topology validata"""
    routers: List[RouterConfig] = []
    links: List[LinkSpec] = []
    connectivity = TOPOLOGY_CONFIG["connectivity_required"]

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0]
        tokens = [(m.group(0), m.start() + 1) for m in _TOKEN.finditer(line)]
        if not tokens:
            continue
        keyword, column = tokens[0]
        if keyword == "router":
            routers.append(_parse_router(tokens, line_no))
        elif keyword == "link":
            links.append(_parse_link(tokens, line_no))
        elif keyword == "option":
            for raw, col in tokens[1:]:
                key, _, value = raw.partition("=")
                if key != "connectivity" or value not in ("required", "optional"):
                    raise _syntax(f"unknown option '{raw}'", line_no, col)
                connectivity = value == "required"
        else:
            raise _syntax(f"unknown keyword '{keyword}'", line_no, column)

    topology = Topology(
        routers=tuple(routers),
        links=tuple(_pair_directed(links)),
        connectivity_required=connectivity
    )
    violations = validate(topology)
    if violations:
        raise TopologyValidationError(violations)
    return topology


def _vid_token(vid: Vid) -> str:
    try:
        text = vid.decode("utf-8")
    except UnicodeDecodeError:
        raise TopologyError(f"VID {vid!r} is not representable as text")
    if not text or any(ch.isspace() for ch in text) or "#" in text or "=" in text:
        raise TopologyError(f"VID {vid!r} is not representable as text")
    return text


def serialize_topology(t: Topology) -> str:
    """Serializza la topologia nella grammatica testuale (attributi di default omessi)"""
    lines = []
    if not t.connectivity_required:
        lines.append("option connectivity=optional")
    for router in t.routers:
        parts = ["router", _vid_token(router.vid)]
        if router.app:
            parts.append(f"app={router.app}")
        if router.handlers:
            parts.append("handlers=" + ",".join(router.handlers))
        lines.append(" ".join(parts))
    for link in t.links:
        parts = ["link", _vid_token(link.a), _vid_token(link.b)]
        if link.delay_ms != TOPOLOGY_CONFIG["default_delay_ms"]:
            parts.append(f"delay={_fmt(link.delay_ms)}")
        if link.loss_rate != TOPOLOGY_CONFIG["default_loss_rate"]:
            parts.append(f"loss={_fmt(link.loss_rate)}")
        if link.bandwidth_kbps is not None:
            parts.append(f"bw={_fmt(link.bandwidth_kbps)}")
        if link.queue_len != TOPOLOGY_CONFIG["default_queue_len"]:
            parts.append(f"qlen={link.queue_len}")
        if link.queue_policy.is_red:
            parts.append(f"qpolicy={link.queue_policy.to_text()}")
        if link.weight != TOPOLOGY_CONFIG["default_weight"]:
            parts.append(f"weight={_fmt(link.weight)}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _link_name(link: LinkSpec) -> str:
    return f"{vid_text(link.a)}-{vid_text(link.b)}"


def _link_violations(link: LinkSpec) -> List[str]:
    name = _link_name(link)
    found = []
    if link.a == link.b:
        found.append(f"self-loop: link {name}")
    if not link.delay_ms >= 0:
        found.append(f"range violation on delay: link {name} = {link.delay_ms}")
    if not 0 <= link.loss_rate <= 1:
        found.append(f"range violation on loss_rate: link {name} = {link.loss_rate}")
    if link.bandwidth_kbps is not None and not link.bandwidth_kbps > 0:
        found.append(f"range violation on bandwidth: link {name} = {link.bandwidth_kbps}")
    if link.queue_len < 1:
        found.append(f"range violation on queue_len: link {name} = {link.queue_len}")
    if not link.weight > 0:
        found.append(f"range violation on weight: link {name} = {link.weight}")
    policy = link.queue_policy
    if policy.is_red:
        if not 0 <= policy.min_th < policy.max_th <= link.queue_len:
            found.append(
                f"red thresholds: link {name} requires 0 <= min_th < max_th <= queue_len"
            )
        if not 0 < policy.max_p <= 1:
            found.append(f"range violation on red max_p: link {name} = {policy.max_p}")
        if not 0 < policy.w_q <= 1:
            found.append(f"range violation on red w_q: link {name} = {policy.w_q}")
    elif policy.kind != "droptail":
        found.append(f"unknown queue policy: link {name} = {policy.kind}")
    return found


def validate(t: Topology) -> List[str]:
    """Restituisce le violazioni delle invarianti; lista vuota se la topologia e' valida"""
    violations: List[str] = []
    max_len = TOPOLOGY_CONFIG["max_vid_len"]
    seen = set()
    for router in t.routers:
        if not router.vid:
            violations.append("empty VID")
        elif len(router.vid) > max_len:
            violations.append(f"VID longer than {max_len} bytes: {vid_text(router.vid[:16])}...")
        if router.vid in seen:
            violations.append(f"{ERROR_MESSAGES['duplicate_vid']}: {vid_text(router.vid)}")
        seen.add(router.vid)

    by_pair: Dict[frozenset, List[LinkSpec]] = {}
    for link in t.links:
        for endpoint in (link.a, link.b):
            if endpoint not in seen:
                violations.append(
                    f"dangling link endpoint: link {_link_name(link)} ({vid_text(endpoint)})"
                )
        violations.extend(_link_violations(link))
        by_pair.setdefault(link.pair, []).append(link)

    for pair_links in by_pair.values():
        if len(pair_links) == 1:
            if pair_links[0].directed:
                violations.append(f"directed link without reverse: {_link_name(pair_links[0])}")
            continue
        first, second = pair_links[0], pair_links[-1]
        opposite = len(pair_links) == 2 and first.a == second.b and first.b == second.a
        if not (opposite and first.directed and second.directed):
            violations.append(f"{ERROR_MESSAGES['duplicate_link']}: {_link_name(first)}")

    if t.connectivity_required and t.routers and not violations:
        components = sorted(
            (len(c) for c in nx.connected_components(t.to_graph())), reverse=True
        )
        if len(components) > 1:
            violations.append(f"disconnected: component sizes {components}")
    return violations


def _from_graph(graph: nx.Graph, connectivity_required: bool) -> Topology:
    routers = tuple(RouterConfig(vid=to_vid(node)) for node in sorted(graph.nodes))
    edges = sorted((min(u, v), max(u, v)) for u, v in graph.edges)
    links = tuple(LinkSpec(a=to_vid(u), b=to_vid(v)) for u, v in edges)
    return Topology(routers=routers, links=links, connectivity_required=connectivity_required)


def generate_random(n: int, p: float, seed: int) -> Topology:
    """Grafo Erdos-Renyi G(n, p), deterministico per seed fissato"""
    if n < 1 or not 0 <= p <= 1:
        raise ValueError(f"generate_random requires n >= 1 and 0 <= p <= 1 (n={n}, p={p})")
    graph = nx.gnp_random_graph(n, p, seed=seed)
    return _from_graph(graph, connectivity_required=False)


def generate_scale_free(n: int, m_attach: int, seed: int) -> Topology:
    """Grafo Barabasi-Albert con clique iniziale di m_attach nodi.

    Archi: m_attach*(m_attach-1)/2 nella clique piu' m_attach*(n - m_attach)
    di attacco. Con m_attach = 1 la clique e' un nodo isolato e il primo
    attacco e' forzato, il che coincide con un seed a due nodi collegati.
    """
    if not 1 <= m_attach < n:
        raise ValueError(f"generate_scale_free requires 1 <= m_attach < n (n={n}, m={m_attach})")
    if m_attach == 1:
        graph = nx.barabasi_albert_graph(n, 1, seed=seed)
    else:
        graph = nx.barabasi_albert_graph(
            n, m_attach, seed=seed, initial_graph=nx.complete_graph(m_attach)
        )
    return _from_graph(graph, connectivity_required=False)


def mean_degree_probability(n: int, degree: float) -> float:
    """Probabilita' p di G(n, p) per un grado medio atteso dato"""
    if n < 2:
        return 0.0
    return min(1.0, degree / (n - 1))


def load_edge_list(text: str, connectivity_required: bool = False) -> Topology:
    """Importa un edge-list in stile Rocketfuel: una riga 'vid vid [peso]' per arco"""
    order: List[Vid] = []
    known = set()
    links: Dict[frozenset, LinkSpec] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0]
        tokens = [(m.group(0), m.start() + 1) for m in _TOKEN.finditer(line)]
        if not tokens:
            continue
        if len(tokens) not in (2, 3):
            raise _syntax("expected 'vid vid [weight]'", line_no, tokens[0][1])
        a, b = to_vid(tokens[0][0]), to_vid(tokens[1][0])
        weight = (
            _parse_number(tokens[2][0], line_no, tokens[2][1])
            if len(tokens) == 3 else TOPOLOGY_CONFIG["default_weight"]
        )
        for vid in (a, b):
            if vid not in known:
                known.add(vid)
                order.append(vid)
        if a == b:
            logger.debug("Self-loop ignorato alla riga %d", line_no)
            continue
        links.setdefault(frozenset((a, b)), LinkSpec(a=a, b=b, weight=weight))

    topology = Topology(
        routers=tuple(RouterConfig(vid=v) for v in order),
        links=tuple(links.values()),
        connectivity_required=connectivity_required
    )
    violations = validate(topology)
    if violations:
        raise TopologyValidationError(violations)
    return topology


def largest_component(t: Topology) -> Topology:
    """Restringe la topologia alla componente connessa piu' grande"""
    if not t.routers:
        return t
    components = list(nx.connected_components(t.to_graph()))
    # a parita' di dimensione vince la componente con il VID minimo
    keep = min(components, key=lambda c: (-len(c), min(c)))
    return Topology(
        routers=tuple(r for r in t.routers if r.vid in keep),
        links=tuple(l for l in t.links if l.a in keep and l.b in keep),
        connectivity_required=True
    )


def with_overrides(
    t: Topology,
    apps: Optional[Dict[Vid, str]] = None,
    handlers: Optional[Dict[Vid, Iterable[str]]] = None
) -> Topology:
    """Copia della topologia con applicazioni e handler sovrascritti per router"""
    apps = apps or {}
    handlers = handlers or {}
    routers = tuple(
        replace(
            r,
            app=apps.get(r.vid, r.app),
            handlers=tuple(handlers[r.vid]) if r.vid in handlers else r.handlers
        )
        for r in t.routers
    )
    return replace(t, routers=routers)
