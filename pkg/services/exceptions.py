from typing import Any, Dict, List, Optional, Sequence


class LiteLabError(Exception):
    """Radice di tutti gli errori della piattaforma"""


# Topologia

class TopologyError(LiteLabError):
    pass


class TopologySyntaxError(TopologyError):
    """Errore di sintassi nel file di topologia, con posizione"""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class TopologyValidationError(TopologyError):
    """Una o piu' invarianti della topologia non sono rispettate"""

    def __init__(self, violations: Sequence[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


# Routing

class RoutingError(LiteLabError):
    pass


class DisconnectedTopologyError(RoutingError):
    pass


class StcRouteError(RoutingError):
    """Errore nel file di routing statico"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class ForwardingLoopError(RoutingError):
    def __init__(self, dst: bytes, cycle: List[bytes]):
        names = " -> ".join(v.decode("utf-8", "backslashreplace") for v in cycle)
        super().__init__(f"forwarding loop towards {dst.decode('utf-8', 'backslashreplace')}: {names}")
        self.dst = dst
        self.cycle = cycle


class NoRouteError(RoutingError):
    def __init__(self, at: bytes, dst: bytes):
        super().__init__(
            f"no route from {at.decode('utf-8', 'backslashreplace')} "
            f"to {dst.decode('utf-8', 'backslashreplace')}"
        )
        self.at = at
        self.dst = dst


# Piano dati

class PacketError(LiteLabError):
    pass


class MalformedPacketError(PacketError):
    pass


class PayloadTooLargeError(PacketError):
    pass


class ProtocolError(LiteLabError):
    """Violazione del protocollo tra router o tra agenti"""


class HandlerError(LiteLabError):
    pass


class UnknownHandlerError(HandlerError):
    pass


class ChainError(HandlerError):
    pass


# Placement

class PlacementError(LiteLabError):
    pass


class InfeasibleMappingError(PlacementError):
    """Nessuna assegnazione soddisfa i vincoli di capacita'"""

    def __init__(self, report: str, nodes_considered: Optional[int] = None):
        super().__init__(report)
        self.report = report
        self.nodes_considered = nodes_considered


class NoReliefError(PlacementError):
    pass


# Job e agenti

class ArchiveError(LiteLabError):
    def __init__(self, diagnostics: Sequence[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


class JobError(LiteLabError):
    pass


class JobRejectedError(JobError):
    def __init__(self, diagnostics: Sequence[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


class InvalidTransitionError(JobError):
    pass


class AgentError(LiteLabError):
    pass


class AgentUnreachableError(AgentError):
    def __init__(self, agent: str, detail: str = ""):
        super().__init__(f"agent {agent} unreachable{': ' + detail if detail else ''}")
        self.agent = agent


class PortConflictError(AgentError):
    def __init__(self, port: int, details: Optional[Dict[str, Any]] = None):
        super().__init__(f"port {port} already in use")
        self.port = port
        self.details = details or {}


class MigrationError(AgentError):
    pass
