"""Schema di job.json, il file di configurazione di un esperimento."""
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config.settings import APP_CONFIG

PLACEMENT_CONFIG = APP_CONFIG["placement"]
DEFAULT_REQUIREMENT = PLACEMENT_CONFIG["default_requirement"]

RoutingModeName = Literal["OTF", "SYM", "STC"]
BackendName = Literal["realtime", "virtual"]


class RequirementModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cpu: float = Field(DEFAULT_REQUIREMENT["cpu"], ge=0)
    mem: float = Field(DEFAULT_REQUIREMENT["mem"], ge=0)
    egress: float = Field(DEFAULT_REQUIREMENT["egress"], ge=0)
    ingress: float = Field(DEFAULT_REQUIREMENT["ingress"], ge=0)

    @model_validator(mode="after")
    def _not_all_zero(self) -> "RequirementModel":
        if not any(v > 0 for v in (self.cpu, self.mem, self.egress, self.ingress)):
            raise ValueError("a requirement needs at least one positive resource")
        return self


class MigrationModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    threshold: float = Field(PLACEMENT_CONFIG["migration_threshold"], gt=0, le=1)
    sustain_s: float = Field(PLACEMENT_CONFIG["migration_sustain_s"], ge=0)


class AppBinding(BaseModel):
    model_config = ConfigDict(extra="forbid")

    app: str
    params: Dict[str, Any] = Field(default_factory=dict)


class JobConfig(BaseModel):
    """Contenuto di job.json; ogni campo ha un default, quindi `{}` e' valido"""

    model_config = ConfigDict(extra="forbid")

    name: str = "job"
    routing_mode: RoutingModeName = APP_CONFIG["routing"]["default_mode"]
    backend: BackendName = "realtime"
    seed: int = 0
    duration_s: float = Field(10.0, ge=0)
    sample_interval_s: float = Field(PLACEMENT_CONFIG["sample_interval_s"], gt=0)
    weights: Tuple[float, float, float, float] = tuple(PLACEMENT_CONFIG["weights"])
    migration: MigrationModel = Field(default_factory=MigrationModel)
    # catena applicata ai router che non dichiarano handler nella topologia
    handlers: List[str] = Field(default_factory=list)
    # chiave: VID in forma testuale
    apps: Dict[str, AppBinding] = Field(default_factory=dict)
    # chiave "default" oppure VID testuale
    requirements: Dict[str, RequirementModel] = Field(default_factory=dict)
    aggregate_ingress_kbps: Optional[float] = Field(APP_CONFIG["srouter"]["aggregate_ingress_kbps"], gt=0)
    aggregate_egress_kbps: Optional[float] = Field(APP_CONFIG["srouter"]["aggregate_egress_kbps"], gt=0)

    @field_validator("weights")
    @classmethod
    def _ordered_weights(cls, value: Tuple[float, float, float, float]) -> Tuple[float, float, float, float]:
        w1, w2, w3, w4 = value
        if not w1 > w2 > w3 > w4 > 0:
            raise ValueError("weights must satisfy w1 > w2 > w3 > w4 > 0")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        return value

    def requirement_for(self, vid_name: str) -> RequirementModel:
        if vid_name in self.requirements:
            return self.requirements[vid_name]
        return self.requirements.get("default", RequirementModel())
