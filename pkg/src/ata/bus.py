"""In-process message bus: the only contract between orchestrator and agents.

Every hop is an AgentMessage with a serializable payload, so swapping the
in-process dispatch for a queue or socket transport later changes nothing
above this layer. The bus also counts requests per role; those counts feed
the per-iteration agent_invocations metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .errors import IntegrityError, ValidationError
from .memory import canonical_json

ROLES = ("orchestrator", "generation", "execution", "review")


@dataclass(frozen=True, slots=True)
class AgentMessage:
    """Envelope for one request or response.

    kind is namespaced "<role>.<verb>"; the role half routes the message.
    """

    correlation_id: str
    iteration: int
    sender: str
    kind: str
    payload: Mapping[str, Any]
    timestamp: str
    schema_version: int = 1

    def __post_init__(self) -> None:
        if not self.correlation_id:
            raise ValidationError("correlation_id must be non-empty")
        if self.iteration < 0:
            raise ValidationError("iteration must be >= 0")
        if self.sender not in ROLES:
            raise ValidationError(f"unknown sender role {self.sender!r}")
        if "." not in self.kind:
            raise ValidationError(f"kind must be '<role>.<verb>', got {self.kind!r}")
        if self.schema_version < 1:
            raise ValidationError("schema_version must be >= 1")
        try:
            canonical_json(dict(self.payload))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"payload is not serializable: {exc}") from exc

    @property
    def target_role(self) -> str:
        return self.kind.split(".", 1)[0]


Handler = Callable[[AgentMessage], AgentMessage]


@dataclass
class MessageBus:
    _handlers: dict[str, Handler] = field(default_factory=dict)
    _invocations: dict[str, int] = field(default_factory=dict)

    def register(self, role: str, handler: Handler) -> None:
        if role not in ROLES:
            raise ValidationError(f"unknown role {role!r}")
        self._handlers[role] = handler

    def request(self, message: AgentMessage) -> AgentMessage:
        role = message.target_role
        handler = self._handlers.get(role)
        if handler is None:
            raise IntegrityError(f"no handler registered for role {role!r}")
        self._invocations[role] = self._invocations.get(role, 0) + 1
        response = handler(message)
        if not isinstance(response, AgentMessage):
            raise IntegrityError(f"handler for {role!r} returned {type(response).__name__}")
        return response

    def invocation_count(self, role: str | None = None) -> int:
        if role is None:
            return sum(self._invocations.values())
        return self._invocations.get(role, 0)

    def invocation_totals(self) -> dict[str, int]:
        return dict(self._invocations)
