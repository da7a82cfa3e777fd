"""Agent orchestration over a pluggable chat-completion backend."""

from .backends import (
    CallbackBackend,
    Capabilities,
    ChatTurn,
    HttpChatBackend,
    LlmBackend,
    ScriptedBackend,
    TransportError,
)
from .workflow import (
    ANALYZE_NEXT,
    FINISH,
    Action,
    AgentDecision,
    Exchange,
    IncidentReport,
    PodSummary,
    WorkflowAborted,
    WorkflowState,
    deep_dive_step,
    parse_decision,
    remediation_step,
    rerank_step,
    run_workflow,
    templated_report,
    write_transcript,
)
