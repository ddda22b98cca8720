"""Closed-loop test refinement: generate, execute, analyze, repair, converge.

The public surface re-exports the domain model, the three agents, the
orchestrator, and the hermetic synthetic harness. The CLI entry point lives
in ata.cli:main.
"""

from .errors import (
    AtaError,
    BackendError,
    ConfigurationError,
    IntegrityError,
    NotFoundError,
    OperationalError,
    ParseError,
    ProtocolError,
    SandboxError,
    ValidationError,
)
from .model import (
    ConvergencePolicy,
    CoverageMap,
    Decision,
    ExecutionOutcome,
    FailureClass,
    FailureRecord,
    IterationCounts,
    IterationMetrics,
    Phase,
    RewardWeights,
    TestCase,
    TestMetadata,
    TestStatus,
    TestSuite,
    UnitCoverage,
    Verdict,
    check_convergence,
    compute_improvement,
    compute_metrics,
    content_hash,
    validate_policy,
)
from .memory import (
    ArtifactAddress,
    ArtifactStore,
    EphemeralArchive,
    EphemeralArtifactStore,
    MemoryRecord,
    RunArchive,
    VectorMemory,
    embed_text,
)
from .bus import AgentMessage, MessageBus
from .trace import FileTraceSink, ListTraceSink, TraceEvent, read_trace
from .generation import (
    GenerationRequest,
    GenerationResult,
    InterfaceManifest,
    RemoteBackend,
    TemplateBackend,
    annotate_metadata,
    load_manifest,
    render_test,
)
from .execution import (
    SandboxConfig,
    SandboxExecutor,
    classify_failure,
    load_patterns,
    parse_coverage,
    parse_result_document,
)
from .review import (
    FeedbackBundle,
    RefinementDirective,
    RepairAction,
    ReviewAgent,
    infer_root_cause,
    plan_refinement,
    prioritize_targets,
)
from .harness import (
    DefectKind,
    SyntheticBackend,
    SyntheticExecutor,
    SyntheticScenario,
    SyntheticTest,
    SyntheticUnit,
    load_scenario,
    simulate_runs,
    synth_execute,
    synth_repair,
)
from .orchestrator import (
    CalibrationOverride,
    LoopReport,
    LoopSettings,
    LoopState,
    Orchestrator,
    TerminationReason,
    apply_calibration,
    parse_calibration,
    step_iteration,
)
from .config import RunConfig, load_config
from .reporting import build_report, compare_metrics, render_text

__version__ = "0.1.0"
