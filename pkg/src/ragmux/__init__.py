"""ragmux: route subquestions of a complex query across heterogeneous
knowledge sources, recover from failed retrievals, and fuse the answers."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    AttemptRecord,
    Memory,
    PipelineConfig,
    Query,
    RagmuxError,
    RunTrace,
    SourceDescriptor,
    SubqueryDAG,
    SubqueryNode,
    TokenCount,
    TokenLedger,
)
from .engine import run_pipeline  # noqa: F401
from .sources import Registry, load_registry  # noqa: F401
