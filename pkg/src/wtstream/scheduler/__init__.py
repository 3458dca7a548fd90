from .archive import (
    PMA_VERSION,
    PredictionModelArchive,
    build_pma,
    default_input_rules,
    load_pma,
    native_pma,
)
from .core import (
    ModelStats,
    PredictionRecord,
    ScheduleKind,
    ScheduleMode,
    Scheduler,
)
from .executor import (
    EngineRecord,
    ExternalExecutor,
    NativeAnnExecutor,
    execute_external,
)
