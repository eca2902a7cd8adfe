# Pipeline module
from .glue import (
    ClusterOutcome,
    GlueConfig,
    GlueReport,
    ModelGlue,
    cluster_by_arch,
    load_glue_config,
    run_model_glue,
)
from .benchmarks import (
    BENCH_KINDS,
    BenchTable,
    compare_merge_methods,
    compare_mixtures,
    compare_strategies,
    compare_warm_start,
    sweep_group_size,
)

__all__ = [
    'ClusterOutcome',
    'GlueConfig',
    'GlueReport',
    'ModelGlue',
    'cluster_by_arch',
    'load_glue_config',
    'run_model_glue',
    'BENCH_KINDS',
    'BenchTable',
    'compare_merge_methods',
    'compare_mixtures',
    'compare_strategies',
    'compare_warm_start',
    'sweep_group_size',
]
