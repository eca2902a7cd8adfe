# Merging module
from .kernels import (
    TaskVectorSet,
    linear_merge,
    slerp_merge,
    make_task_vectors,
    task_arithmetic_merge,
    dare_sparsify,
    ties_merge,
)
from .recipe import (
    METHODS,
    MergeRecipe,
    apply_recipe,
    required_coefficient_count,
    whole_model_recipe,
)

__all__ = [
    'TaskVectorSet',
    'linear_merge',
    'slerp_merge',
    'make_task_vectors',
    'task_arithmetic_merge',
    'dare_sparsify',
    'ties_merge',
    'METHODS',
    'MergeRecipe',
    'apply_recipe',
    'required_coefficient_count',
    'whole_model_recipe',
]
