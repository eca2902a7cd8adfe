# Checkpoint module
from .tensor_store import TensorStore, ArchDescriptor, TensorRole
from .roles import RolePatternTable, derive_tensor_roles
from .checkpoint_io import (
    CompatReport,
    load_checkpoint,
    save_checkpoint,
    check_compat,
    check_store_compat,
    require_mergeable,
)
from .zoo import ModelZoo, ZooEntry, expand_zoo_args, load_zoo

__all__ = [
    'TensorStore',
    'ArchDescriptor',
    'TensorRole',
    'RolePatternTable',
    'derive_tensor_roles',
    'CompatReport',
    'load_checkpoint',
    'save_checkpoint',
    'check_compat',
    'check_store_compat',
    'require_mergeable',
    'ModelZoo',
    'ZooEntry',
    'expand_zoo_args',
    'load_zoo',
]
