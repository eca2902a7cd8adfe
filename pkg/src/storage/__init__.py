# Storage module
from .jsonl_handler import JSONLHandler
from .run_store import RunStore

__all__ = ['JSONLHandler', 'RunStore']
