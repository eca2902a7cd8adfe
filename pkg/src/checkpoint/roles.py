"""張量命名 → 角色對應 (規則表來自 config/roles.yaml)"""

import re
from typing import Dict, Iterable, Optional, Sequence

from src.checkpoint.tensor_store import TensorRole
from src.utils.config_loader import get_config


class RolePatternTable:
    """依序比對的命名規則表"""

    def __init__(self, rules: Sequence[Dict[str, str]]):
        """
        Args:
            rules: [{'pattern': 正規表示式, 'role': 角色}, ...]; pattern 中的 (?P<layer>...) 為層索引
        """
        self.rules = [(re.compile(rule['pattern']), rule['role']) for rule in rules]

    @classmethod
    def from_config(cls, scheme: Optional[str] = None) -> "RolePatternTable":
        config = get_config()
        scheme = scheme or config.get_checkpoint_config().get('role_scheme', 'llama')
        return cls(config.get_role_patterns(scheme))

    def role_for(self, name: str) -> TensorRole:
        for pattern, kind in self.rules:
            match = pattern.fullmatch(name)
            if match:
                layer = match.groupdict().get('layer')
                return TensorRole(kind, int(layer) if layer is not None else None)
        return TensorRole("other")


def derive_tensor_roles(names: Iterable[str], scheme: Optional[str] = None,
                        table: Optional[RolePatternTable] = None) -> Dict[str, TensorRole]:
    """
    由張量名稱推導角色表

    Args:
        names: 張量名稱
        scheme: 命名規則名稱 (預設讀取 checkpoint.role_scheme)
        table: 直接指定規則表 (優先於 scheme)

    Returns:
        {name: TensorRole}
    """
    table = table or RolePatternTable.from_config(scheme)
    return {name: table.role_for(name) for name in sorted(names)}
