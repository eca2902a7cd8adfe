"""
MergeRecipe 與分組係數套用

係數矩陣 shape = k × (num_layers / n + 1):
    第 ⌊ℓ/n⌋ 欄 → 第 ℓ 層的張量
    最後一欄   → 層外張量 (embedding, 最終 norm, lm_head, other)
"""

import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from loguru import logger

from src.checkpoint.checkpoint_io import require_mergeable
from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import MergeError
from src.merging.kernels import (
    dare_sparsify,
    linear_merge,
    make_task_vectors,
    slerp_merge,
    task_arithmetic_merge,
    ties_merge,
)
from src.utils.config_loader import get_config
from src.utils.helpers import derive_seed

METHODS = ("linear", "slerp", "task_arithmetic", "ties", "dare_ta")
BASE_METHODS = ("task_arithmetic", "ties", "dare_ta")
DENSITY_METHODS = ("ties", "dare_ta")


def num_groups(num_layers: int, group_size: int) -> int:
    """層分組數 num_layers / n (n 必須整除 num_layers)"""
    if not isinstance(group_size, int) or group_size <= 0:
        raise MergeError(f"group_size 必須是正整數, 實際為 {group_size!r}")
    if num_layers % group_size != 0:
        raise MergeError(f"group_size {group_size} 無法整除 num_layers {num_layers}")
    return num_layers // group_size


def required_coefficient_count(k: int, num_layers: int, group_size: int) -> int:
    """
    需搜尋的係數數量 k · (num_layers / n + 1)

    Args:
        k: 模型數
        num_layers: 層數
        group_size: 每組相鄰層數 n
    """
    if k <= 0:
        raise MergeError(f"模型數必須為正, 實際為 {k}")
    return k * (num_groups(num_layers, group_size) + 1)


@dataclass
class MergeRecipe:
    """合併方法 + 分組係數 (+ 可選的每模型 density)"""

    method: str
    group_size: int
    coefficients: List[List[float]]
    densities: Optional[List[float]] = None
    ties_trim_frac: float = 0.2
    dare_drop_p: float = 0.5
    seed: int = 0
    model_ids: Optional[List[str]] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise MergeError(f"未知的合併方法: {self.method} (可用: {', '.join(METHODS)})")
        if not isinstance(self.group_size, int) or self.group_size <= 0:
            raise MergeError(f"group_size 必須是正整數, 實際為 {self.group_size!r}")
        self.coefficients = [[float(c) for c in row] for row in self.coefficients]
        if not self.coefficients or len({len(row) for row in self.coefficients}) != 1:
            raise MergeError("coefficients 必須是非空且每列等長的矩陣")
        if self.densities is not None:
            self.densities = [float(d) for d in self.densities]
            if len(self.densities) != self.k:
                raise MergeError(f"densities 長度 {len(self.densities)} 與模型數 {self.k} 不符")
        if int(self.seed) < 0:
            raise MergeError(f"seed 必須是非負整數, 實際為 {self.seed}")

    @property
    def k(self) -> int:
        return len(self.coefficients)

    @property
    def num_columns(self) -> int:
        return len(self.coefficients[0])

    def column(self, index: int) -> List[float]:
        return [row[index] for row in self.coefficients]

    def check_shape(self, num_layers: int, k: Optional[int] = None):
        expected_cols = num_groups(num_layers, self.group_size) + 1
        if self.num_columns != expected_cols:
            raise MergeError(
                f"係數矩陣欄數 {self.num_columns} 不符: num_layers={num_layers}, "
                f"group_size={self.group_size} 需要 {expected_cols} 欄"
            )
        if k is not None and self.k != k:
            raise MergeError(f"係數矩陣列數 {self.k} 與模型數 {k} 不符")

    def flat(self) -> List[float]:
        """係數 (列優先) + densities, 對應搜尋向量的排列"""
        values = [c for row in self.coefficients for c in row]
        if self.densities is not None:
            values.extend(self.densities)
        return values

    def to_dict(self) -> Dict:
        data = {
            'method': self.method,
            'group_size': self.group_size,
            'coefficients': [list(row) for row in self.coefficients],
            'densities': list(self.densities) if self.densities is not None else None,
            'ties_trim_frac': self.ties_trim_frac,
            'dare_drop_p': self.dare_drop_p,
            'seed': int(self.seed),
        }
        if self.model_ids is not None:
            data['model_ids'] = list(self.model_ids)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "MergeRecipe":
        merge_defaults = get_config().get_merge_defaults()
        try:
            return cls(
                method=data['method'],
                group_size=int(data['group_size']),
                coefficients=data['coefficients'],
                densities=data.get('densities'),
                ties_trim_frac=float(data.get('ties_trim_frac', merge_defaults.get('ties_trim_frac', 0.2))),
                dare_drop_p=float(data.get('dare_drop_p', merge_defaults.get('dare_drop_p', 0.5))),
                seed=int(data.get('seed', 0)),
                model_ids=data.get('model_ids'),
            )
        except KeyError as e:
            raise MergeError(f"recipe 缺少欄位: {e.args[0]}") from None

    @classmethod
    def from_vector(cls, vector: Sequence[float], method: str, k: int, num_layers: int,
                    group_size: int, search_densities: bool = False, **kwargs) -> "MergeRecipe":
        """由搜尋向量還原 recipe (排列見 flat())"""
        cols = num_groups(num_layers, group_size) + 1
        expected = k * cols + (k if search_densities else 0)
        if len(vector) != expected:
            raise MergeError(f"搜尋向量長度 {len(vector)} 與預期 {expected} 不符")
        values = [float(v) for v in vector]
        coefficients = [values[i * cols:(i + 1) * cols] for i in range(k)]
        densities = values[k * cols:] if search_densities else None
        return cls(method=method, group_size=group_size, coefficients=coefficients,
                   densities=densities, **kwargs)


def whole_model_recipe(method: str, coeffs: Sequence[float], num_layers: int, **kwargs) -> MergeRecipe:
    """單組 (n = num_layers) recipe: 每個模型的層欄與共用欄相同"""
    return recipe_with_defaults(method, num_layers, [[float(c), float(c)] for c in coeffs], **kwargs)


def recipe_with_defaults(method: str, group_size: int, coefficients, **kwargs) -> MergeRecipe:
    """以 config merge 區段的預設值建立 recipe"""
    merge_defaults = get_config().get_merge_defaults()
    kwargs.setdefault('ties_trim_frac', float(merge_defaults.get('ties_trim_frac', 0.2)))
    kwargs.setdefault('dare_drop_p', float(merge_defaults.get('dare_drop_p', 0.5)))
    return MergeRecipe(method=method, group_size=group_size, coefficients=coefficients, **kwargs)


def _excluded_names(names: Sequence[str], patterns: Sequence[str]) -> List[str]:
    compiled = [re.compile(p) for p in patterns]
    return [name for name in names if any(p.search(name) for p in compiled)]


def _clamped_densities(recipe: MergeRecipe) -> Optional[List[float]]:
    if recipe.densities is None:
        return None
    floor = float(get_config().get_merge_defaults().get('min_density', 0.01))
    return [min(1.0, max(floor, d)) for d in recipe.densities]


def _merge_group(stores: List[TensorStore], base: Optional[TensorStore], coeffs: List[float],
                 recipe: MergeRecipe) -> TensorStore:
    method = recipe.method

    if method == "linear":
        return linear_merge(stores, coeffs)

    if method == "slerp":
        total = coeffs[0] + coeffs[1]
        t = coeffs[1] / total if total != 0 else 0.5
        return slerp_merge(stores[0], stores[1], min(1.0, max(0.0, t)))

    tvs = make_task_vectors(stores, base)
    densities = _clamped_densities(recipe)

    if method == "task_arithmetic":
        return task_arithmetic_merge(base, tvs, coeffs)

    if method == "ties":
        trim = densities if densities is not None else recipe.ties_trim_frac
        return ties_merge(base, tvs, coeffs, trim)

    # dare_ta
    drops = [1.0 - d for d in densities] if densities is not None else [recipe.dare_drop_p] * len(tvs)
    sparse = [dare_sparsify(tv, p, derive_seed(recipe.seed, index)) for index, (tv, p) in enumerate(zip(tvs, drops))]
    return task_arithmetic_merge(base, sparse, coeffs)


def apply_recipe(zoo: Sequence[TensorStore], desc: ArchDescriptor, base: Optional[TensorStore],
                 recipe: MergeRecipe, exclude_patterns: Optional[Sequence[str]] = None) -> TensorStore:
    """
    依 recipe 分組套用合併核心

    Args:
        zoo: k 個同結構模型
        desc: 結構描述 (提供每個張量的層索引)
        base: base 模型 (task_arithmetic / ties / dare_ta 必填)
        recipe: MergeRecipe
        exclude_patterns: 不合併的張量名稱 regex (預設讀取 merge.exclude_patterns);
                          符合者直接沿用 base (若有) 或第一個模型

    Returns:
        合併後的 TensorStore
    """
    zoo = list(zoo)
    if not zoo:
        raise MergeError("apply_recipe: zoo 不可為空")
    recipe.check_shape(desc.num_layers, k=len(zoo))
    if recipe.method in BASE_METHODS and base is None:
        raise MergeError(f"方法 {recipe.method} 需要 base 模型")
    if recipe.method == "slerp" and len(zoo) != 2:
        raise MergeError(f"slerp 只支援 2 個模型, 實際為 {len(zoo)}")

    require_mergeable(zoo + ([base] if base is not None else []), "apply_recipe", error=MergeError)
    desc.require_conforms(zoo[0])

    if exclude_patterns is None:
        exclude_patterns = get_config().get_merge_defaults().get('exclude_patterns') or []
    excluded = set(_excluded_names(zoo[0].names(), exclude_patterns))
    source = base if base is not None else zoo[0]

    shared_column = recipe.num_columns - 1
    columns: Dict[int, List[str]] = {}
    for name in zoo[0]:
        if name in excluded:
            continue
        role = desc.role_of(name)
        column = role.layer // recipe.group_size if role.layer is not None else shared_column
        columns.setdefault(column, []).append(name)

    merged: Dict = {name: source[name] for name in excluded}
    for column, names in sorted(columns.items()):
        group = _merge_group(
            [store.select(names) for store in zoo],
            base.select(names) if base is not None else None,
            recipe.column(column),
            recipe,
        )
        merged.update(group)

    logger.debug(f"apply_recipe: method={recipe.method}, n={recipe.group_size}, "
                 f"{len(columns)} 組, 排除 {len(excluded)} 個張量")
    return TensorStore(merged)
