"""TensorStore 與 ArchDescriptor - 所有合併/混合運算共用的權重容器"""

import hashlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import torch

from src.errors import CheckpointError

Shape = Tuple[int, ...]

ROLE_KINDS = ("embedding", "attention", "ffn", "norm", "lm_head", "other")
LAYER_ROLE_KINDS = ("attention", "ffn", "norm")


class TensorStore(Mapping):
    """
    具名 float32 張量的唯讀對應表 (一個 checkpoint 的權重)

    迭代順序固定為名稱字典序。建構後視為不可變: 所有運算都回傳新的 TensorStore,
    因此可在多個 worker 之間共用讀取。
    """

    def __init__(self, entries: Mapping):
        tensors: Dict[str, torch.Tensor] = {}
        for name in sorted(entries):
            if not isinstance(name, str) or not name:
                raise CheckpointError(f"張量名稱必須是非空字串: {name!r}")
            tensor = entries[name]
            if not isinstance(tensor, torch.Tensor):
                raise CheckpointError(f"{name}: 不是 torch.Tensor ({type(tensor).__name__})")
            if tensor.dtype != torch.float32:
                raise CheckpointError(f"{name}: dtype 必須是 float32, 實際為 {tensor.dtype}")
            if tensor.dim() == 0 or any(d <= 0 for d in tensor.shape):
                raise CheckpointError(f"{name}: shape 必須是正整數列表, 實際為 {list(tensor.shape)}")
            tensors[name] = tensor.contiguous()
        self._tensors = tensors

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"TensorStore({len(self)} tensors, {self.num_parameters()} params)"

    def names(self) -> List[str]:
        return list(self._tensors)

    def shapes(self) -> Dict[str, Shape]:
        return {name: tuple(t.shape) for name, t in self._tensors.items()}

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def map(self, fn: Callable[[str, torch.Tensor], torch.Tensor]) -> "TensorStore":
        """逐張量套用 fn(name, tensor) 並回傳新 store"""
        return TensorStore({name: fn(name, t) for name, t in self._tensors.items()})

    def replace(self, updates: Mapping) -> "TensorStore":
        """回傳以 updates 覆蓋部分張量後的新 store"""
        merged = dict(self._tensors)
        merged.update(updates)
        return TensorStore(merged)

    def select(self, names) -> "TensorStore":
        return TensorStore({name: self._tensors[name] for name in names})

    def equal(self, other: "TensorStore") -> bool:
        """逐位元相等 (名稱、shape、數值)"""
        if self.names() != list(other):
            return False
        return all(torch.equal(self._tensors[n], other[n]) for n in self._tensors)

    def max_abs_diff(self, other: "TensorStore") -> float:
        if self.shapes() != other.shapes():
            raise CheckpointError("兩個 store 的張量集合或 shape 不同")
        return max(
            (float((self._tensors[n] - other[n]).abs().max()) for n in self._tensors),
            default=0.0
        )

    def content_hash(self) -> str:
        """SHA-256 (名稱 + shape + 位元組內容)"""
        digest = hashlib.sha256()
        for name, tensor in self._tensors.items():
            digest.update(name.encode('utf-8'))
            digest.update(repr(tuple(tensor.shape)).encode('utf-8'))
            digest.update(tensor.detach().cpu().numpy().astype('<f4').tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class TensorRole:
    """張量角色: kind ∈ ROLE_KINDS, layer 只在層內角色出現"""

    kind: str
    layer: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ROLE_KINDS:
            raise CheckpointError(f"未知的角色: {self.kind}")
        if self.kind in ("attention", "ffn") and self.layer is None:
            raise CheckpointError(f"角色 {self.kind} 必須帶層索引")
        if self.kind in ("embedding", "lm_head", "other") and self.layer is not None:
            raise CheckpointError(f"角色 {self.kind} 不可帶層索引")

    def to_tag(self) -> str:
        return self.kind if self.layer is None else f"{self.kind}:{self.layer}"

    @classmethod
    def from_tag(cls, tag: str) -> "TensorRole":
        kind, _, layer = tag.partition(":")
        try:
            return cls(kind, int(layer) if layer else None)
        except ValueError as e:
            raise CheckpointError(f"無法解析角色標籤: {tag!r}") from e


@dataclass(frozen=True)
class ArchDescriptor:
    """結構描述: 維度資訊與張量角色表"""

    num_layers: int
    hidden_dim: int
    ffn_dim: int
    vocab_size: int
    num_heads: int
    tensor_roles: Dict[str, TensorRole] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        for key in ("num_layers", "hidden_dim", "ffn_dim", "vocab_size", "num_heads"):
            value = getattr(self, key)
            if not isinstance(value, int) or value <= 0:
                raise CheckpointError(f"{key} 必須是正整數, 實際為 {value!r}")
        for name, role in self.tensor_roles.items():
            if role.layer is not None and not 0 <= role.layer < self.num_layers:
                raise CheckpointError(
                    f"{name}: 層索引 {role.layer} 超出範圍 [0, {self.num_layers})"
                )

    def dims(self) -> Tuple[int, int, int, int, int]:
        return (self.num_layers, self.hidden_dim, self.ffn_dim, self.vocab_size, self.num_heads)

    def role_of(self, name: str) -> TensorRole:
        try:
            return self.tensor_roles[name]
        except KeyError:
            raise CheckpointError(f"張量 {name} 不在 tensor_roles 中") from None

    def names_of_kind(self, kind: str) -> List[str]:
        return sorted(name for name, role in self.tensor_roles.items() if role.kind == kind)

    def conformance_problems(self, store: Mapping) -> List[str]:
        """
        檢查 store 是否符合描述

        Args:
            store: TensorStore

        Returns:
            問題描述列表 (空列表代表符合)
        """
        problems = []
        store_names = set(store)
        role_names = set(self.tensor_roles)

        for name in sorted(store_names - role_names):
            problems.append(f"張量 {name} 缺少角色")
        for name in sorted(role_names - store_names):
            problems.append(f"manifest/tensor mismatch: 角色表中的 {name} 不在 store 中")

        layers_present = {role.layer for role in self.tensor_roles.values() if role.layer is not None}
        missing_layers = sorted(set(range(self.num_layers)) - layers_present)
        if missing_layers:
            problems.append(
                f"manifest/tensor mismatch: num_layers={self.num_layers} 但缺少第 {missing_layers} 層的張量"
            )

        for name in self.names_of_kind("embedding"):
            if name in store and tuple(store[name].shape) != (self.vocab_size, self.hidden_dim):
                problems.append(
                    f"{name}: embedding shape {list(store[name].shape)} 與 "
                    f"(vocab_size, hidden_dim)=({self.vocab_size}, {self.hidden_dim}) 不符"
                )

        return problems

    def require_conforms(self, store: Mapping):
        problems = self.conformance_problems(store)
        if problems:
            raise CheckpointError("; ".join(problems))

    def to_manifest(self) -> Dict:
        return {
            'num_layers': self.num_layers,
            'hidden_dim': self.hidden_dim,
            'ffn_dim': self.ffn_dim,
            'vocab_size': self.vocab_size,
            'num_heads': self.num_heads,
            'tensor_roles': {name: self.tensor_roles[name].to_tag() for name in sorted(self.tensor_roles)},
        }

    @classmethod
    def from_manifest(cls, manifest: Dict) -> "ArchDescriptor":
        try:
            return cls(
                num_layers=manifest['num_layers'],
                hidden_dim=manifest['hidden_dim'],
                ffn_dim=manifest['ffn_dim'],
                vocab_size=manifest['vocab_size'],
                num_heads=manifest['num_heads'],
                tensor_roles={
                    name: TensorRole.from_tag(tag)
                    for name, tag in manifest['tensor_roles'].items()
                },
            )
        except KeyError as e:
            raise CheckpointError(f"manifest 缺少欄位: {e.args[0]}") from None
