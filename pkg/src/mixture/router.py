"""
Router: 路由輸入 → 專家分佈

兩種結構 (皆無 bias):
    linear: logits = W·x,             W: (num_experts, in_dim), 由 prompt 向量初始化, 不需訓練
    mlp:    logits = W₂·ReLU(W₁·x),   W₁: (hidden, in_dim), W₂: (num_experts, hidden)
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import torch
import torch.nn.functional as F

from src.errors import MixtureError
from src.utils.config_loader import get_config

ROUTER_KINDS = ("linear", "mlp")
MLP_INIT_STD = 0.02

_WEIGHT_KEYS = {
    'linear': ('weight',),
    'mlp': ('hidden', 'out'),
}


@dataclass(frozen=True)
class RouterSpec:
    """單一 router 的結構與權重"""

    kind: str
    in_dim: int
    num_experts: int
    weights: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ROUTER_KINDS:
            raise MixtureError(f"未知的 router 種類: {self.kind}")
        if self.in_dim <= 0 or self.num_experts <= 0:
            raise MixtureError(f"router 維度必須為正: in_dim={self.in_dim}, num_experts={self.num_experts}")
        if set(self.weights) != set(_WEIGHT_KEYS[self.kind]):
            raise MixtureError(f"{self.kind} router 權重必須是 {_WEIGHT_KEYS[self.kind]}, 實際為 {sorted(self.weights)}")
        for key, expected in self.expected_shapes().items():
            actual = tuple(self.weights[key].shape)
            if actual != expected:
                raise MixtureError(f"router 權重 {key} shape {actual} 與預期 {expected} 不符")

    @property
    def hidden(self) -> Optional[int]:
        return int(self.weights['hidden'].shape[0]) if self.kind == "mlp" else None

    def expected_shapes(self) -> Dict[str, tuple]:
        if self.kind == "linear":
            return {'weight': (self.num_experts, self.in_dim)}
        hidden = int(self.weights['hidden'].shape[0])
        return {'hidden': (hidden, self.in_dim), 'out': (self.num_experts, hidden)}

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return router_logits(self.kind, self.weights, x)

    def with_weights(self, weights: Mapping[str, torch.Tensor]) -> "RouterSpec":
        return RouterSpec(self.kind, self.in_dim, self.num_experts,
                          {key: weights[key] for key in _WEIGHT_KEYS[self.kind]})

    def equal(self, other: "RouterSpec") -> bool:
        """逐位元相等"""
        return (
            self.kind == other.kind
            and self.in_dim == other.in_dim
            and self.num_experts == other.num_experts
            and set(self.weights) == set(other.weights)
            and all(torch.equal(self.weights[key], other.weights[key]) for key in self.weights)
        )

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'in_dim': self.in_dim,
            'num_experts': self.num_experts,
            'hidden': self.hidden,
        }

    def copy(self) -> "RouterSpec":
        return RouterSpec(self.kind, self.in_dim, self.num_experts,
                          {key: value.detach().clone() for key, value in self.weights.items()})

    def to_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        # safetensors 不接受共用記憶體的張量
        return {f"{prefix}.{key}": self.weights[key].detach().clone().contiguous() for key in _WEIGHT_KEYS[self.kind]}

    @classmethod
    def from_tensors(cls, meta: Dict, tensors: Mapping[str, torch.Tensor], prefix: str) -> "RouterSpec":
        kind = meta.get('kind')
        if kind not in ROUTER_KINDS:
            raise MixtureError(f"未知的 router 種類: {kind}")
        try:
            weights = {key: tensors[f"{prefix}.{key}"] for key in _WEIGHT_KEYS[kind]}
        except KeyError as e:
            raise MixtureError(f"router 權重缺少 {e.args[0]}") from None
        return cls(kind, int(meta['in_dim']), int(meta['num_experts']), weights)


def router_logits(kind: str, weights: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """x: (..., in_dim) → (..., num_experts); 可反向傳播"""
    if kind == "linear":
        weight = weights['weight']
        if x.shape[-1] != weight.shape[1]:
            raise MixtureError(f"router 輸入維度 {x.shape[-1]} 與 in_dim {weight.shape[1]} 不符")
        return x @ weight.T
    hidden = weights['hidden']
    if x.shape[-1] != hidden.shape[1]:
        raise MixtureError(f"router 輸入維度 {x.shape[-1]} 與 in_dim {hidden.shape[1]} 不符")
    return F.relu(x @ hidden.T) @ weights['out'].T


def sample_embedding(token_embeddings) -> torch.Tensor:
    """
    序列的平均 embedding (sample routing 的輸入)

    Args:
        token_embeddings: (..., seq_len, hidden) 張量或向量列表

    Returns:
        (..., hidden)
    """
    x = torch.as_tensor(token_embeddings, dtype=torch.float32)
    if x.dim() < 2 or x.shape[-2] == 0:
        raise MixtureError("sample_embedding 需要非空的 embedding 序列")
    return x.mean(dim=-2)


def topk_weights(probs: torch.Tensor, k: int) -> torch.Tensor:
    """保留最大的 k 個機率並重新正規化, 其餘為 0; 同分時索引小者優先"""
    num_experts = probs.shape[-1]
    if not 1 <= k <= num_experts:
        raise MixtureError(f"top_k 必須在 [1, {num_experts}] 之間, 實際為 {k}")
    order = torch.sort(probs, dim=-1, descending=True, stable=True).indices[..., :k]
    selected = torch.gather(probs, -1, order)
    selected = selected / selected.sum(dim=-1, keepdim=True)
    return torch.zeros_like(probs).scatter(-1, order, selected)


def route_topk(router: RouterSpec, x: torch.Tensor, k: int) -> torch.Tensor:
    """
    Top-K 路由

    Args:
        router: RouterSpec
        x: 路由輸入 (..., in_dim)
        k: 選取的專家數

    Returns:
        (..., num_experts) 權重: k 個正值且總和為 1, 其餘為 0
    """
    x = torch.as_tensor(x, dtype=torch.float32)
    probs = torch.softmax(router.logits(x), dim=-1)
    return topk_weights(probs, k)


def build_linear_router(prompt_sets: Sequence[Sequence[Sequence[int]]],
                        embedding_matrix: torch.Tensor) -> RouterSpec:
    """
    以 prompt 向量建立免訓練的 linear router

    每個專家: prompt 內 token embedding 取平均 → 對 prompt 取平均 → L2 正規化, 作為權重矩陣的一列

    Args:
        prompt_sets: 每個專家一組 prompt (token id 列表)
        embedding_matrix: (vocab_size, hidden) 共用 embedding

    Returns:
        RouterSpec (kind = linear)
    """
    if not prompt_sets:
        raise MixtureError("至少需要一個專家的 prompt 集合")
    vocab_size, hidden = embedding_matrix.shape
    table = embedding_matrix.detach().double()

    rows = []
    for expert, prompts in enumerate(prompt_sets):
        if not prompts:
            raise MixtureError(f"專家 {expert} 的 prompt 集合為空")
        pooled = []
        for prompt in prompts:
            ids = [int(t) for t in prompt]
            if not ids:
                raise MixtureError(f"專家 {expert} 含空 prompt")
            bad = [t for t in ids if not 0 <= t < vocab_size]
            if bad:
                raise MixtureError(f"專家 {expert} 的 prompt 含超出範圍的 token id {bad[:3]} (vocab_size={vocab_size})")
            pooled.append(table[torch.tensor(ids, dtype=torch.long)].mean(dim=0))
        vector = torch.stack(pooled).mean(dim=0)
        norm = float(vector.norm())
        if norm < 1e-12:
            raise MixtureError(f"專家 {expert} 的 prompt 向量範數為 0")
        rows.append((vector / norm).float())

    return RouterSpec("linear", int(hidden), len(rows), {'weight': torch.stack(rows)})


def build_mlp_router(in_dim: int, hidden: Optional[int], num_experts: int, seed: int = 0) -> RouterSpec:
    """
    建立隨機初始化 (N(0, 0.02²)) 的 MLP router

    Args:
        in_dim: 輸入維度
        hidden: 隱藏層寬度 (None 則讀取 mixture.router_hidden)
        num_experts: 專家數
        seed: 隨機種子

    Returns:
        RouterSpec (kind = mlp)
    """
    if hidden is None:
        hidden = int(get_config().get_mixture_defaults().get('router_hidden', 16))
    if in_dim <= 0 or hidden <= 0 or num_experts <= 0:
        raise MixtureError(f"router 維度必須為正: in_dim={in_dim}, hidden={hidden}, num_experts={num_experts}")
    generator = torch.Generator().manual_seed(int(seed))
    first = torch.randn((hidden, in_dim), generator=generator, dtype=torch.float32) * MLP_INIT_STD
    second = torch.randn((num_experts, hidden), generator=generator, dtype=torch.float32) * MLP_INIT_STD
    return RouterSpec("mlp", int(in_dim), int(num_experts), {'hidden': first, 'out': second})


def selected_experts(weights: torch.Tensor) -> List[int]:
    """單一權重向量中被選中的專家索引 (遞增)"""
    return [int(i) for i in torch.nonzero(weights > 0).flatten().tolist()]
