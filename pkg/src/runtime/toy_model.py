"""
Toy decoder-only transformer (Llama 結構)

權重全部放在 TensorStore 中, forward 為純函數 (沒有 nn.Module 狀態):
    embedding → L × [RMSNorm → RoPE attention → 殘差 → RMSNorm → SwiGLU FFN → 殘差]
              → 最終 RMSNorm → lm_head
"""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from src.checkpoint.roles import derive_tensor_roles
from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import RuntimeModelError
from src.utils.config_loader import get_config

EMBED = "model.embed_tokens.weight"
FINAL_NORM = "model.norm.weight"
LM_HEAD = "lm_head.weight"

ATTENTION_PARTS = ("self_attn.q_proj.weight", "self_attn.k_proj.weight",
                   "self_attn.v_proj.weight", "self_attn.o_proj.weight")
FFN_PARTS = ("mlp.gate_proj.weight", "mlp.up_proj.weight", "mlp.down_proj.weight")
NORM_PARTS = ("input_layernorm.weight", "post_attention_layernorm.weight")


def layer_key(layer: int, part: str) -> str:
    return f"model.layers.{layer}.{part}"


@dataclass(frozen=True)
class ToyConfig:
    """Toy 模型結構"""

    num_layers: int = 4
    hidden_dim: int = 32
    ffn_dim: int = 64
    num_heads: int = 2
    vocab_size: int = 256
    max_seq: int = 64
    init_std: float = 0.02
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for key in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size", "max_seq"):
            value = getattr(self, key)
            if not isinstance(value, int) or value <= 0:
                raise RuntimeModelError(f"{key} 必須是正整數, 實際為 {value!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise RuntimeModelError(f"hidden_dim {self.hidden_dim} 必須能被 num_heads {self.num_heads} 整除")
        if self.head_dim % 2 != 0:
            raise RuntimeModelError(f"head_dim {self.head_dim} 必須是偶數 (RoPE)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def tensor_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """所有張量名稱與 shape (HF 慣例: Linear 權重為 (out, in))"""
        h, f = self.hidden_dim, self.ffn_dim
        shapes = {EMBED: (self.vocab_size, h), FINAL_NORM: (h,), LM_HEAD: (self.vocab_size, h)}
        for layer in range(self.num_layers):
            for part in ATTENTION_PARTS:
                shapes[layer_key(layer, part)] = (h, h)
            shapes[layer_key(layer, "mlp.gate_proj.weight")] = (f, h)
            shapes[layer_key(layer, "mlp.up_proj.weight")] = (f, h)
            shapes[layer_key(layer, "mlp.down_proj.weight")] = (h, f)
            for part in NORM_PARTS:
                shapes[layer_key(layer, part)] = (h,)
        return shapes

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ToyConfig":
        defaults = get_config().get_toy_defaults()
        merged = {**defaults, **(data or {})}
        known = {key: merged[key] for key in cls.__dataclass_fields__ if key in merged}
        for key in ("init_std", "rope_theta", "norm_eps"):
            if key in known:
                known[key] = float(known[key])
        return cls(**known)

    @classmethod
    def from_descriptor(cls, desc: ArchDescriptor) -> "ToyConfig":
        """由 ArchDescriptor 還原執行用設定 (max_seq 等執行參數取自 config)"""
        return cls.from_dict({
            'num_layers': desc.num_layers,
            'hidden_dim': desc.hidden_dim,
            'ffn_dim': desc.ffn_dim,
            'num_heads': desc.num_heads,
            'vocab_size': desc.vocab_size,
        })


class TokenBatch:
    """token id 序列集合"""

    def __init__(self, sequences: Sequence[Sequence[int]]):
        self.sequences = [[int(t) for t in seq] for seq in sequences]
        if not self.sequences:
            raise RuntimeModelError("TokenBatch 不可為空")
        if any(len(seq) == 0 for seq in self.sequences):
            raise RuntimeModelError("TokenBatch 含空序列")

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self) -> Iterator[List[int]]:
        return iter(self.sequences)

    def validate(self, vocab_size: int):
        for index, seq in enumerate(self.sequences):
            bad = [t for t in seq if not 0 <= t < vocab_size]
            if bad:
                raise RuntimeModelError(f"序列 {index} 含超出範圍的 token id {bad[:3]} (vocab_size={vocab_size})")

    def is_rectangular(self) -> bool:
        return len({len(seq) for seq in self.sequences}) == 1

    def to_tensor(self) -> torch.Tensor:
        if not self.is_rectangular():
            raise RuntimeModelError("序列長度不一致, 請先用 by_length() 分組")
        return torch.tensor(self.sequences, dtype=torch.long)

    def by_length(self) -> List[Tuple[List[int], "TokenBatch"]]:
        """依長度分組: [(原始索引列表, 子 batch), ...], 依長度遞增"""
        groups: Dict[int, List[int]] = {}
        for index, seq in enumerate(self.sequences):
            groups.setdefault(len(seq), []).append(index)
        return [
            (indices, TokenBatch([self.sequences[i] for i in indices]))
            for _, indices in sorted(groups.items())
        ]

    def num_targets(self) -> int:
        return sum(len(seq) - 1 for seq in self.sequences)


BatchLike = Union[TokenBatch, Sequence[Sequence[int]], torch.Tensor]


def as_token_batch(batch: BatchLike) -> TokenBatch:
    if isinstance(batch, TokenBatch):
        return batch
    if isinstance(batch, torch.Tensor):
        return TokenBatch(batch.tolist())
    return TokenBatch(batch)


# ---------------------------------------------------------------------------
# 權重建構
# ---------------------------------------------------------------------------

def build_toy_model(cfg: Optional[ToyConfig] = None, seed: int = 0) -> Tuple[TensorStore, ArchDescriptor]:
    """
    建立隨機初始化的 toy 模型

    Args:
        cfg: ToyConfig (預設讀取 config toy 區段)
        seed: 隨機種子

    Returns:
        (TensorStore, ArchDescriptor); 相同 seed 產生逐位元相同的權重
    """
    cfg = cfg or ToyConfig.from_dict({})
    generator = torch.Generator().manual_seed(int(seed))

    tensors = {}
    for name, shape in sorted(cfg.tensor_shapes().items()):
        tensors[name] = torch.randn(shape, generator=generator, dtype=torch.float32) * cfg.init_std

    store = TensorStore(tensors)
    desc = ArchDescriptor(
        num_layers=cfg.num_layers,
        hidden_dim=cfg.hidden_dim,
        ffn_dim=cfg.ffn_dim,
        vocab_size=cfg.vocab_size,
        num_heads=cfg.num_heads,
        tensor_roles=derive_tensor_roles(store.names(), scheme="llama"),
    )
    desc.require_conforms(store)
    return store, desc


def make_finetuned_variant(store: TensorStore, rel_noise: float, seed: int) -> TensorStore:
    """
    產生可合併的「微調」變體: 每個張量加上 rel_noise × RMS(張量) 的高斯雜訊

    Args:
        store: 原始權重
        rel_noise: 相對雜訊強度
        seed: 隨機種子
    """
    if rel_noise < 0:
        raise RuntimeModelError(f"rel_noise 必須 >= 0, 實際為 {rel_noise}")
    generator = torch.Generator().manual_seed(int(seed))

    def perturb(name: str, tensor: torch.Tensor) -> torch.Tensor:
        rms = float(tensor.double().pow(2).mean().sqrt())
        noise = torch.randn(tensor.shape, generator=generator, dtype=torch.float32)
        return tensor + noise * (rel_noise * rms)

    return store.map(perturb)


# ---------------------------------------------------------------------------
# Forward 元件 (mixture forward 共用)
# ---------------------------------------------------------------------------

def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def rope_tables(seq_len: int, head_dim: int, theta: float) -> Tuple[torch.Tensor, torch.Tensor]:
    inv_freq = 1.0 / (theta ** (torch.arange(0, head_dim, 2, dtype=torch.float32) / head_dim))
    positions = torch.arange(seq_len, dtype=torch.float32)
    freqs = torch.outer(positions, inv_freq)
    emb = torch.cat([freqs, freqs], dim=-1)
    return emb.cos(), emb.sin()


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def embed(store: TensorStore, tokens: torch.Tensor) -> torch.Tensor:
    return F.embedding(tokens, store[EMBED])


def attention(store: TensorStore, layer: int, x: torch.Tensor, cfg: ToyConfig) -> torch.Tensor:
    """pre-norm 因果自注意力 (不含殘差)"""
    batch, seq_len, hidden = x.shape
    heads, head_dim = cfg.num_heads, cfg.head_dim

    h = rms_norm(x, store[layer_key(layer, "input_layernorm.weight")], cfg.norm_eps)

    def project(part: str) -> torch.Tensor:
        y = h @ store[layer_key(layer, part)].T
        return y.view(batch, seq_len, heads, head_dim).transpose(1, 2)

    q = project("self_attn.q_proj.weight")
    k = project("self_attn.k_proj.weight")
    v = project("self_attn.v_proj.weight")

    cos, sin = rope_tables(seq_len, head_dim, cfg.rope_theta)
    q = q * cos + rotate_half(q) * sin
    k = k * cos + rotate_half(k) * sin

    scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
    causal = torch.ones(seq_len, seq_len, dtype=torch.bool).triu(diagonal=1)
    scores = scores.masked_fill(causal, float("-inf"))
    probs = torch.softmax(scores, dim=-1)

    out = (probs @ v).transpose(1, 2).reshape(batch, seq_len, hidden)
    return out @ store[layer_key(layer, "self_attn.o_proj.weight")].T


def ffn_input(store: TensorStore, layer: int, x: torch.Tensor, cfg: ToyConfig) -> torch.Tensor:
    """FFN 前的 RMSNorm 輸出 (token routing 的輸入)"""
    return rms_norm(x, store[layer_key(layer, "post_attention_layernorm.weight")], cfg.norm_eps)


def ffn(store: TensorStore, layer: int, h: torch.Tensor) -> torch.Tensor:
    """SwiGLU FFN: down(silu(gate(h)) * up(h))"""
    gate = h @ store[layer_key(layer, "mlp.gate_proj.weight")].T
    up = h @ store[layer_key(layer, "mlp.up_proj.weight")].T
    return (F.silu(gate) * up) @ store[layer_key(layer, "mlp.down_proj.weight")].T


def decoder_block(store: TensorStore, layer: int, x: torch.Tensor, cfg: ToyConfig) -> torch.Tensor:
    x = x + attention(store, layer, x, cfg)
    return x + ffn(store, layer, ffn_input(store, layer, x, cfg))


def lm_head(store: TensorStore, x: torch.Tensor, cfg: ToyConfig) -> torch.Tensor:
    return rms_norm(x, store[FINAL_NORM], cfg.norm_eps) @ store[LM_HEAD].T


def check_inputs(desc: ArchDescriptor, batch: BatchLike, cfg: ToyConfig) -> TokenBatch:
    batch = as_token_batch(batch)
    batch.validate(desc.vocab_size)
    longest = max(len(seq) for seq in batch)
    if longest > cfg.max_seq:
        raise RuntimeModelError(f"序列長度 {longest} 超過 max_seq {cfg.max_seq}")
    return batch


def forward(store: TensorStore, desc: ArchDescriptor, batch: BatchLike,
            cfg: Optional[ToyConfig] = None) -> torch.Tensor:
    """
    因果 forward

    Args:
        store: 權重 (須符合 desc)
        desc: 結構描述
        batch: 等長序列 (TokenBatch / list of lists / LongTensor)
        cfg: 執行設定 (預設由 desc 還原)

    Returns:
        logits, shape (batch, seq_len, vocab_size)
    """
    cfg = cfg or ToyConfig.from_descriptor(desc)
    batch = check_inputs(desc, batch, cfg)

    with torch.no_grad():
        return logits_for_tokens(store, desc.num_layers, batch.to_tensor(), cfg)


def logits_for_tokens(store: TensorStore, num_layers: int, tokens: torch.Tensor, cfg: ToyConfig) -> torch.Tensor:
    """不檢查輸入、可反向傳播的 forward (訓練 fixture 與 router 訓練使用)"""
    x = embed(store, tokens)
    for layer in range(num_layers):
        x = decoder_block(store, layer, x, cfg)
    return lm_head(store, x, cfg)
