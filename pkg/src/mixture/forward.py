"""MoE forward 與路由紀錄"""

from dataclasses import dataclass
from typing import Callable, List, Optional

import torch
from loguru import logger

from src.mixture.builders import ExpertPool, MixtureSpec
from src.mixture.router import RouterSpec, sample_embedding, selected_experts, topk_weights
from src.runtime.toy_model import (
    BatchLike,
    ToyConfig,
    as_token_batch,
    attention,
    check_inputs,
    decoder_block,
    embed,
    ffn,
    ffn_input,
    lm_head,
    logits_for_tokens,
)

# recorder(layer, weights): layer 為 None 代表 model level; weights 為 (B, E) 或 (B, T, E)
Recorder = Callable[[Optional[int], torch.Tensor], None]


@dataclass
class RoutingDecision:
    """單一路由決策"""

    layer: Optional[int]
    sequence: int
    position: Optional[int]
    experts: List[str]
    weights: List[float]

    def to_dict(self):
        return {
            'layer': self.layer,
            'sequence': self.sequence,
            'position': self.position,
            'experts': list(self.experts),
            'weights': list(self.weights),
        }


def _gate(router: RouterSpec, x: torch.Tensor, k: int, soft: bool) -> torch.Tensor:
    probs = torch.softmax(router.logits(x), dim=-1)
    return probs if soft else topk_weights(probs, k)


def _active(weights: torch.Tensor, soft: bool) -> bool:
    return soft or bool((weights > 0).any())


def frame_config(spec: MixtureSpec, pool: ExpertPool) -> ToyConfig:
    frame = spec.base_id if spec.base_id is not None else spec.experts[0]
    return ToyConfig.from_descriptor(pool.desc(frame))


def _model_level(spec: MixtureSpec, pool: ExpertPool, tokens: torch.Tensor,
                 soft: bool, recorder: Optional[Recorder]) -> torch.Tensor:
    first = pool.store(spec.experts[0])
    sample = sample_embedding(embed(first, tokens))
    weights = _gate(spec.routers[0], sample, spec.top_k, soft)
    if recorder is not None:
        recorder(None, weights)

    out = None
    for index, model_id in enumerate(spec.experts):
        w = weights[:, index]
        if not _active(w, soft):
            continue
        store, desc = pool.entry(model_id)
        logits = logits_for_tokens(store, desc.num_layers, tokens, ToyConfig.from_descriptor(desc))
        term = w[:, None, None] * logits
        out = term if out is None else out + term
    return out


def _block_level(spec: MixtureSpec, pool: ExpertPool, tokens: torch.Tensor, cfg: ToyConfig,
                 soft: bool, recorder: Optional[Recorder]) -> torch.Tensor:
    base = pool.store(spec.base_id)
    x = embed(base, tokens)
    sample = sample_embedding(x)

    for layer in range(spec.num_layers):
        weights = _gate(spec.router_for_layer(layer), sample, spec.top_k, soft)
        if recorder is not None:
            recorder(layer, weights)
        out = None
        for index, model_id in enumerate(spec.experts):
            w = weights[:, index]
            if not _active(w, soft):
                continue
            term = w[:, None, None] * decoder_block(pool.store(model_id), layer, x, cfg)
            out = term if out is None else out + term
        x = out
    return lm_head(base, x, cfg)


def _ffn_level(spec: MixtureSpec, pool: ExpertPool, tokens: torch.Tensor, cfg: ToyConfig,
               soft: bool, recorder: Optional[Recorder]) -> torch.Tensor:
    base = pool.store(spec.base_id)
    merged = pool.merged_prefix(spec) if spec.is_hybrid else None

    x = embed(base, tokens)
    sample = sample_embedding(x) if spec.router_input == "sample" else None

    for layer in range(spec.num_layers):
        if layer < spec.hybrid_k:
            x = decoder_block(merged, layer, x, cfg)
            continue

        x = x + attention(base, layer, x, cfg)
        h = ffn_input(base, layer, x, cfg)

        router = spec.router_for_layer(layer)
        if sample is not None:
            weights = _gate(router, sample, spec.top_k, soft)
            if recorder is not None:
                recorder(layer, weights)
            weights = weights[:, None, :]
        else:
            weights = _gate(router, h, spec.top_k, soft)
            if recorder is not None:
                recorder(layer, weights)

        out = None
        for index, model_id in enumerate(spec.experts):
            w = weights[..., index:index + 1]
            if not _active(w, soft):
                continue
            term = w * ffn(pool.store(model_id), layer, h)
            out = term if out is None else out + term
        x = x + out
    return lm_head(base, x, cfg)


def mixture_logits(spec: MixtureSpec, pool: ExpertPool, tokens: torch.Tensor,
                   cfg: Optional[ToyConfig] = None, soft: bool = False,
                   recorder: Optional[Recorder] = None) -> torch.Tensor:
    """
    不檢查輸入、可反向傳播的 mixture forward

    Args:
        spec: MixtureSpec
        pool: 專家權重
        tokens: (B, T) LongTensor
        cfg: 執行設定 (預設由 base 的描述還原; model level 每個專家用自己的設定)
        soft: True 時以完整 softmax 混合全部專家 (router 訓練用), 否則 Top-K
        recorder: 路由紀錄 callback

    Returns:
        logits (B, T, vocab_size)
    """
    if spec.level == "model":
        return _model_level(spec, pool, tokens, soft, recorder)
    cfg = cfg or frame_config(spec, pool)
    if spec.level == "block":
        return _block_level(spec, pool, tokens, cfg, soft, recorder)
    return _ffn_level(spec, pool, tokens, cfg, soft, recorder)


def require_experts(spec: MixtureSpec, pool: ExpertPool):
    for model_id in spec.experts:
        pool.entry(model_id)


def mixture_forward(spec: MixtureSpec, pool: ExpertPool, batch: BatchLike,
                    cfg: Optional[ToyConfig] = None) -> torch.Tensor:
    """
    MoE 因果 forward (Top-K 路由)

    Args:
        spec: MixtureSpec
        pool: 專家權重 (須含 spec.experts 全部)
        batch: 等長序列
        cfg: 執行設定

    Returns:
        logits, shape (batch, seq_len, vocab_size)
    """
    require_experts(spec, pool)
    frame = spec.base_id if spec.base_id is not None else spec.experts[0]
    frame_cfg = cfg or frame_config(spec, pool)
    batch = check_inputs(pool.desc(frame), batch, frame_cfg)

    with torch.no_grad():
        return mixture_logits(spec, pool, batch.to_tensor(), cfg=cfg, soft=False)


def routing_decisions(spec: MixtureSpec, pool: ExpertPool, batch: BatchLike) -> List[RoutingDecision]:
    """
    各層 (model level 為整段) 的路由決策

    sample routing 每個序列一筆 (position 為 None), token routing 每個位置一筆。
    序列可不等長; sequence 為原始索引。
    """
    require_experts(spec, pool)
    batch = as_token_batch(batch)
    frame = spec.base_id if spec.base_id is not None else spec.experts[0]
    cfg = frame_config(spec, pool)
    check_inputs(pool.desc(frame), batch, cfg)

    decisions: List[RoutingDecision] = []
    for indices, group in batch.by_length():
        def record(layer: Optional[int], weights: torch.Tensor):
            for row, sequence in enumerate(indices):
                if weights.dim() == 2:
                    decisions.append(_decision(spec, layer, sequence, None, weights[row]))
                else:
                    for position in range(weights.shape[1]):
                        decisions.append(_decision(spec, layer, sequence, position, weights[row, position]))

        with torch.no_grad():
            mixture_logits(spec, pool, group.to_tensor(), soft=False, recorder=record)

    decisions.sort(key=lambda d: (-1 if d.layer is None else d.layer, d.sequence,
                                  -1 if d.position is None else d.position))
    logger.debug(f"路由決策: {len(decisions)} 筆")
    return decisions


def _decision(spec: MixtureSpec, layer: Optional[int], sequence: int, position: Optional[int],
              weights: torch.Tensor) -> RoutingDecision:
    chosen = selected_experts(weights)
    return RoutingDecision(
        layer=layer,
        sequence=sequence,
        position=position,
        experts=[spec.experts[i] for i in chosen],
        weights=[float(weights[i]) for i in chosen],
    )
