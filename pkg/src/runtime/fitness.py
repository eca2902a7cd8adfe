"""代理適應度: toy 語料 perplexity 與解析式距離"""

import json
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from loguru import logger

from src.checkpoint.checkpoint_io import load_checkpoint
from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import RuntimeModelError, SearchError
from src.runtime.toy_model import BatchLike, TokenBatch, ToyConfig, as_token_batch, forward
from src.search.base import FitnessEvaluator


def load_corpus(path) -> TokenBatch:
    """讀取語料 JSON (token id 序列的列表)"""
    path = Path(path)
    if not path.exists():
        raise RuntimeModelError(f"語料檔案不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    return TokenBatch(data)


def sum_cross_entropy(logits: torch.Tensor, tokens: torch.Tensor) -> float:
    """下一個 token 的 cross-entropy 總和 (位置 0..T-2 預測 1..T-1)"""
    vocab = logits.shape[-1]
    return float(F.cross_entropy(
        logits[:, :-1, :].reshape(-1, vocab),
        tokens[:, 1:].reshape(-1),
        reduction='sum',
    ))


class PerplexityFitness(FitnessEvaluator):
    """fitness = −(語料上逐 token 平均 next-token cross-entropy)"""

    concurrent_safe = True

    def __init__(self, corpus: BatchLike, cfg: Optional[ToyConfig] = None, name: str = "toy-ppl"):
        super().__init__()
        self.corpus = as_token_batch(corpus)
        if any(len(seq) < 2 for seq in self.corpus):
            raise RuntimeModelError("語料序列長度必須 >= 2")
        self.cfg = cfg
        self.id = name

    def mean_cross_entropy(self, logits_fn) -> float:
        total = 0.0
        for _, group in self.corpus.by_length():
            tokens = group.to_tensor()
            total += sum_cross_entropy(logits_fn(group), tokens)
        return total / self.corpus.num_targets()

    def evaluate(self, store: TensorStore, desc: ArchDescriptor) -> float:
        cfg = self.cfg or ToyConfig.from_descriptor(desc)
        return -self.mean_cross_entropy(lambda group: forward(store, desc, group, cfg))

    def evaluate_mixture(self, spec, pool) -> float:
        """MoE 的適應度 (spec: MixtureSpec, pool: ExpertPool)"""
        from src.mixture.forward import mixture_forward  # mixture 模組會載入 runtime

        with self._lock:
            self.stats['calls'] += 1
        return -self.mean_cross_entropy(lambda group: mixture_forward(spec, pool, group))


def perplexity_fitness(corpus: BatchLike, cfg: Optional[ToyConfig] = None) -> PerplexityFitness:
    """
    建立 perplexity evaluator

    Args:
        corpus: token 序列 (長度皆 >= 2, 可不等長)
        cfg: toy runtime 設定 (預設由 ArchDescriptor 推導)
    """
    return PerplexityFitness(corpus, cfg=cfg)


class AnalyticDistanceFitness(FitnessEvaluator):
    """fitness = −(與目標權重的平均平方距離); 最佳值 0 出現在 store == target"""

    concurrent_safe = True

    def __init__(self, target: TensorStore, name: str = "analytic"):
        super().__init__()
        self.target = target
        self.id = name

    def evaluate(self, store: TensorStore, desc: ArchDescriptor) -> float:
        if store.shapes() != self.target.shapes():
            raise SearchError("候選模型與目標模型的張量不一致")
        total = 0.0
        count = 0
        for name in self.target:
            diff = store[name].double() - self.target[name].double()
            total += float(diff.pow(2).sum())
            count += diff.numel()
        return -total / count


def build_evaluator(spec: str, corpus: Optional[str] = None,
                    corpus_sequences: Optional[Sequence[Sequence[int]]] = None) -> FitnessEvaluator:
    """
    由字串規格建立 evaluator

    Args:
        spec: "toy-ppl" | "toy-ppl:<語料路徑>" | "analytic:target=<checkpoint 目錄>"
        corpus: toy-ppl 的語料路徑 (spec 未帶路徑時使用)
        corpus_sequences: 直接提供語料 (優先於路徑)

    Returns:
        FitnessEvaluator
    """
    kind, _, arg = spec.partition(":")

    if kind == "toy-ppl":
        if corpus_sequences is not None:
            return perplexity_fitness(corpus_sequences)
        path = arg or corpus
        if not path:
            raise SearchError("toy-ppl evaluator 需要語料路徑 (toy-ppl:<path> 或 --corpus)")
        logger.info(f"evaluator: toy-ppl, 語料 {path}")
        return perplexity_fitness(load_corpus(path))

    if kind == "analytic":
        key, _, value = arg.partition("=")
        if key != "target" or not value:
            raise SearchError(f"analytic evaluator 格式為 analytic:target=<dir>, 實際為 {spec!r}")
        target, _ = load_checkpoint(value)
        logger.info(f"evaluator: analytic, 目標 {value}")
        return AnalyticDistanceFitness(target, name=f"analytic:{Path(value).name}")

    raise SearchError(f"未知的 evaluator 規格: {spec!r}")
