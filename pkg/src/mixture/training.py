"""
Router 訓練

只更新 router 權重 (專家權重全部凍結), 目標為語料上的 next-token cross-entropy。
訓練時以完整 softmax 混合所有專家 (可微分), 推論時才套用 Top-K。
"""

import math
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from loguru import logger
from tqdm import tqdm

from src.errors import MixtureError
from src.mixture.builders import ExpertPool, MixtureSpec
from src.mixture.forward import frame_config, mixture_logits, require_experts
from src.mixture.router import RouterSpec
from src.runtime.toy_model import BatchLike, TokenBatch, as_token_batch, check_inputs
from src.utils.config_loader import get_config


class RouterTrainer:
    """MLP router 的語言模型訓練"""

    def __init__(self, spec: MixtureSpec, pool: ExpertPool, corpus: BatchLike,
                 lr: Optional[float] = None, seed: int = 0, batch_size: Optional[int] = None):
        """
        Args:
            spec: 使用 MLP router 的 MixtureSpec
            pool: 專家權重
            corpus: 訓練語料 (每個序列長度 >= 2)
            lr: Adam 學習率 (預設讀取 mixture.train.lr)
            seed: 抽樣 mini-batch 的隨機種子
            batch_size: 每步的序列數 (None 則每步使用全部語料)
        """
        linear = [index for index, router in enumerate(spec.routers) if router.kind == "linear"]
        if linear:
            raise MixtureError(f"linear prompt router 不需訓練 (router {linear})")
        require_experts(spec, pool)

        train_defaults = get_config().get_mixture_defaults().get('train') or {}
        self.spec = spec
        self.pool = pool
        self.corpus = as_token_batch(corpus)
        if any(len(seq) < 2 for seq in self.corpus):
            raise MixtureError("訓練語料序列長度必須 >= 2")
        frame = spec.base_id if spec.base_id is not None else spec.experts[0]
        check_inputs(pool.desc(frame), self.corpus, frame_config(spec, pool))

        self.lr = float(lr if lr is not None else train_defaults.get('lr', 0.01))
        self.seed = int(seed)
        self.batch_size = batch_size
        self.generator = torch.Generator().manual_seed(self.seed)

        # 統計資訊
        self.stats = {
            'steps': 0,
            'initial_loss': None,
            'final_loss': None,
        }
        self.losses: List[float] = []

    def _minibatch(self) -> TokenBatch:
        if self.batch_size is None or self.batch_size >= len(self.corpus):
            return self.corpus
        order = torch.randperm(len(self.corpus), generator=self.generator)[:self.batch_size]
        return TokenBatch([self.corpus.sequences[int(i)] for i in order])

    def loss(self, spec: MixtureSpec, batch: TokenBatch) -> torch.Tensor:
        """soft mixing 下的平均 next-token cross-entropy (可反向傳播)"""
        total = None
        for _, group in batch.by_length():
            tokens = group.to_tensor()
            logits = mixture_logits(spec, self.pool, tokens, soft=True)
            vocab = logits.shape[-1]
            term = F.cross_entropy(logits[:, :-1, :].reshape(-1, vocab), tokens[:, 1:].reshape(-1),
                                   reduction='sum')
            total = term if total is None else total + term
        return total / batch.num_targets()

    def train(self, steps: Optional[int] = None) -> List[RouterSpec]:
        """
        執行訓練

        Args:
            steps: 步數 (預設讀取 mixture.train.steps); 0 則原樣回傳 router

        Returns:
            更新後的 router (順序同 spec.routers)
        """
        if steps is None:
            steps = int((get_config().get_mixture_defaults().get('train') or {}).get('steps', 200))
        if steps < 0:
            raise MixtureError(f"steps 必須 >= 0, 實際為 {steps}")
        if steps == 0:
            return list(self.spec.routers)

        params: List[Dict[str, torch.Tensor]] = [
            {key: tensor.detach().clone().requires_grad_(True) for key, tensor in router.weights.items()}
            for router in self.spec.routers
        ]
        trainable = self.spec.with_routers([
            router.with_weights(weights) for router, weights in zip(self.spec.routers, params)
        ])
        optimizer = torch.optim.Adam([t for weights in params for t in weights.values()], lr=self.lr)

        logger.info("=" * 60)
        logger.info(f"Router 訓練: level={self.spec.level}, {len(params)} 個 router, steps={steps}, lr={self.lr}")
        logger.info("=" * 60)

        for step in tqdm(range(steps), desc="router", disable=None):
            optimizer.zero_grad()
            loss = self.loss(trainable, self._minibatch())
            value = float(loss.detach())
            if not math.isfinite(value):
                logger.error(f"router 訓練第 {step} 步 loss 非有限值: {value}")
                raise MixtureError(f"non-finite loss at step {step}: {value}")
            loss.backward()
            optimizer.step()

            self.losses.append(value)
            self.stats['steps'] += 1
            if self.stats['initial_loss'] is None:
                self.stats['initial_loss'] = value
            logger.debug(f"step {step}: loss={value:.6f}")

        with torch.no_grad():
            final = float(self.loss(trainable, self.corpus))
        self.stats['final_loss'] = final
        logger.info(f"✓ Router 訓練完成: loss {self.stats['initial_loss']:.6f} → {final:.6f}")

        return [
            router.with_weights({key: tensor.detach().clone() for key, tensor in weights.items()})
            for router, weights in zip(self.spec.routers, params)
        ]

    def get_stats(self):
        """取得統計資訊"""
        return self.stats.copy()


def train_router_lm(spec: MixtureSpec, pool: ExpertPool, corpus: BatchLike, steps: Optional[int] = None,
                    lr: Optional[float] = None, seed: int = 0,
                    batch_size: Optional[int] = None) -> List[RouterSpec]:
    """
    以語言模型目標訓練 router (只更新 router)

    Args:
        spec: 使用 MLP router 的 MixtureSpec
        pool: 專家權重
        corpus: 訓練語料
        steps: 步數
        lr: 學習率
        seed: 隨機種子
        batch_size: 每步序列數

    Returns:
        更新後的 router 列表
    """
    return RouterTrainer(spec, pool, corpus, lr=lr, seed=seed, batch_size=batch_size).train(steps)
