"""搜尋共用元件: FitnessEvaluator 抽象基類、試驗紀錄與搜尋結果"""

import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from loguru import logger

from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import SearchError
from src.merging.recipe import MergeRecipe


class FitnessEvaluator(ABC):
    """
    代理適應度 (越高越好)

    子類別實作 evaluate(); deterministic 代表相同 store 必得相同值,
    concurrent_safe 代表可在多執行緒同時呼叫。
    """

    id: str = "evaluator"
    deterministic: bool = True
    concurrent_safe: bool = False

    def __init__(self):
        # 統計資訊
        self.stats = {
            'calls': 0,
        }
        self._lock = threading.Lock()

    @abstractmethod
    def evaluate(self, store: TensorStore, desc: ArchDescriptor) -> float:
        """
        計算適應度

        Args:
            store: 候選權重
            desc: 結構描述

        Returns:
            適應度 (有限浮點數)
        """
        pass

    def __call__(self, store: TensorStore, desc: ArchDescriptor) -> float:
        with self._lock:
            self.stats['calls'] += 1
        return float(self.evaluate(store, desc))

    def get_stats(self) -> Dict[str, int]:
        """取得統計資訊"""
        return self.stats.copy()


@dataclass
class TraceEntry:
    """單次試驗紀錄"""

    trial: int
    description: str
    fitness: float
    accepted: bool = False
    params: Optional[List[float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'trial': self.trial,
            'description': self.description,
            'fitness': self.fitness,
            'accepted': self.accepted,
            'params': list(self.params) if self.params is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TraceEntry":
        return cls(
            trial=int(data['trial']),
            description=data['description'],
            fitness=float(data['fitness']),
            accepted=bool(data.get('accepted', False)),
            params=data.get('params'),
        )


class TrialLog:
    """包裝 evaluator: 每次評估都計為一次 trial 並寫入 trace"""

    def __init__(self, evaluator: FitnessEvaluator, desc: ArchDescriptor, budget: Optional[int] = None):
        self.evaluator = evaluator
        self.desc = desc
        self.budget = budget
        self.entries: List[TraceEntry] = []

    @property
    def trials_used(self) -> int:
        return len(self.entries)

    def remaining(self) -> Optional[int]:
        return None if self.budget is None else self.budget - self.trials_used

    def evaluate(self, store: TensorStore, description: str,
                 params: Optional[List[float]] = None) -> TraceEntry:
        if self.budget is not None and self.trials_used >= self.budget:
            raise SearchError(f"已用盡試驗預算 {self.budget}")
        fitness = self.evaluator(store, self.desc)
        return self.record(description, fitness, params)

    def record(self, description: str, fitness: float, params: Optional[List[float]] = None) -> TraceEntry:
        if not math.isfinite(fitness):
            logger.error(f"trial {self.trials_used} ({description}) 的適應度非有限值: {fitness}")
            raise SearchError(f"non-finite fitness at trial {self.trials_used} ({description}): {fitness}")
        entry = TraceEntry(trial=self.trials_used, description=description, fitness=float(fitness),
                           params=list(params) if params is not None else None)
        self.entries.append(entry)
        logger.debug(f"trial {entry.trial}: {description} → {fitness:.6f}")
        return entry


@dataclass
class SearchResult:
    """搜尋結果"""

    selected_ids: List[str]
    recipe: MergeRecipe
    merged: TensorStore
    fitness: float
    trace: List[TraceEntry] = field(default_factory=list)
    trials_used: int = 0
    strategy: str = ""

    def accepted_fitness(self) -> List[float]:
        return [entry.fitness for entry in self.trace if entry.accepted]

    def to_dict(self) -> Dict[str, Any]:
        """序列化 (不含權重; 權重另存 checkpoint)"""
        return {
            'strategy': self.strategy,
            'selected_ids': list(self.selected_ids),
            'recipe': self.recipe.to_dict(),
            'fitness': self.fitness,
            'trials_used': self.trials_used,
            'merged_hash': self.merged.content_hash(),
        }
