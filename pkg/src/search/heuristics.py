"""
啟發式模型選擇 (貪婪合併)

三種策略共用同一個流程:
    1. 逐一評估單一模型, 依適應度遞減排序, 以最佳者為起點
    2. 依策略挑選下一個候選並嘗試合併
    3. 接受則更新目前的合併模型與係數, 否則丟棄候選

每個暫定合併都以「整個 zoo 的平坦係數向量」一次 apply_recipe 得出,
因此 SearchResult.recipe 可以逐位元重現 SearchResult.merged。
"""

from abc import ABC, abstractmethod
from typing import Callable, List, Optional, Sequence, Tuple

from loguru import logger

from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import SearchError
from src.merging.kernels import linear_merge
from src.merging.recipe import MergeRecipe, apply_recipe, whole_model_recipe
from src.search.base import FitnessEvaluator, SearchResult, TrialLog
from src.similarity.cosine import model_cosine
from src.utils.config_loader import get_config

ZooItems = Sequence[Tuple[str, TensorStore]]


def default_grid() -> List[float]:
    grid = get_config().get_search_defaults().get('grid') or [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    return [float(c) for c in grid]


def grid_coefficient_search(current: TensorStore, candidate: TensorStore, grid: Sequence[float],
                            evaluator: FitnessEvaluator, desc: ArchDescriptor, *,
                            current_fitness: Optional[float] = None,
                            blend: Optional[Callable[[float], TensorStore]] = None,
                            trial_log: Optional[TrialLog] = None,
                            label: str = "candidate") -> Tuple[float, float]:
    """
    在係數網格上尋找 (1−c)·current + c·candidate 的最佳 c

    Args:
        current: 目前的合併模型
        candidate: 候選模型
        grid: 係數網格, 值在 (0, 1)
        evaluator: 適應度
        desc: 結構描述
        current_fitness: 已知的 current 適應度 (None 則重新評估)
        blend: 自訂 c → 合併模型 (預設為上述兩模型線性插值)
        trial_log: 試驗紀錄 (None 則建立新的)
        label: trace 中的候選名稱

    Returns:
        (best_c, best_fitness); best_c = 0 代表保留 current (同分時選較小的 c)
    """
    grid = sorted(float(c) for c in grid)
    if not grid:
        raise SearchError("係數網格不可為空")
    for c in grid:
        if not 0.0 < c < 1.0:
            raise SearchError(f"網格值必須在 (0, 1) 之間, 實際為 {c}")

    log = trial_log or TrialLog(evaluator, desc)
    if blend is None:
        def blend(c: float) -> TensorStore:
            return linear_merge([current, candidate], [1.0 - c, c])

    if current_fitness is None:
        current_fitness = log.evaluate(current, f"baseline:{label}@c=0", params=[0.0]).fitness

    best_c, best_fitness = 0.0, float(current_fitness)
    for c in grid:
        entry = log.evaluate(blend(c), f"grid:{label}@c={c:g}", params=[c])
        if entry.fitness > best_fitness:
            best_c, best_fitness = c, entry.fitness

    return best_c, best_fitness


class BaseHeuristicSearch(ABC):
    """啟發式貪婪搜尋抽象基類"""

    name = "heuristic"

    def __init__(self, zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                 grid: Optional[Sequence[float]] = None):
        """
        Args:
            zoo: [(model_id, store), ...]
            desc: 共同的結構描述
            evaluator: 適應度
            grid: 係數網格 (預設讀取 search.grid)
        """
        if not zoo:
            raise SearchError("zoo 不可為空")
        self.ids = [model_id for model_id, _ in zoo]
        self.stores = [store for _, store in zoo]
        self.desc = desc
        self.evaluator = evaluator
        self.grid = sorted(grid) if grid is not None else default_grid()
        self.log = TrialLog(evaluator, desc)

        # 搜尋狀態
        self.coeffs: List[float] = [0.0] * len(self.stores)
        self.selected: List[int] = []
        self.merged: Optional[TensorStore] = None
        self.fitness: float = float("-inf")

        # 統計資訊
        self.stats = {
            'rounds': 0,
            'accepted': 0,
            'rejected': 0,
        }

    def recipe_for(self, coeffs: Sequence[float]) -> MergeRecipe:
        return whole_model_recipe("linear", coeffs, self.desc.num_layers, model_ids=list(self.ids))

    def merge_with(self, coeffs: Sequence[float]) -> TensorStore:
        return apply_recipe(self.stores, self.desc, None, self.recipe_for(coeffs))

    def rank_singles(self) -> List[int]:
        """逐一評估單一模型, 回傳依適應度遞減的索引 (同分保持原順序)"""
        scores = []
        for index, store in enumerate(self.stores):
            entry = self.log.evaluate(store, f"single:{self.ids[index]}")
            scores.append((index, entry.fitness))
        return [index for index, _ in sorted(scores, key=lambda item: -item[1])]

    @abstractmethod
    def next_candidate(self, pool: List[int]) -> int:
        """
        從剩餘候選中挑選下一個

        Args:
            pool: 尚未嘗試的模型索引 (依策略的初始順序)

        Returns:
            模型索引
        """
        pass

    @abstractmethod
    def try_candidate(self, candidate: int) -> Optional[Tuple[List[float], float, int]]:
        """
        嘗試加入候選

        Returns:
            接受時回傳 (新係數, 新適應度, 對應的 trace 索引); 拒絕時回傳 None
        """
        pass

    def search(self) -> SearchResult:
        logger.info("=" * 60)
        logger.info(f"啟發式搜尋: {self.name} ({len(self.stores)} 個模型)")
        logger.info("=" * 60)

        order = self.rank_singles()
        seed = order[0]
        seed_entry = self.log.entries[seed]
        seed_entry.accepted = True

        self.selected = [seed]
        self.coeffs = [0.0] * len(self.stores)
        self.coeffs[seed] = 1.0
        self.merged = self.merge_with(self.coeffs)
        self.fitness = seed_entry.fitness
        logger.info(f"起點: {self.ids[seed]} (fitness={self.fitness:.6f})")

        pool = order[1:]
        while pool:
            candidate = self.next_candidate(pool)
            pool.remove(candidate)
            self.stats['rounds'] += 1

            outcome = self.try_candidate(candidate)
            if outcome is None:
                self.stats['rejected'] += 1
                logger.info(f"✗ 拒絕 {self.ids[candidate]}")
                continue

            coeffs, fitness, trace_index = outcome
            self.log.entries[trace_index].accepted = True
            self.coeffs = coeffs
            self.selected.append(candidate)
            self.merged = self.merge_with(coeffs)
            self.fitness = fitness
            self.stats['accepted'] += 1
            logger.info(f"✓ 接受 {self.ids[candidate]} (fitness={fitness:.6f})")

        logger.info(f"搜尋完成: 選入 {len(self.selected)} 個模型, fitness={self.fitness:.6f}, "
                    f"試驗 {self.log.trials_used} 次")

        return SearchResult(
            selected_ids=[self.ids[i] for i in self.selected],
            recipe=self.recipe_for(self.coeffs),
            merged=self.merged,
            fitness=self.fitness,
            trace=list(self.log.entries),
            trials_used=self.log.trials_used,
            strategy=self.name,
        )

    def get_stats(self):
        """取得統計資訊"""
        return self.stats.copy()


class HeuristicAverage(BaseHeuristicSearch):
    """依單模型適應度遞減順序嘗試, 以等權平均合併, 適應度不下降即接受"""

    name = "avg"

    def next_candidate(self, pool: List[int]) -> int:
        return pool[0]

    def try_candidate(self, candidate: int):
        members = self.selected + [candidate]
        coeffs = [0.0] * len(self.stores)
        for index in members:
            coeffs[index] = 1.0 / len(members)

        entry = self.log.evaluate(self.merge_with(coeffs), f"avg:+{self.ids[candidate]}", params=coeffs)
        if entry.fitness >= self.fitness:
            return coeffs, entry.fitness, entry.trial
        return None


class HeuristicCoefficient(BaseHeuristicSearch):
    """每個候選以網格搜尋與目前合併模型的混合係數 c"""

    name = "coef"

    def next_candidate(self, pool: List[int]) -> int:
        return pool[0]

    def blended_coeffs(self, candidate: int, c: float) -> List[float]:
        coeffs = [(1.0 - c) * s for s in self.coeffs]
        coeffs[candidate] = c
        return coeffs

    def try_candidate(self, candidate: int):
        label = self.ids[candidate]
        start = self.log.trials_used
        best_c, best_fitness = grid_coefficient_search(
            self.merged, self.stores[candidate], self.grid, self.evaluator, self.desc,
            current_fitness=self.fitness,
            blend=lambda c: self.merge_with(self.blended_coeffs(candidate, c)),
            trial_log=self.log,
            label=label,
        )
        if best_c == 0.0:
            return None

        trace_index = next(
            entry.trial for entry in self.log.entries[start:]
            if entry.params == [best_c]
        )
        return self.blended_coeffs(candidate, best_c), best_fitness, trace_index


class HeuristicSimilarity(HeuristicCoefficient):
    """每輪挑選與目前合併模型最相似 (或最不相似) 的候選, 再做係數網格搜尋"""

    def __init__(self, zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                 grid: Optional[Sequence[float]] = None, order: str = "highest"):
        super().__init__(zoo, desc, evaluator, grid)
        if order not in ("highest", "lowest"):
            raise SearchError(f"order 必須是 highest 或 lowest, 實際為 {order}")
        self.order = order
        self.name = "sim-high" if order == "highest" else "sim-low"
        self.visit_order: List[str] = []

    def next_candidate(self, pool: List[int]) -> int:
        sims = [(model_cosine(self.merged, self.stores[index]), index) for index in sorted(pool)]
        if self.order == "highest":
            best = max(sims, key=lambda item: (item[0], -item[1]))
        else:
            best = min(sims, key=lambda item: (item[0], item[1]))
        logger.debug(f"相似度 ({self.order}): 選擇 {self.ids[best[1]]} (cos={best[0]:.6f})")
        self.visit_order.append(self.ids[best[1]])
        return best[1]


def heuristic_average(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator) -> SearchResult:
    """Heuristic (Average): 等權平均貪婪選擇"""
    return HeuristicAverage(zoo, desc, evaluator).search()


def heuristic_coefficient(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                          grid: Optional[Sequence[float]] = None) -> SearchResult:
    """Heuristic (Coefficient): 每個候選做係數網格搜尋"""
    return HeuristicCoefficient(zoo, desc, evaluator, grid).search()


def heuristic_similarity(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                         order: str = "highest", grid: Optional[Sequence[float]] = None) -> SearchResult:
    """Heuristic (Similarity): 依與目前合併模型的相似度挑選候選"""
    return HeuristicSimilarity(zoo, desc, evaluator, grid, order=order).search()
