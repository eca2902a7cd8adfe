"""
小規模對照實驗 (bench.json)

    strategies  - avg / coef / sim-high / sim-low 與最佳單一模型比較
    methods     - linear / task_arithmetic / ties / dare_ta 在相同預算下的 evolutionary merge
    group-size  - 不同相鄰層分組大小
    warm        - 啟發式 + 局部精煉 vs 單純 evolutionary merge
    mixtures    - 各 mixture 方法代碼
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from loguru import logger

from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import SearchError
from src.mixture.builders import ExpertPool, PromptSets, build_mixture
from src.search.base import FitnessEvaluator, SearchResult
from src.search.evolutionary import evolutionary_merge, warm_start_refine
from src.search.heuristics import ZooItems, heuristic_average, heuristic_coefficient, heuristic_similarity
from src.utils.helpers import write_json

BENCH_KINDS = ("strategies", "methods", "group-size", "warm", "mixtures")
BENCH_METHODS = ("linear", "task_arithmetic", "ties", "dare_ta")


@dataclass
class BenchTable:
    """一次對照實驗的結果表"""

    kind: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    best_single_id: Optional[str] = None
    best_single_fitness: Optional[float] = None

    def add(self, name: str, fitness: float, **extra):
        row = {'name': name, 'fitness': float(fitness)}
        if self.best_single_fitness is not None:
            row['gain'] = float(fitness) - self.best_single_fitness
        row.update(extra)
        self.rows.append(row)
        logger.info(f"  {name:<24} fitness={fitness:.6f}")

    def best(self) -> Dict[str, Any]:
        if not self.rows:
            raise SearchError(f"bench {self.kind} 沒有任何結果")
        return max(self.rows, key=lambda row: row['fitness'])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'best_single_id': self.best_single_id,
            'best_single_fitness': self.best_single_fitness,
            'rows': list(self.rows),
        }

    def save(self, path) -> Path:
        return write_json(Path(path), self.to_dict())


def _best_single(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator, kind: str) -> BenchTable:
    if not zoo:
        raise SearchError("zoo 不可為空")
    scores = [(model_id, evaluator(store, desc)) for model_id, store in zoo]
    best = max(range(len(scores)), key=lambda i: (scores[i][1], -i))
    table = BenchTable(kind=kind, best_single_id=scores[best][0], best_single_fitness=scores[best][1])
    logger.info("=" * 60)
    logger.info(f"Bench {kind}: 最佳單一模型 {scores[best][0]} (fitness={scores[best][1]:.6f})")
    logger.info("=" * 60)
    return table


def _search_extra(result: SearchResult) -> Dict[str, Any]:
    return {
        'selected_ids': list(result.selected_ids),
        'trials_used': result.trials_used,
        'merged_hash': result.merged.content_hash(),
    }


def compare_strategies(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator) -> BenchTable:
    """四種啟發式選擇策略"""
    table = _best_single(zoo, desc, evaluator, "strategies")
    runs = [
        ("avg", lambda: heuristic_average(zoo, desc, evaluator)),
        ("coef", lambda: heuristic_coefficient(zoo, desc, evaluator)),
        ("sim-high", lambda: heuristic_similarity(zoo, desc, evaluator, order="highest")),
        ("sim-low", lambda: heuristic_similarity(zoo, desc, evaluator, order="lowest")),
    ]
    for name, run in runs:
        result = run()
        table.add(name, result.fitness, **_search_extra(result))
    return table


def compare_merge_methods(zoo: ZooItems, desc: ArchDescriptor, base: Optional[TensorStore],
                          evaluator: FitnessEvaluator, budget: Optional[int] = None, seed: int = 0,
                          methods: Sequence[str] = BENCH_METHODS) -> BenchTable:
    """
    相同預算下比較合併方法 (ties / dare_ta 同時搜尋 density)

    Args:
        base: task_arithmetic / ties / dare_ta 需要; 沒有 base 時略過這些方法
    """
    table = _best_single(zoo, desc, evaluator, "methods")
    for method in methods:
        if method != "linear" and base is None:
            logger.warning(f"沒有 base 模型, 略過 {method}")
            continue
        result = evolutionary_merge(zoo, desc, evaluator, base=base, method=method, budget=budget, seed=seed)
        table.add(method, result.fitness, **_search_extra(result))
    return table


def sweep_group_size(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                     sizes: Optional[Sequence[int]] = None, budget: Optional[int] = None,
                     seed: int = 0) -> BenchTable:
    """
    不同相鄰層分組大小的 linear evolutionary merge

    Args:
        sizes: 分組大小 (預設為所有能整除 num_layers 的值)
    """
    if sizes is None:
        sizes = [n for n in range(1, desc.num_layers + 1) if desc.num_layers % n == 0]
    table = _best_single(zoo, desc, evaluator, "group-size")
    for n in sizes:
        result = evolutionary_merge(zoo, desc, evaluator, method="linear", group_size=n, budget=budget, seed=seed)
        table.add(f"n={n}", result.fitness, group_size=n, dim=len(result.recipe.flat()), **_search_extra(result))
    return table


def compare_warm_start(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                       budget: Optional[int] = None, seed: int = 0, delta: Optional[float] = None) -> BenchTable:
    """Heuristic (Coefficient)、其精煉結果與同預算 evolutionary merge"""
    table = _best_single(zoo, desc, evaluator, "warm")
    heuristic = heuristic_coefficient(zoo, desc, evaluator)
    table.add("coef", heuristic.fitness, **_search_extra(heuristic))
    refined = warm_start_refine(heuristic, zoo, desc, evaluator, delta=delta, budget=budget, seed=seed)
    table.add("coef+refine", refined.fitness, refined=refined is not heuristic, **_search_extra(refined))
    evo = evolutionary_merge(zoo, desc, evaluator, method="linear", budget=budget, seed=seed)
    table.add("evo", evo.fitness, **_search_extra(evo))
    return table


def compare_mixtures(pool: ExpertPool, codes: Sequence[str], evaluator: FitnessEvaluator,
                     prompts: Optional[PromptSets] = None, seed: int = 0) -> BenchTable:
    """
    依方法代碼組裝 mixture 並評估 (evaluator 必須支援 evaluate_mixture)

    Args:
        pool: 專家
        codes: 例如 ["M-L-S", "F-L-T", "Hybrid F-M-S"]
        prompts: linear router 的 prompt
    """
    if not hasattr(evaluator, 'evaluate_mixture'):
        raise SearchError(f"evaluator {evaluator.id} 無法評估 mixture")

    scores = [(model_id, evaluator(pool.store(model_id), pool.desc(model_id))) for model_id in pool.ids]
    best = max(range(len(scores)), key=lambda i: (scores[i][1], -i))
    table = BenchTable(kind="mixtures", best_single_id=scores[best][0], best_single_fitness=scores[best][1])
    logger.info("=" * 60)
    logger.info(f"Bench mixtures: {len(codes)} 種方法, 最佳單一專家 {scores[best][0]}")
    logger.info("=" * 60)

    for code in codes:
        spec = build_mixture(pool, code, prompts=prompts, seed=seed)
        fitness = evaluator.evaluate_mixture(spec, pool)
        table.add(code, fitness, level=spec.level, top_k=spec.top_k, hybrid_k=spec.hybrid_k)
    return table
