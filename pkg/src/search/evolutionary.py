"""以 CMA-ES 搜尋合併係數 (evolutionary merge) 與啟發式結果的局部精煉"""

from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import MergeError, SearchError
from src.merging.recipe import (
    DENSITY_METHODS,
    METHODS,
    MergeRecipe,
    apply_recipe,
    num_groups,
    required_coefficient_count,
)
from src.search.base import FitnessEvaluator, SearchResult, TraceEntry
from src.search.cmaes import Bounds, cmaes_minimize
from src.search.heuristics import ZooItems
from src.utils.config_loader import get_config


def search_dimension(k: int, num_layers: int, group_size: int, method: str = "linear",
                     search_densities: Optional[bool] = None) -> int:
    """
    搜尋向量維度: k · (num_layers/n + 1), ties / dare_ta 搜尋 density 時再加 k
    """
    if search_densities is None:
        search_densities = method in DENSITY_METHODS
    return required_coefficient_count(k, num_layers, group_size) + (k if search_densities else 0)


def _mark_improvements(trace: List[TraceEntry]):
    best = float("-inf")
    for entry in trace:
        if entry.fitness > best:
            best = entry.fitness
            entry.accepted = True


def evolutionary_merge(zoo: ZooItems, desc: ArchDescriptor, evaluator: FitnessEvaluator,
                       base: Optional[TensorStore] = None, method: str = "linear",
                       group_size: Optional[int] = None, budget: Optional[int] = None, seed: int = 0,
                       init: Optional[Sequence[float]] = None, search_densities: Optional[bool] = None,
                       lower: Bounds = 0.0, upper: Bounds = 1.0,
                       max_workers: Optional[int] = None) -> SearchResult:
    """
    CMA-ES 搜尋 recipe 係數

    Args:
        zoo: [(model_id, store), ...]
        desc: 結構描述
        evaluator: 適應度
        base: base 模型 (task_arithmetic / ties / dare_ta)
        method: 合併方法
        group_size: 每組相鄰層數 n (預設 num_layers, 即整個模型一組)
        budget: evaluator 呼叫次數 (預設讀取 search.budget)
        seed: 隨機種子 (同時作為 dare 的 seed)
        init: 初始係數向量 (排列同 MergeRecipe.flat())
        search_densities: 是否搜尋每個模型的 density (預設 ties/dare_ta 為 True)
        lower, upper: 每維的 box 限制 (必須在 [0, 1] 之內)
        max_workers: evaluator 可平行時的執行緒數 (預設讀取 search.max_workers)

    Returns:
        SearchResult
    """
    if method not in METHODS:
        raise SearchError(f"未知的合併方法: {method}")
    if not zoo:
        raise SearchError("zoo 不可為空")

    search_defaults = get_config().get_search_defaults()
    budget = int(budget if budget is not None else search_defaults.get('budget', 200))
    group_size = group_size or desc.num_layers
    if search_densities is None:
        search_densities = method in DENSITY_METHODS
    if search_densities and method not in DENSITY_METHODS:
        raise SearchError(f"方法 {method} 沒有 density 參數")

    ids = [model_id for model_id, _ in zoo]
    stores = [store for _, store in zoo]
    k = len(stores)
    try:
        num_groups(desc.num_layers, group_size)
    except MergeError as e:
        raise SearchError(str(e)) from e
    dim = search_dimension(k, desc.num_layers, group_size, method, search_densities)

    lower_arr = np.broadcast_to(np.asarray(lower, dtype=np.float64), (dim,))
    upper_arr = np.broadcast_to(np.asarray(upper, dtype=np.float64), (dim,))
    if np.any(lower_arr < 0.0) or np.any(upper_arr > 1.0):
        raise SearchError("係數搜尋範圍必須在 [0, 1] 之內")
    if init is not None and len(init) != dim:
        raise SearchError(f"init 長度 {len(init)} 與搜尋維度 {dim} 不符")

    if max_workers is None:
        max_workers = int(search_defaults.get('max_workers', 1))
    if not evaluator.concurrent_safe:
        max_workers = 1

    merge_defaults = get_config().get_merge_defaults()

    def to_recipe(x) -> MergeRecipe:
        return MergeRecipe.from_vector(
            list(x), method, k, desc.num_layers, group_size, search_densities,
            ties_trim_frac=float(merge_defaults.get('ties_trim_frac', 0.2)),
            dare_drop_p=float(merge_defaults.get('dare_drop_p', 0.5)),
            seed=int(seed),
            model_ids=list(ids),
        )

    def objective(x: np.ndarray) -> float:
        merged = apply_recipe(stores, desc, base, to_recipe(x))
        return -evaluator(merged, desc)

    logger.info("=" * 60)
    logger.info(f"Evolutionary merge: method={method}, k={k}, n={group_size}, dim={dim}, budget={budget}")
    logger.info("=" * 60)

    result = cmaes_minimize(objective, dim, budget, seed, lower=lower_arr, upper=upper_arr,
                            init=init, max_workers=max_workers, label=f"evo-{method}")

    trace = [
        TraceEntry(trial=entry.trial, description=entry.description, fitness=-entry.fitness,
                   params=entry.params)
        for entry in result.trace
    ]
    _mark_improvements(trace)

    recipe = to_recipe(result.x_best)
    merged = apply_recipe(stores, desc, base, recipe)
    selected = [ids[i] for i, row in enumerate(recipe.coefficients) if any(c != 0.0 for c in row)]

    logger.info(f"✓ Evolutionary merge 完成: fitness={-result.f_best:.6f}")
    return SearchResult(
        selected_ids=selected,
        recipe=recipe,
        merged=merged,
        fitness=-result.f_best,
        trace=trace,
        trials_used=result.evaluations,
        strategy="evo",
    )


def expand_coefficients(recipe: MergeRecipe, num_layers: int, group_size: int) -> List[List[float]]:
    """將 recipe 係數展開成 group_size 的欄位配置 (層欄沿用原本所屬組的係數)"""
    if group_size == recipe.group_size:
        return [list(row) for row in recipe.coefficients]
    cols = num_groups(num_layers, group_size)
    expanded = []
    for row in recipe.coefficients:
        layer_cols = [row[(g * group_size) // recipe.group_size] for g in range(cols)]
        expanded.append(layer_cols + [row[-1]])
    return expanded


def warm_start_refine(heuristic_result: SearchResult, zoo: ZooItems, desc: ArchDescriptor,
                      evaluator: FitnessEvaluator, delta: Optional[float] = None,
                      budget: Optional[int] = None, seed: int = 0,
                      group_size: Optional[int] = None) -> SearchResult:
    """
    以啟發式結果為起點做 CMA-ES 局部精煉

    每個係數限制在 [max(0, c−delta), min(1, c+delta)] 內; 只有精煉後適應度嚴格較佳時才取代輸入。

    Args:
        heuristic_result: linear recipe 的搜尋結果 (列順序與 zoo 相同)
        zoo: [(model_id, store), ...]
        desc: 結構描述
        evaluator: 適應度
        delta: 係數變動上限 (預設讀取 search.warm_delta)
        budget: evaluator 呼叫次數
        seed: 隨機種子
        group_size: 精煉時使用的分組 (預設沿用輸入 recipe)

    Returns:
        精煉結果與輸入中適應度較高者
    """
    recipe = heuristic_result.recipe
    if recipe.method != "linear":
        raise SearchError(f"warm_start_refine 需要 linear recipe, 實際為 {recipe.method}")
    if recipe.k != len(zoo):
        raise SearchError(f"recipe 模型數 {recipe.k} 與 zoo 大小 {len(zoo)} 不符")
    if delta is None:
        delta = float(get_config().get_search_defaults().get('warm_delta', 0.1))
    if delta < 0:
        raise SearchError(f"delta 必須 >= 0, 實際為 {delta}")

    group_size = group_size or recipe.group_size
    init = np.array([c for row in expand_coefficients(recipe, desc.num_layers, group_size) for c in row])
    lower = np.maximum(0.0, init - delta)
    upper = np.minimum(1.0, init + delta)
    init = np.clip(init, lower, upper)

    logger.info(f"Warm-start 精煉: delta={delta}, 起點 fitness={heuristic_result.fitness:.6f}")
    refined = evolutionary_merge(zoo, desc, evaluator, method="linear", group_size=group_size,
                                 budget=budget, seed=seed, init=init.tolist(),
                                 lower=lower, upper=upper)
    refined.strategy = "warm"

    if refined.fitness > heuristic_result.fitness:
        logger.info(f"✓ 精煉改善 fitness: {heuristic_result.fitness:.6f} → {refined.fitness:.6f}")
        return refined

    logger.info("精煉未改善, 沿用啟發式結果")
    return heuristic_result
