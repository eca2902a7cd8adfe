"""
CMA-ES 最小化 (pycma)

包裝 cma.CMAEvolutionStrategy 的 ask/tell 迴圈, 加上:
    - 以「目標函數評估次數」計算的預算 (最後一代只評估剩餘數量)
    - box 限制: 取樣點先截斷到 [lower, upper] 再評估; tell 時回報原始樣本,
      目標值加上越界距離 (以 box 寬度正規化) 的平方
    - 初始步長以 box 寬度為單位
    - 以本地 numpy Generator 取樣, 不動到全域 np.random 狀態
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import cma
import numpy as np
from loguru import logger
from tqdm import tqdm

from src.errors import SearchError
from src.search.base import TraceEntry
from src.utils.config_loader import get_config

Bounds = Union[float, Sequence[float]]


@dataclass
class CMAResult:
    x_best: np.ndarray
    f_best: float
    trace: List[TraceEntry] = field(default_factory=list)
    evaluations: int = 0
    generations: int = 0
    stop_reason: str = ""


def default_popsize(dim: int) -> int:
    return 4 + int(math.floor(3 * math.log(dim)))


def _as_bound(value: Bounds, dim: int, what: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (dim,)).copy()
    if not np.all(np.isfinite(arr)):
        raise SearchError(f"{what} 含非有限值")
    return arr


def cmaes_minimize(objective: Callable[[np.ndarray], float], dim: int, budget: int, seed: int,
                   lower: Bounds = 0.0, upper: Bounds = 1.0, init: Optional[Sequence[float]] = None,
                   sigma0: Optional[float] = None, max_workers: int = 1,
                   label: str = "cmaes") -> CMAResult:
    """
    (μ/μ_w, λ)-CMA-ES 最小化

    Args:
        objective: x → 目標值 (越小越好); x 已截斷在 [lower, upper] 內
        dim: 維度 (>= 1)
        budget: 目標函數評估次數上限 (>= 1)
        seed: 隨機種子
        lower, upper: box 限制 (純量或每維一個)
        init: 初始平均值 (None 則在 box 內均勻隨機)
        sigma0: 初始步長 (預設 search.sigma0 × box 最大寬度)
        max_workers: > 1 時同一代的候選以執行緒平行評估 (結果仍依索引排序)
        label: trace 描述前綴

    Returns:
        CMAResult (x_best 為所有已評估點中目標值最小者)
    """
    if dim < 1:
        raise SearchError(f"dim 必須 >= 1, 實際為 {dim}")
    if budget < 1:
        raise SearchError(f"budget 必須 >= 1, 實際為 {budget}")
    lower = _as_bound(lower, dim, "lower")
    upper = _as_bound(upper, dim, "upper")
    if np.any(lower > upper):
        raise SearchError("lower 不可大於 upper")
    width = upper - lower
    if sigma0 is None:
        sigma0 = float(get_config().get_search_defaults().get('sigma0', 0.3))
        if np.max(width) > 0:
            sigma0 *= float(np.max(width))
    scale = np.where(width > 0, width, 1.0)

    rng = np.random.default_rng(int(seed))
    if init is None:
        x0 = rng.uniform(lower, upper)
    else:
        x0 = np.asarray(init, dtype=np.float64)
        if x0.shape != (dim,):
            raise SearchError(f"init 維度 {x0.shape} 與 dim {dim} 不符")

    popsize = default_popsize(dim)
    options = {
        'popsize': popsize,
        'randn': lambda lam, n: rng.standard_normal((lam, n)),
        'seed': np.nan,
        'CMA_mirrors': 0,
        'CMA_active': False,
        'verbose': -9,
        'verb_log': 0,
        'verb_disp': 0,
    }
    es = cma.CMAEvolutionStrategy(x0.tolist(), sigma0, options)

    trace: List[TraceEntry] = []
    x_best: Optional[np.ndarray] = None
    f_best = math.inf
    evaluations = 0
    generation = 0
    stop_reason = "budget"

    def evaluate_all(points: List[np.ndarray]) -> List[float]:
        if max_workers > 1 and len(points) > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                return list(pool.map(objective, points))
        return [objective(x) for x in points]

    progress = tqdm(total=budget, desc=label, disable=None)
    while evaluations < budget:
        solutions = es.ask()
        remaining = budget - evaluations
        partial = remaining < len(solutions)
        batch = solutions[:remaining] if partial else solutions

        clipped = [np.clip(np.asarray(x, dtype=np.float64), lower, upper) for x in batch]
        values = [float(v) for v in evaluate_all(clipped)]

        for index, (x, value) in enumerate(zip(clipped, values)):
            trial = evaluations + index
            if not math.isfinite(value):
                progress.close()
                logger.error(f"{label}: trial {trial} (generation {generation}, index {index}) 目標值非有限: {value}")
                raise SearchError(
                    f"non-finite objective at trial {trial} (generation {generation}, index {index}): {value}"
                )
            trace.append(TraceEntry(trial=trial, description=f"{label}:gen{generation}#{index}",
                                    fitness=value, params=x.tolist()))
            if value < f_best:
                f_best, x_best = value, x.copy()

        evaluations += len(batch)
        progress.update(len(batch))
        generation += 1

        if partial:
            break
        told = [value + float(np.sum(((np.asarray(x, dtype=np.float64) - c) / scale) ** 2))
                for x, c, value in zip(solutions, clipped, values)]
        es.tell(solutions, told)
        stop = es.stop()
        if stop:
            stop_reason = ",".join(sorted(stop))
            break
    progress.close()

    logger.info(f"{label}: {evaluations} 次評估, {generation} 代, 最佳目標值 {f_best:.6g} ({stop_reason})")
    return CMAResult(x_best=x_best, f_best=f_best, trace=trace, evaluations=evaluations,
                     generations=generation, stop_reason=stop_reason)
