"""權重空間 cosine 相似度"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from loguru import logger
from tqdm import tqdm

from src.checkpoint.tensor_store import TensorStore
from src.errors import SimilarityError
from src.utils.config_loader import get_config


def tensor_cosine(u: torch.Tensor, v: torch.Tensor, name: str = "") -> float:
    """
    單一張量的 cosine (攤平後 dot / 範數乘積, float64 計算)

    Raises:
        SimilarityError: 任一張量範數為 0
    """
    u64 = u.detach().reshape(-1).double()
    v64 = v.detach().reshape(-1).double()
    norm_u = float(torch.linalg.vector_norm(u64))
    norm_v = float(torch.linalg.vector_norm(v64))
    if norm_u == 0.0 or norm_v == 0.0:
        raise SimilarityError(f"零範數張量, 無法計算 cosine: {name or '<unnamed>'}")
    value = float(torch.dot(u64, v64)) / (norm_u * norm_v)
    return min(1.0, max(-1.0, value))


def model_cosine(a: TensorStore, b: TensorStore, flatten: Optional[bool] = None) -> float:
    """
    兩個模型的權重相似度

    Args:
        a, b: 張量集合與 shape 完全相同的 store
        flatten: False (預設) = 各張量 cosine 的未加權平均;
                 True = 所有張量串接後的單一 cosine

    Returns:
        [-1, 1] 之間的相似度
    """
    if flatten is None:
        flatten = bool(get_config().get_similarity_defaults().get('flatten', False))

    if a.shapes() != b.shapes():
        raise SimilarityError("兩個模型的張量集合或 shape 不同, 無法計算相似度")
    if len(a) == 0:
        raise SimilarityError("空的 TensorStore")

    if flatten:
        u = torch.cat([a[name].reshape(-1) for name in a])
        v = torch.cat([b[name].reshape(-1) for name in a])
        return tensor_cosine(u, v, name="<flattened>")

    total = 0.0
    for name in a:
        total += tensor_cosine(a[name], b[name], name)
    return total / len(a)


@dataclass
class SimilarityMatrix:
    """n×n 對稱相似度矩陣 (對角線為 1)"""

    values: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise SimilarityError(f"相似度矩陣必須是方陣, 實際 shape {self.values.shape}")
        if not self.ids:
            self.ids = [str(i) for i in range(self.n)]
        if len(self.ids) != self.n:
            raise SimilarityError(f"ids 數量 {len(self.ids)} 與矩陣大小 {self.n} 不符")
        if not np.all(np.isfinite(self.values)):
            raise SimilarityError("相似度矩陣含非有限值")
        if not np.array_equal(self.values, self.values.T):
            raise SimilarityError("相似度矩陣不對稱")
        if not np.allclose(np.diag(self.values), 1.0, atol=1e-6, rtol=0.0):
            raise SimilarityError("相似度矩陣對角線必須為 1")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def to_dict(self) -> Dict:
        return {'n': self.n, 'ids': list(self.ids), 'values': self.values.tolist()}

    @classmethod
    def from_dict(cls, data: Dict) -> "SimilarityMatrix":
        return cls(values=np.array(data['values'], dtype=np.float64), ids=list(data.get('ids') or []))


def similarity_matrix(zoo: Sequence[TensorStore], ids: Optional[Sequence[str]] = None,
                      flatten: Optional[bool] = None,
                      max_workers: Optional[int] = None) -> SimilarityMatrix:
    """
    計算 zoo 的兩兩相似度

    Args:
        zoo: 同結構模型列表
        ids: 模型識別名稱 (預設為索引)
        flatten: 見 model_cosine
        max_workers: 平行計算的執行緒數 (預設讀取 similarity.max_workers)

    Returns:
        SimilarityMatrix
    """
    n = len(zoo)
    if n == 0:
        raise SimilarityError("zoo 不可為空")
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    if max_workers is None:
        max_workers = int(get_config().get_similarity_defaults().get('max_workers', 1))

    pairs = list(combinations(range(n), 2))
    values = np.eye(n, dtype=np.float64)

    def compute(pair):
        i, j = pair
        try:
            return model_cosine(zoo[i], zoo[j], flatten=flatten)
        except SimilarityError as e:
            logger.error(f"相似度計算失敗: ({ids[i]}, {ids[j]}) - {e}")
            raise SimilarityError(f"pair ({ids[i]}, {ids[j]}): {e}") from e

    logger.info(f"計算相似度矩陣: {n} 個模型, {len(pairs)} 組配對")

    progress = tqdm(total=len(pairs), desc="similarity", disable=None)
    if max_workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = []
            for value in pool.map(compute, pairs):
                results.append(value)
                progress.update(1)
    else:
        results = []
        for pair in pairs:
            results.append(compute(pair))
            progress.update(1)
    progress.close()

    for (i, j), value in zip(pairs, results):
        values[i, j] = value
        values[j, i] = value

    return SimilarityMatrix(values=values, ids=ids)

