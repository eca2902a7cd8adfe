"""以相似度門檻做 complete-linkage 聚合分群"""

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from src.errors import SimilarityError
from src.similarity.cosine import SimilarityMatrix
from src.utils.config_loader import get_config


@dataclass
class ClusterReport:
    """分群結果: clusters 依最小成員索引排序, 成員遞增排序"""

    clusters: List[List[int]]
    threshold: float
    min_intra_sim: List[float] = field(default_factory=list)
    ids: List[str] = field(default_factory=list)

    def cluster_ids(self, index: int) -> List[str]:
        return [self.ids[i] for i in self.clusters[index]] if self.ids else [str(i) for i in self.clusters[index]]

    def to_dict(self) -> Dict:
        return {
            'threshold': self.threshold,
            'clusters': [list(c) for c in self.clusters],
            'cluster_ids': [self.cluster_ids(i) for i in range(len(self.clusters))],
            'min_intra_sim': list(self.min_intra_sim),
            'ids': list(self.ids),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ClusterReport":
        return cls(
            clusters=[list(c) for c in data['clusters']],
            threshold=float(data['threshold']),
            min_intra_sim=list(data.get('min_intra_sim', [])),
            ids=list(data.get('ids', [])),
        )


def _min_pairwise(values: np.ndarray, members: List[int]) -> float:
    if len(members) < 2:
        return 1.0
    return float(min(values[i, j] for i, j in combinations(members, 2)))


def cluster_zoo(matrix: SimilarityMatrix, threshold: Optional[float] = None) -> ClusterReport:
    """
    Complete-linkage 聚合分群

    從單點 cluster 開始, 每輪合併「跨 cluster 最小相似度」最大的一對,
    直到沒有任何一對的最小相似度 >= threshold。同分時選 (min 索引, min 索引)
    字典序最小的一對。

    Args:
        matrix: 相似度矩陣
        threshold: 門檻 (0, 1], 預設讀取 similarity.threshold

    Returns:
        ClusterReport
    """
    if threshold is None:
        threshold = float(get_config().get_similarity_defaults().get('threshold', 0.95))
    if not 0.0 < threshold <= 1.0:
        raise SimilarityError(f"threshold 必須在 (0, 1] 之間, 實際為 {threshold}")

    values = matrix.values
    clusters: List[List[int]] = [[i] for i in range(matrix.n)]

    while len(clusters) > 1:
        best_pair = None
        best_link = -np.inf

        # clusters 依最小成員排序, 依序掃描即為字典序; 同分保留先出現者
        for a, b in combinations(range(len(clusters)), 2):
            link = float(values[np.ix_(clusters[a], clusters[b])].min())
            if link >= threshold and link > best_link:
                best_link = link
                best_pair = (a, b)

        if best_pair is None:
            break

        a, b = best_pair
        merged = sorted(clusters[a] + clusters[b])
        logger.debug(f"合併 cluster {clusters[a]} + {clusters[b]} (linkage={best_link:.4f})")
        clusters = [c for idx, c in enumerate(clusters) if idx not in best_pair] + [merged]
        clusters.sort(key=lambda c: c[0])

    min_intra = [_min_pairwise(values, members) for members in clusters]

    logger.info(f"分群完成: {matrix.n} 個模型 → {len(clusters)} 個 cluster (threshold={threshold})")
    return ClusterReport(clusters=clusters, threshold=threshold, min_intra_sim=min_intra, ids=list(matrix.ids))
