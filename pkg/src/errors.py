"""例外類別

所有 glueforge 的錯誤都繼承 GlueForgeError; 資料/參數類錯誤同時繼承 ValueError,
讓只捕捉內建例外的呼叫端仍能運作。
"""

from typing import Optional


class GlueForgeError(Exception):
    """glueforge 根例外"""


class CheckpointError(GlueForgeError, ValueError):
    """checkpoint 讀寫或結構驗證失敗"""


class SimilarityError(GlueForgeError, ValueError):
    """相似度計算失敗 (例如零範數張量)"""


class MergeError(GlueForgeError, ValueError):
    """合併核心或 recipe 參數錯誤"""


class SearchError(GlueForgeError, ValueError):
    """係數搜尋失敗 (例如目標函數回傳非有限值)"""


class RuntimeModelError(GlueForgeError, ValueError):
    """toy 模型執行錯誤"""


class MixtureError(GlueForgeError, ValueError):
    """MoE 組裝、路由或訓練錯誤"""


class UsageError(GlueForgeError):
    """CLI 使用方式錯誤 (exit code 1)"""


class PipelineError(GlueForgeError):
    """GLUE 流程中某個階段失敗"""

    def __init__(self, stage: str, message: str, cluster: Optional[int] = None):
        self.stage = stage
        self.cluster = cluster
        where = f"stage={stage}" + (f", cluster={cluster}" if cluster is not None else "")
        super().__init__(f"[{where}] {message}")
