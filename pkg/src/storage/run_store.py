"""執行輸出目錄管理 (clusters / result / report / manifest)"""

import json
import platform
from pathlib import Path
from typing import Any, Dict, Optional

from loguru import logger

from src import __version__
from src.errors import GlueForgeError
from src.utils.helpers import write_json


class RunStore:
    """
    一次執行的輸出目錄

    <run_dir>/
        manifest.json
        clusters.json
        clusters/<i>/result.json, trace.jsonl, checkpoint/
        mixture/
        final/
        report.json
    """

    def __init__(self, run_dir: str = "runs"):
        """
        Args:
            run_dir: 輸出目錄
        """
        self.run_dir = Path(run_dir)

    def ensure(self) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        return self.run_dir

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def cluster_dir(self, index: int) -> Path:
        return self.path("clusters", str(index))

    def save_json(self, name: str, data: Any) -> Path:
        """
        儲存決定性 JSON (排序 key, 固定縮排)

        Args:
            name: 相對於 run_dir 的路徑
            data: 可 JSON 化的資料
        """
        target = self.path(name)
        try:
            write_json(target, data)
        except OSError as e:
            logger.error(f"儲存 {target} 失敗: {e}")
            raise
        logger.debug(f"已儲存: {target}")
        return target

    def load_json(self, name: str) -> Optional[Dict[str, Any]]:
        """
        載入 JSON; 檔案不存在時回傳 None

        Args:
            name: 相對於 run_dir 的路徑
        """
        target = self.path(name)
        if not target.exists():
            logger.info(f"檔案不存在: {target}")
            return None
        try:
            with open(target, 'r', encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            logger.error(f"載入 {target} 失敗: {e}")
            raise GlueForgeError(f"malformed JSON: {target}: {e}") from e

    def write_manifest(self, command: str, config: Dict[str, Any], seed: Optional[int],
                       status: str = "ok", error: Optional[str] = None) -> Path:
        """
        寫入 run manifest (命令、設定、seed、版本)

        Args:
            command: 子命令名稱
            config: 解析後的參數
            seed: 隨機種子
            status: ok / error
            error: 錯誤訊息
        """
        manifest = self._create_manifest(command, config, seed)
        manifest['status'] = status
        if error is not None:
            manifest['error'] = error
        return self.save_json("manifest.json", manifest)

    def _create_manifest(self, command: str, config: Dict[str, Any], seed: Optional[int]) -> Dict[str, Any]:
        return {
            'command': command,
            'config': config,
            'seed': seed,
            'toolkit': 'glueforge',
            'version': __version__,
            'python': platform.python_version(),
        }
