"""JSONL 儲存處理模組 (搜尋 trace)"""

import json
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence

from loguru import logger

from src.search.base import TraceEntry


class JSONLHandler:
    """JSONL 檔案處理器: 每行一筆 JSON (key 排序)"""

    def __init__(self, data_dir: str = "runs"):
        """
        初始化處理器

        Args:
            data_dir: 根目錄 (相對路徑以此為基準)
        """
        self.data_dir = Path(data_dir)

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.data_dir / path

    def write_items(self, path, items: Sequence[Dict[str, Any]], mode: str = 'w') -> Path:
        """
        寫入資料到 JSONL

        Args:
            path: 檔案路徑
            items: 資料列表
            mode: 寫入模式 ('w' 覆蓋, 'a' 追加)
        """
        jsonl_path = self.resolve(path)
        jsonl_path.parent.mkdir(parents=True, exist_ok=True)

        try:
            with open(jsonl_path, mode, encoding='utf-8') as f:
                for item in items:
                    f.write(json.dumps(item, ensure_ascii=False, sort_keys=True) + '\n')
        except OSError as e:
            logger.error(f"寫入 JSONL 失敗: {e}")
            raise

        logger.debug(f"寫入 {len(items)} 筆資料到 {jsonl_path}")
        return jsonl_path

    def stream_read(self, path) -> Iterator[Dict[str, Any]]:
        """
        串流讀取資料 (逐行讀取, 略過無法解析的行)

        Yields:
            每筆資料
        """
        jsonl_path = self.resolve(path)
        if not jsonl_path.exists():
            logger.warning(f"JSONL 檔案不存在: {jsonl_path}")
            return

        with open(jsonl_path, 'r', encoding='utf-8') as f:
            for line_num, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as e:
                    logger.error(f"JSON 解析失敗 (第 {line_num} 行): {e}")

    def read_all(self, path) -> List[Dict[str, Any]]:
        return list(self.stream_read(path))

    def count_items(self, path) -> int:
        jsonl_path = self.resolve(path)
        if not jsonl_path.exists():
            return 0
        with open(jsonl_path, 'r', encoding='utf-8') as f:
            return sum(1 for line in f if line.strip())

    def filter_items(self, path, filter_func: Callable[[Dict[str, Any]], bool],
                     limit: Optional[int] = None) -> List[Dict[str, Any]]:
        """
        過濾資料

        Args:
            path: 檔案路徑
            filter_func: 過濾函數 (接受 item, 返回 bool)
            limit: 限制返回筆數
        """
        results = []
        for item in self.stream_read(path):
            if filter_func(item):
                results.append(item)
                if limit and len(results) >= limit:
                    break
        return results

    def write_trace(self, path, trace: Sequence[TraceEntry]) -> Path:
        """搜尋 trace → trace.jsonl (每個 trial 一行)"""
        return self.write_items(path, [entry.to_dict() for entry in trace], mode='w')

    def read_trace(self, path) -> List[TraceEntry]:
        return [TraceEntry.from_dict(item) for item in self.stream_read(path)]

    def accepted_entries(self, path) -> List[TraceEntry]:
        return [TraceEntry.from_dict(item) for item in self.filter_items(path, lambda item: item.get('accepted'))]
