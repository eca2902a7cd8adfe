"""輔助函數模組"""

import hashlib
import json
import re
from pathlib import Path
from typing import Any


def generate_id(path: str) -> str:
    """
    由 checkpoint 路徑生成模型 ID

    Args:
        path: checkpoint 目錄

    Returns:
        模型 ID (目錄名稱, 非英數字元轉成 '-')
    """
    name = Path(path).resolve().name or "model"
    return re.sub(r'[^A-Za-z0-9._-]+', '-', name)


def stable_name_key(name: str) -> int:
    """
    張量名稱的穩定 64-bit 整數 (不受 PYTHONHASHSEED 影響)

    Args:
        name: 張量名稱

    Returns:
        0 <= key < 2**64
    """
    digest = hashlib.blake2b(name.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def derive_seed(seed: int, index: int) -> int:
    """
    由全域 seed 推導子任務 seed (seed XOR index)

    Args:
        seed: 全域 seed
        index: 子任務索引 (例如 cluster 編號)

    Returns:
        子任務 seed
    """
    return (int(seed) ^ int(index)) & 0xFFFFFFFF


def dumps_deterministic(obj: Any) -> str:
    """
    序列化為位元組穩定的 JSON (排序 key, 固定縮排, 結尾換行)

    Args:
        obj: 可 JSON 化的物件

    Returns:
        JSON 字串
    """
    return json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def write_json(path: Path, obj: Any) -> Path:
    """寫入決定性 JSON 檔案"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dumps_deterministic(obj))
    return path


def read_json(path: Path) -> Any:
    """讀取 JSON 檔案"""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
