"""模型 zoo: 一組已載入的 checkpoint 與其結構分群"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from loguru import logger

from src.checkpoint.checkpoint_io import check_compat, load_checkpoint
from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.errors import CheckpointError
from src.utils.helpers import generate_id


@dataclass
class ZooEntry:
    id: str
    store: TensorStore
    desc: ArchDescriptor
    path: Optional[str] = None


@dataclass
class ModelZoo:
    """依輸入順序排列的模型集合"""

    entries: List[ZooEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [entry.id for entry in self.entries]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise CheckpointError(f"zoo 中有重複的模型 ID: {duplicates}")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> ZooEntry:
        return self.entries[index]

    @property
    def ids(self) -> List[str]:
        return [entry.id for entry in self.entries]

    @property
    def stores(self) -> List[TensorStore]:
        return [entry.store for entry in self.entries]

    def index_of(self, model_id: str) -> int:
        try:
            return self.ids.index(model_id)
        except ValueError:
            raise CheckpointError(f"zoo 中沒有模型 {model_id}") from None

    def subset(self, indices: Sequence[int]) -> "ModelZoo":
        return ModelZoo([self.entries[i] for i in indices])

    def partition_by_arch(self) -> List[List[int]]:
        """
        依 check_compat 將 zoo 分成可合併的結構群組

        Returns:
            索引群組列表, 依群組最小索引排序; 群組內任兩模型皆為 mergeable
        """
        groups: List[List[int]] = []
        for index, entry in enumerate(self.entries):
            for group in groups:
                head = self.entries[group[0]]
                report = check_compat(head.desc, head.store.shapes(), entry.desc, entry.store.shapes())
                if report.mergeable:
                    group.append(index)
                    break
            else:
                groups.append([index])
        return groups


def expand_zoo_args(args: Sequence[str]) -> List[str]:
    """
    展開 --zoo 參數: checkpoint 目錄, 或列出目錄的清單檔 (.json 陣列 / 每行一個路徑的文字檔)

    清單檔中的相對路徑以清單檔所在目錄為基準。
    """
    paths: List[str] = []
    for arg in args:
        path = Path(arg)
        if path.is_file():
            text = path.read_text(encoding='utf-8')
            if path.suffix == '.json':
                listed = json.loads(text)
            else:
                listed = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith('#')]
            paths.extend(str((path.parent / p) if not Path(p).is_absolute() else Path(p)) for p in listed)
        else:
            paths.append(str(path))
    return paths


def load_zoo(paths: Sequence[str], ids: Optional[Sequence[str]] = None) -> ModelZoo:
    """
    載入多個 checkpoint

    Args:
        paths: checkpoint 目錄列表
        ids: 模型 ID (預設為目錄名稱)

    Returns:
        ModelZoo
    """
    if not paths:
        raise CheckpointError("zoo 不可為空")
    if ids is not None and len(ids) != len(paths):
        raise CheckpointError(f"ids 數量 {len(ids)} 與路徑數量 {len(paths)} 不符")

    entries = []
    for index, path in enumerate(paths):
        store, desc = load_checkpoint(path)
        model_id = ids[index] if ids is not None else generate_id(path)
        entries.append(ZooEntry(id=model_id, store=store, desc=desc, path=str(path)))

    logger.info(f"載入 zoo: {len(entries)} 個模型")
    return ModelZoo(entries)

