"""Checkpoint 讀寫與相容性檢查

目錄格式:
    <dir>/model.safetensors  - 8-byte LE header 長度 + JSON header + 連續 payload
    <dir>/manifest.json      - ArchDescriptor (num_layers, hidden_dim, ffn_dim, vocab_size,
                               num_heads, tensor_roles)
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Tuple

from loguru import logger
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from src.checkpoint.tensor_store import ArchDescriptor, Shape, TensorStore
from src.errors import CheckpointError
from src.utils.config_loader import get_config
from src.utils.helpers import write_json

VERDICTS = ("mergeable", "mixture_only", "incompatible")


def _file_names() -> Tuple[str, str]:
    config = get_config().get_checkpoint_config()
    return (config.get('tensor_file', 'model.safetensors'),
            config.get('manifest_file', 'manifest.json'))


def load_checkpoint(path) -> Tuple[TensorStore, ArchDescriptor]:
    """
    載入 checkpoint 目錄

    Args:
        path: checkpoint 目錄 (含張量檔與 manifest)

    Returns:
        (TensorStore, ArchDescriptor)
    """
    tensor_file, manifest_file = _file_names()
    ckpt_dir = Path(path)
    tensor_path = ckpt_dir / tensor_file
    manifest_path = ckpt_dir / manifest_file

    for required in (tensor_path, manifest_path):
        if not required.exists():
            logger.error(f"checkpoint 檔案不存在: {required}")
            raise CheckpointError(f"missing file: {required}")

    try:
        with open(manifest_path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"manifest 解析失敗: {manifest_path} - {e}")
        raise CheckpointError(f"malformed manifest: {manifest_path}: {e}") from e

    try:
        tensors = load_file(str(tensor_path))
    except (SafetensorError, OSError, ValueError) as e:
        logger.error(f"張量檔解析失敗: {tensor_path} - {e}")
        raise CheckpointError(f"malformed header or payload: {tensor_path}: {e}") from e

    store = TensorStore(tensors)
    desc = ArchDescriptor.from_manifest(manifest)

    problems = desc.conformance_problems(store)
    if problems:
        logger.error(f"checkpoint 結構不符: {ckpt_dir} - {problems[0]}")
        raise CheckpointError(f"manifest/tensor mismatch in {ckpt_dir}: " + "; ".join(problems))

    logger.debug(f"載入 checkpoint: {ckpt_dir} ({len(store)} 個張量)")
    return store, desc


def save_checkpoint(store: TensorStore, desc: ArchDescriptor, path) -> Path:
    """
    儲存 checkpoint 目錄 (相同輸入產生逐位元組相同的檔案)

    Args:
        store: 權重
        desc: 結構描述 (store 必須符合)
        path: 輸出目錄

    Returns:
        輸出目錄 Path
    """
    problems = desc.conformance_problems(store)
    if problems:
        logger.error(f"store 與描述不符, 拒絕儲存: {problems[0]}")
        raise CheckpointError("store/descriptor nonconformance: " + "; ".join(problems))

    tensor_file, manifest_file = _file_names()
    ckpt_dir = Path(path)

    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        save_file({name: store[name] for name in store}, str(ckpt_dir / tensor_file))
        write_json(ckpt_dir / manifest_file, desc.to_manifest())
    except OSError as e:
        logger.error(f"儲存 checkpoint 失敗: {ckpt_dir} - {e}")
        raise

    logger.debug(f"checkpoint 已儲存: {ckpt_dir}")
    return ckpt_dir


@dataclass(frozen=True)
class CompatReport:
    """相容性檢查結果"""

    same_arch: bool
    shape_mismatches: List[str] = field(default_factory=list)
    verdict: str = "incompatible"

    @property
    def mergeable(self) -> bool:
        return self.verdict == "mergeable"

    def to_dict(self) -> Dict:
        return {
            'same_arch': self.same_arch,
            'shape_mismatches': list(self.shape_mismatches),
            'verdict': self.verdict,
        }


def check_compat(desc_a: ArchDescriptor, shapes_a: Mapping[str, Shape],
                 desc_b: ArchDescriptor, shapes_b: Mapping[str, Shape]) -> CompatReport:
    """
    判斷兩個模型能否合併或只能做 model-level 混合

    Args:
        desc_a, shapes_a: 模型 A 的描述與張量 shape (TensorStore.shapes())
        desc_b, shapes_b: 模型 B

    Returns:
        CompatReport; 對 (a, b) 對稱
    """
    same_arch = desc_a.dims() == desc_b.dims()

    names_a, names_b = set(shapes_a), set(shapes_b)
    mismatches = set(names_a ^ names_b)
    for name in names_a & names_b:
        if tuple(shapes_a[name]) != tuple(shapes_b[name]):
            mismatches.add(name)
    mismatches = sorted(mismatches)

    if same_arch and not mismatches:
        verdict = "mergeable"
    elif desc_a.hidden_dim == desc_b.hidden_dim and desc_a.vocab_size == desc_b.vocab_size:
        verdict = "mixture_only"
    else:
        verdict = "incompatible"

    return CompatReport(same_arch=same_arch, shape_mismatches=mismatches, verdict=verdict)


def check_store_compat(a: Tuple[TensorStore, ArchDescriptor], b: Tuple[TensorStore, ArchDescriptor]) -> CompatReport:
    """check_compat 的便利版本: 直接吃 (store, desc)"""
    return check_compat(a[1], a[0].shapes(), b[1], b[0].shapes())


def require_mergeable(stores: List[TensorStore], context: str = "merge", error=CheckpointError):
    """確認所有 store 的張量名稱與 shape 完全一致"""
    if not stores:
        raise error(f"{context}: 至少需要一個模型")
    reference = stores[0].shapes()
    for index, store in enumerate(stores[1:], start=1):
        shapes = store.shapes()
        if shapes != reference:
            diff = sorted(set(shapes) ^ set(reference)) or sorted(
                n for n in reference if shapes[n] != reference[n]
            )
            raise error(f"{context}: 模型 {index} 與模型 0 的張量不一致 (例如 {diff[:3]})")
