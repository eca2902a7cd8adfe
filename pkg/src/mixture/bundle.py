"""
Mixture bundle 讀寫

目錄格式:
    <dir>/mixture.json          - MixtureSpec (不含 router 權重)
    <dir>/routers.safetensors   - router 權重, key 為 routers.<i>.<weight>
    <dir>/experts/<id>/         - 每個專家的 checkpoint
    <dir>/merge_base/           - hybrid 使用 base 型合併方法時的 base (可選)
"""

import json
from pathlib import Path
from typing import Dict, Tuple

from loguru import logger
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from src.checkpoint.checkpoint_io import load_checkpoint, save_checkpoint
from src.errors import CheckpointError, MixtureError
from src.mixture.builders import ExpertPool, MixtureSpec
from src.mixture.router import RouterSpec
from src.utils.helpers import write_json

SPEC_FILE = "mixture.json"
ROUTER_FILE = "routers.safetensors"
EXPERTS_DIR = "experts"
MERGE_BASE_DIR = "merge_base"


def _router_tensors(spec: MixtureSpec) -> Dict:
    tensors = {}
    for index, router in enumerate(spec.routers):
        tensors.update(router.to_tensors(f"routers.{index}"))
    return tensors


def save_mixture_bundle(spec: MixtureSpec, pool: ExpertPool, path) -> Path:
    """
    儲存 mixture bundle

    Args:
        spec: MixtureSpec
        pool: 專家權重 (須含 spec.experts 全部)
        path: 輸出目錄

    Returns:
        輸出目錄 Path
    """
    bundle_dir = Path(path)
    bundle_dir.mkdir(parents=True, exist_ok=True)

    data = spec.to_dict()
    data['has_merge_base'] = pool.merge_base is not None
    write_json(bundle_dir / SPEC_FILE, data)

    tensors = _router_tensors(spec)
    if tensors:
        save_file(tensors, str(bundle_dir / ROUTER_FILE))

    for model_id in spec.experts:
        store, desc = pool.entry(model_id)
        save_checkpoint(store, desc, bundle_dir / EXPERTS_DIR / model_id)
    if pool.merge_base is not None:
        save_checkpoint(pool.merge_base, pool.desc(spec.base_id), bundle_dir / MERGE_BASE_DIR)

    logger.info(f"✓ mixture bundle 已儲存: {bundle_dir} ({spec.level}, {spec.num_experts} 個專家)")
    return bundle_dir


def load_mixture_bundle(path) -> Tuple[MixtureSpec, ExpertPool]:
    """
    載入 mixture bundle

    Args:
        path: bundle 目錄

    Returns:
        (MixtureSpec, ExpertPool)
    """
    bundle_dir = Path(path)
    spec_path = bundle_dir / SPEC_FILE
    if not spec_path.exists():
        logger.error(f"mixture 描述不存在: {spec_path}")
        raise MixtureError(f"missing file: {spec_path}")

    try:
        with open(spec_path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise MixtureError(f"malformed mixture spec: {spec_path}: {e}") from e

    router_meta = data.get('routers') or []
    tensors = {}
    if router_meta:
        router_path = bundle_dir / ROUTER_FILE
        if not router_path.exists():
            raise MixtureError(f"missing file: {router_path}")
        try:
            tensors = load_file(str(router_path))
        except (SafetensorError, OSError, ValueError) as e:
            raise MixtureError(f"malformed router file: {router_path}: {e}") from e
    routers = [RouterSpec.from_tensors(meta, tensors, f"routers.{index}") for index, meta in enumerate(router_meta)]

    experts = []
    try:
        for model_id in data.get('experts') or []:
            store, desc = load_checkpoint(bundle_dir / EXPERTS_DIR / model_id)
            experts.append((model_id, store, desc))
        merge_base = None
        if data.get('has_merge_base'):
            merge_base, _ = load_checkpoint(bundle_dir / MERGE_BASE_DIR)
    except CheckpointError as e:
        logger.error(f"載入專家失敗: {e}")
        raise MixtureError(f"bundle {bundle_dir}: {e}") from e

    spec = MixtureSpec.from_dict(data, routers)
    logger.info(f"載入 mixture bundle: {bundle_dir} ({spec.level}, {spec.num_experts} 個專家)")
    return spec, ExpertPool(experts, merge_base=merge_base)
