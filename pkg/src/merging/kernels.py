"""
權重空間合併核心

所有函數皆為純函數: 輸入 TensorStore 不會被修改, 回傳新的 TensorStore。
累加一律依輸入索引遞增順序進行, 結果與執行緒數無關。
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np
import torch

from src.checkpoint.checkpoint_io import require_mergeable
from src.checkpoint.tensor_store import TensorStore
from src.errors import MergeError
from src.utils.helpers import stable_name_key

SLERP_OMEGA_EPS = 1e-6
SLERP_NORM_EPS = 1e-12


def _check_finite(values: Sequence[float], what: str) -> List[float]:
    values = [float(v) for v in values]
    for v in values:
        if not math.isfinite(v):
            raise MergeError(f"{what} 含非有限值: {v}")
    return values


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------

def linear_tensor(tensors: Sequence[torch.Tensor], coeffs: Sequence[float]) -> torch.Tensor:
    acc = tensors[0] * coeffs[0]
    for tensor, coeff in zip(tensors[1:], coeffs[1:]):
        acc = acc + tensor * coeff
    return acc


def linear_merge(stores: Sequence[TensorStore], coeffs: Sequence[float]) -> TensorStore:
    """
    線性插值合併 w = Σ s_i · w_i

    Args:
        stores: 同結構模型 (至少一個)
        coeffs: 每個模型的係數

    Returns:
        合併後的 TensorStore
    """
    if len(stores) != len(coeffs):
        raise MergeError(f"模型數 {len(stores)} 與係數數 {len(coeffs)} 不符")
    coeffs = _check_finite(coeffs, "係數")
    require_mergeable(list(stores), "linear_merge", error=MergeError)

    return TensorStore({
        name: linear_tensor([store[name] for store in stores], coeffs)
        for name in stores[0]
    })


# ---------------------------------------------------------------------------
# SLERP
# ---------------------------------------------------------------------------

def slerp_tensor(u: torch.Tensor, v: torch.Tensor, t: float) -> torch.Tensor:
    """單一張量的球面線性插值; 夾角過小或範數近 0 時退回線性插值"""
    u64 = u.reshape(-1).double()
    v64 = v.reshape(-1).double()
    norm_u = float(torch.linalg.vector_norm(u64))
    norm_v = float(torch.linalg.vector_norm(v64))

    if norm_u < SLERP_NORM_EPS or norm_v < SLERP_NORM_EPS:
        return u * (1.0 - t) + v * t

    cos = float(torch.dot(u64, v64)) / (norm_u * norm_v)
    omega = math.acos(min(1.0, max(-1.0, cos)))
    if omega < SLERP_OMEGA_EPS:
        return u * (1.0 - t) + v * t

    sin_omega = math.sin(omega)
    s0 = math.sin((1.0 - t) * omega) / sin_omega
    s1 = math.sin(t * omega) / sin_omega
    return u * s0 + v * s1


def slerp_merge(a: TensorStore, b: TensorStore, t: float) -> TensorStore:
    """
    逐張量 SLERP

    Args:
        a, b: 同結構模型
        t: 插值位置, 0 → a, 1 → b
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise MergeError(f"slerp t 必須在 [0, 1] 之間, 實際為 {t}")
    require_mergeable([a, b], "slerp_merge", error=MergeError)
    return TensorStore({name: slerp_tensor(a[name], b[name], t) for name in a})


# ---------------------------------------------------------------------------
# Task vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskVectorSet:
    """τ = w_ft − w_base"""

    base_id: str
    deltas: TensorStore

    def conforms_to(self, base: TensorStore) -> bool:
        return self.deltas.shapes() == base.shapes()


def make_task_vectors(fine_tuned: Sequence[TensorStore], base: TensorStore,
                      base_id: str = "base") -> List[TaskVectorSet]:
    """逐張量精確相減得到 task vectors"""
    require_mergeable([base, *fine_tuned], "make_task_vectors", error=MergeError)
    return [
        TaskVectorSet(base_id=base_id, deltas=TensorStore({name: ft[name] - base[name] for name in base}))
        for ft in fine_tuned
    ]


def _check_task_vectors(base: TensorStore, tvs: Sequence[TaskVectorSet], scales: Sequence[float], context: str):
    if len(tvs) != len(scales):
        raise MergeError(f"{context}: task vector 數 {len(tvs)} 與係數數 {len(scales)} 不符")
    if not tvs:
        raise MergeError(f"{context}: 至少需要一個 task vector")
    for index, tv in enumerate(tvs):
        if not tv.conforms_to(base):
            raise MergeError(f"{context}: task vector {index} 的 shape 與 base 不符")


def task_arithmetic_merge(base: TensorStore, tvs: Sequence[TaskVectorSet],
                          scales: Sequence[float]) -> TensorStore:
    """w = w_base + Σ λ_i · τ_i"""
    scales = _check_finite(scales, "scales")
    _check_task_vectors(base, tvs, scales, "task_arithmetic_merge")

    return TensorStore({
        name: base[name] + linear_tensor([tv.deltas[name] for tv in tvs], scales)
        for name in base
    })


# ---------------------------------------------------------------------------
# DARE
# ---------------------------------------------------------------------------

def dare_keep_mask(name: str, numel: int, drop_p: float, seed: int) -> np.ndarray:
    """
    以 (seed, 張量名稱) 為 Philox key、flat index 為 counter 的保留遮罩

    同一 (seed, name) 的遮罩與張量處理順序及執行緒數無關。
    """
    key = (stable_name_key(name) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.random(numel) >= drop_p


def dare_sparsify(tv: TaskVectorSet, drop_p: float, seed: int) -> TaskVectorSet:
    """
    DARE: 每個元素以機率 drop_p 歸零, 其餘乘上 1/(1−drop_p)

    Args:
        tv: task vector
        drop_p: 丟棄機率 [0, 1)
        seed: 非負整數

    Returns:
        稀疏化後的 TaskVectorSet (期望值不變)
    """
    drop_p = float(drop_p)
    if not 0.0 <= drop_p < 1.0:
        raise MergeError(f"dare drop_p 必須在 [0, 1) 之間, 實際為 {drop_p}")
    if int(seed) < 0:
        raise MergeError(f"seed 必須是非負整數, 實際為 {seed}")
    if drop_p == 0.0:
        return tv

    rescale = 1.0 / (1.0 - drop_p)

    def sparsify(name: str, delta: torch.Tensor) -> torch.Tensor:
        keep = torch.from_numpy(dare_keep_mask(name, delta.numel(), drop_p, seed)).reshape(delta.shape)
        return torch.where(keep, delta * rescale, torch.zeros_like(delta))

    return TaskVectorSet(base_id=tv.base_id, deltas=tv.deltas.map(sparsify))


# ---------------------------------------------------------------------------
# TIES
# ---------------------------------------------------------------------------

def ties_trim(delta: torch.Tensor, trim_frac: float) -> torch.Tensor:
    """保留絕對值前 ⌈trim_frac·N⌉ 大的元素 (同值時 flat index 較小者優先), 其餘歸零"""
    flat = delta.reshape(-1)
    numel = flat.numel()
    keep = min(numel, math.ceil(trim_frac * numel))
    if keep >= numel:
        return delta
    order = torch.sort(flat.abs(), descending=True, stable=True).indices
    mask = torch.zeros(numel, dtype=torch.bool)
    mask[order[:keep]] = True
    return torch.where(mask, flat, torch.zeros_like(flat)).reshape(delta.shape)


def ties_tensor(deltas: Sequence[torch.Tensor], scales: Sequence[float],
                trim_fracs: Sequence[float]) -> torch.Tensor:
    """單一張量的 trim → elect → disjoint mean, 回傳合併後的 delta"""
    trimmed = [ties_trim(delta, frac) for delta, frac in zip(deltas, trim_fracs)]
    weighted = [t * scale for t, scale in zip(trimmed, scales)]

    total = weighted[0]
    for w in weighted[1:]:
        total = total + w
    # 總和恰為 0 時選 +1
    elected = torch.where(total >= 0, torch.ones_like(total), -torch.ones_like(total))

    agree_sum = torch.zeros_like(total)
    agree_count = torch.zeros_like(total)
    # 依未加權的 trimmed 值判斷同號, 係數為 0 的模型仍計入分母
    for t, w in zip(trimmed, weighted):
        agree = (t * elected) > 0
        agree_sum = agree_sum + torch.where(agree, w, torch.zeros_like(w))
        agree_count = agree_count + agree.to(total.dtype)

    return torch.where(agree_count > 0, agree_sum / agree_count.clamp(min=1.0), torch.zeros_like(total))


def ties_merge(base: TensorStore, tvs: Sequence[TaskVectorSet], scales: Sequence[float],
               trim_frac: Union[float, Sequence[float]]) -> TensorStore:
    """
    TIES 合併

    Args:
        base: base 模型
        tvs: task vectors
        scales: 每個 task vector 的係數 λ_i
        trim_frac: 保留比例 (0, 1]; 可為單一值或每個模型各一

    Returns:
        base + 合併後的 delta
    """
    scales = _check_finite(scales, "scales")
    _check_task_vectors(base, tvs, scales, "ties_merge")

    if isinstance(trim_frac, (int, float)):
        trim_fracs = [float(trim_frac)] * len(tvs)
    else:
        trim_fracs = [float(f) for f in trim_frac]
        if len(trim_fracs) != len(tvs):
            raise MergeError(f"ties_merge: trim_frac 數 {len(trim_fracs)} 與 task vector 數 {len(tvs)} 不符")
    for frac in trim_fracs:
        if not 0.0 < frac <= 1.0:
            raise MergeError(f"ties trim_frac 必須在 (0, 1] 之間, 實際為 {frac}")

    return TensorStore({
        name: base[name] + ties_tensor([tv.deltas[name] for tv in tvs], scales, trim_fracs)
        for name in base
    })
