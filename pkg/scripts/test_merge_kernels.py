#!/usr/bin/env python3
"""
測試合併核心

以逐元素純 Python 迴圈實作的參考版本比對 linear / task arithmetic / TIES / DARE,
另外檢查 SLERP 端點、DARE 無偏性、recipe 分組與排除規則。
"""

import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import run_tests, toy_family
from src.checkpoint.tensor_store import TensorStore
from src.errors import MergeError
from src.merging.kernels import (
    dare_keep_mask,
    dare_sparsify,
    linear_merge,
    make_task_vectors,
    slerp_merge,
    task_arithmetic_merge,
    ties_merge,
    TaskVectorSet,
)
from src.merging.recipe import (
    MergeRecipe,
    apply_recipe,
    recipe_with_defaults,
    required_coefficient_count,
    whole_model_recipe,
)
from src.utils.helpers import derive_seed

TOLERANCE = 1e-6


def _flat(tensor: torch.Tensor):
    return [float(x) for x in tensor.reshape(-1).tolist()]


def _max_diff(store: TensorStore, reference) -> float:
    worst = 0.0
    for name in store:
        for got, want in zip(_flat(store[name]), reference[name]):
            worst = max(worst, abs(got - want))
    return worst


def _zoo():
    base, desc, members = toy_family(11, 3, rel_noise=0.1)
    return base, desc, [store for _, store in members]


# ----------------------------------------------------------------------
# 參考實作 (逐元素)
# ----------------------------------------------------------------------

def ref_linear(stores, coeffs):
    out = {}
    for name in stores[0]:
        columns = [_flat(store[name]) for store in stores]
        out[name] = [sum(c * col[i] for c, col in zip(coeffs, columns)) for i in range(len(columns[0]))]
    return out


def ref_task_arithmetic(base, stores, scales):
    out = {}
    for name in base:
        b = _flat(base[name])
        columns = [_flat(store[name]) for store in stores]
        out[name] = [b[i] + sum(s * (col[i] - b[i]) for s, col in zip(scales, columns)) for i in range(len(b))]
    return out


def ref_trim(delta, frac):
    n = len(delta)
    keep = min(n, math.ceil(frac * n))
    order = sorted(range(n), key=lambda i: (-abs(delta[i]), i))
    kept = set(order[:keep])
    return [delta[i] if i in kept else 0.0 for i in range(n)]


def ref_ties(base, stores, scales, frac):
    out = {}
    for name in base:
        b = _flat(base[name])
        trimmed, weighted = [], []
        for store, scale in zip(stores, scales):
            # 與 make_task_vectors 相同的 float32 差值, 排序才會一致
            delta = _flat(store[name] - base[name])
            trimmed.append(ref_trim(delta, frac))
            weighted.append([scale * d for d in trimmed[-1]])
        merged = []
        for i in range(len(b)):
            sign = 1.0 if sum(w[i] for w in weighted) >= 0 else -1.0
            agree = [w[i] for t, w in zip(trimmed, weighted) if t[i] * sign > 0]
            merged.append(b[i] + (sum(agree) / len(agree) if agree else 0.0))
        out[name] = merged
    return out


# ----------------------------------------------------------------------
# 測試
# ----------------------------------------------------------------------

def test_linear_matches_reference():
    _, _, stores = _zoo()
    coeffs = [0.2, 0.5, 0.3]
    assert _max_diff(linear_merge(stores, coeffs), ref_linear(stores, coeffs)) <= TOLERANCE


def test_linear_single_model_identity():
    _, _, stores = _zoo()
    assert linear_merge([stores[0]], [1.0]).equal(stores[0])


def test_linear_rejects_bad_inputs():
    _, _, stores = _zoo()
    with pytest.raises(MergeError):
        linear_merge(stores, [0.5, 0.5])
    with pytest.raises(MergeError):
        linear_merge(stores[:2], [float("nan"), 0.5])


def test_task_arithmetic_matches_reference():
    base, _, stores = _zoo()
    scales = [0.7, -0.2, 0.4]
    merged = task_arithmetic_merge(base, make_task_vectors(stores, base), scales)
    assert _max_diff(merged, ref_task_arithmetic(base, stores, scales)) <= TOLERANCE


def test_task_arithmetic_zero_scales_is_base():
    base, _, stores = _zoo()
    merged = task_arithmetic_merge(base, make_task_vectors(stores, base), [0.0, 0.0, 0.0])
    assert merged.max_abs_diff(base) == 0.0


@pytest.mark.parametrize("frac", [0.5, 1.0])
def test_ties_matches_reference(frac):
    base, _, stores = _zoo()
    scales = [1.0, 0.6, 0.8]
    merged = ties_merge(base, make_task_vectors(stores, base), scales, frac)
    assert _max_diff(merged, ref_ties(base, stores, scales, frac)) <= TOLERANCE


def test_ties_sign_election():
    base = TensorStore({"w": torch.zeros(3)})
    a = TensorStore({"w": torch.tensor([1.0, -2.0, 0.5])})
    b = TensorStore({"w": torch.tensor([3.0, 1.0, -0.5])})
    merged = ties_merge(base, make_task_vectors([a, b], base), [1.0, 1.0], 1.0)
    # 位置 0: 同號取平均; 位置 1: 總和為負, 只保留 -2; 位置 2: 總和 0 選 +, 只保留 0.5
    assert merged["w"].tolist() == [2.0, -2.0, 0.5]


def test_ties_zero_scale_counts_in_mean():
    base = TensorStore({"w": torch.zeros(2)})
    a = TensorStore({"w": torch.tensor([2.0, -1.0])})
    b = TensorStore({"w": torch.tensor([4.0, 3.0])})
    merged = ties_merge(base, make_task_vectors([a, b], base), [0.0, 1.0], 1.0)
    # 位置 0: mean(0·2, 1·4); 位置 1: 只有 b 與選出的 + 同號
    assert merged["w"].tolist() == [2.0, 3.0]


def test_ties_rejects_bad_trim():
    base, _, stores = _zoo()
    with pytest.raises(MergeError):
        ties_merge(base, make_task_vectors(stores, base), [1.0, 1.0, 1.0], 0.0)


def test_dare_structure_and_determinism():
    base, _, stores = _zoo()
    tv = make_task_vectors(stores[:1], base)[0]
    first = dare_sparsify(tv, 0.5, seed=42)
    second = dare_sparsify(tv, 0.5, seed=42)
    assert first.deltas.equal(second.deltas)
    for name in tv.deltas:
        keep = torch.from_numpy(dare_keep_mask(name, tv.deltas[name].numel(), 0.5, 42)).reshape(tv.deltas[name].shape)
        expected = torch.where(keep, tv.deltas[name] * 2.0, torch.zeros_like(tv.deltas[name]))
        assert torch.equal(first.deltas[name], expected)
    assert not dare_sparsify(tv, 0.5, seed=43).deltas.equal(first.deltas)


def test_dare_p_zero_is_identity():
    base, _, stores = _zoo()
    tv = make_task_vectors(stores[:1], base)[0]
    assert dare_sparsify(tv, 0.0, seed=1).deltas.equal(tv.deltas)
    with pytest.raises(MergeError):
        dare_sparsify(tv, 1.0, seed=1)


def test_dare_unbiased():
    generator = torch.Generator().manual_seed(0)
    delta = torch.randn(1000, generator=generator)
    tv = TaskVectorSet(base_id="base", deltas=TensorStore({"w": delta}))
    drop_p = 0.5
    samples = np.stack([dare_sparsify(tv, drop_p, seed=s).deltas["w"].numpy() for s in range(1000)])

    positions = np.random.default_rng(0).choice(delta.numel(), size=100, replace=False)
    values = delta.numpy()
    outside = 0
    for i in positions:
        # 單次樣本的標準差 = |δ| · sqrt(p / (1 − p))
        std_err = abs(values[i]) * math.sqrt(drop_p / (1 - drop_p)) / math.sqrt(len(samples))
        error = abs(samples[:, i].mean() - values[i])
        assert error <= 4 * std_err + 1e-7
        outside += error > 3 * std_err + 1e-7
    # 3 倍標準誤外的期望個數約 0.27
    assert outside <= 2


def test_dare_ta_recipe_matches_masks():
    base, desc, stores = _zoo()
    recipe = whole_model_recipe("dare_ta", [0.5, 0.5, 0.5], desc.num_layers, dare_drop_p=0.3, seed=9)
    merged = apply_recipe(stores, desc, base, recipe, exclude_patterns=[])

    reference = {}
    for name in base:
        b = _flat(base[name])
        total = list(b)
        for index, store in enumerate(stores):
            keep = dare_keep_mask(name, len(b), 0.3, derive_seed(9, index))
            delta = [x - y for x, y in zip(_flat(store[name]), b)]
            for i in range(len(b)):
                if keep[i]:
                    total[i] += 0.5 * delta[i] / 0.7
        reference[name] = total
    assert _max_diff(merged, reference) <= TOLERANCE


def test_slerp_endpoints_bit_exact():
    _, _, stores = _zoo()
    a, b = stores[0], stores[1]
    assert slerp_merge(a, b, 0.0).equal(a)
    assert slerp_merge(a, b, 1.0).equal(b)


def test_slerp_orthogonal_midpoint():
    u = TensorStore({"w": torch.tensor([1.0, 0.0])})
    v = TensorStore({"w": torch.tensor([0.0, 1.0])})
    mid = slerp_merge(u, v, 0.5)["w"]
    expected = math.sqrt(2) / 2
    assert abs(float(mid[0]) - expected) <= 1e-6
    assert abs(float(mid[1]) - expected) <= 1e-6


def test_slerp_parallel_falls_back_to_lerp():
    u = TensorStore({"w": torch.tensor([1.0, 2.0])})
    v = TensorStore({"w": torch.tensor([2.0, 4.0])})
    mid = slerp_merge(u, v, 0.5)["w"]
    assert torch.allclose(mid, torch.tensor([1.5, 3.0]))
    with pytest.raises(MergeError):
        slerp_merge(u, v, 1.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0))
def test_slerp_preserves_unit_norm(t):
    u = TensorStore({"w": torch.tensor([1.0, 0.0, 0.0])})
    v = TensorStore({"w": torch.tensor([0.0, 0.6, 0.8])})
    out = slerp_merge(u, v, t)["w"]
    assert abs(float(out.norm()) - 1.0) <= 1e-5


def test_required_coefficient_count():
    assert required_coefficient_count(4, 32, 8) == 20
    assert required_coefficient_count(12, 32, 8) == 60
    assert required_coefficient_count(4, 32, 32) == 8
    with pytest.raises(MergeError):
        required_coefficient_count(4, 32, 5)


def test_whole_model_recipe_equals_linear_merge():
    _, desc, stores = _zoo()
    coeffs = [0.2, 0.3, 0.5]
    merged = apply_recipe(stores, desc, None, whole_model_recipe("linear", coeffs, desc.num_layers),
                          exclude_patterns=[])
    assert merged.equal(linear_merge(stores, coeffs))


def test_grouped_recipe_uses_layer_columns():
    _, desc, stores = _zoo()
    a, b = stores[0], stores[1]
    # n = 1: layer 0 取 a, layer 1 取 b, 共用張量 (embedding 等) 取平均
    recipe = recipe_with_defaults("linear", 1, [[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]])
    merged = apply_recipe([a, b], desc, None, recipe, exclude_patterns=[])
    for name in merged:
        role = desc.role_of(name)
        if role.layer == 0:
            assert torch.equal(merged[name], a[name] * 1.0 + b[name] * 0.0)
        elif role.layer == 1:
            assert torch.equal(merged[name], a[name] * 0.0 + b[name] * 1.0)
        else:
            assert torch.equal(merged[name], a[name] * 0.5 + b[name] * 0.5)


def test_exclude_patterns_copy_first_model():
    _, desc, stores = _zoo()
    recipe = whole_model_recipe("linear", [0.5, 0.5, 0.0], desc.num_layers)
    merged = apply_recipe(stores, desc, None, recipe, exclude_patterns=[r"lm_head"])
    assert torch.equal(merged["lm_head.weight"], stores[0]["lm_head.weight"])
    assert not torch.equal(merged["model.embed_tokens.weight"], stores[0]["model.embed_tokens.weight"])


def test_recipe_validation():
    _, desc, stores = _zoo()
    with pytest.raises(MergeError):
        MergeRecipe(method="fisher", group_size=2, coefficients=[[1.0, 1.0]])
    with pytest.raises(MergeError):
        apply_recipe(stores, desc, None, whole_model_recipe("ties", [1.0, 1.0, 1.0], desc.num_layers))
    with pytest.raises(MergeError):
        apply_recipe(stores, desc, None, whole_model_recipe("linear", [1.0, 1.0], desc.num_layers))


def test_recipe_dict_round_trip():
    recipe = recipe_with_defaults("ties", 1, [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]], densities=[0.3, 0.7],
                                  model_ids=["a", "b"], seed=5)
    assert MergeRecipe.from_dict(recipe.to_dict()) == recipe


def main():
    return run_tests("測試合併核心", [
        test_linear_matches_reference,
        test_linear_single_model_identity,
        test_linear_rejects_bad_inputs,
        test_task_arithmetic_matches_reference,
        test_task_arithmetic_zero_scales_is_base,
        lambda: test_ties_matches_reference(0.5),
        lambda: test_ties_matches_reference(1.0),
        test_ties_sign_election,
        test_ties_zero_scale_counts_in_mean,
        test_ties_rejects_bad_trim,
        test_dare_structure_and_determinism,
        test_dare_p_zero_is_identity,
        test_dare_unbiased,
        test_dare_ta_recipe_matches_masks,
        test_slerp_endpoints_bit_exact,
        test_slerp_orthogonal_midpoint,
        test_slerp_parallel_falls_back_to_lerp,
        test_slerp_preserves_unit_norm,
        test_required_coefficient_count,
        test_whole_model_recipe_equals_linear_merge,
        test_grouped_recipe_uses_layer_columns,
        test_exclude_patterns_copy_first_model,
        test_recipe_validation,
        test_recipe_dict_round_trip,
    ])


if __name__ == "__main__":
    sys.exit(main())
