#!/usr/bin/env python3
"""
測試 MoE 組裝與 forward

驗證項目:
1. Top-K 權重: k 個正值、總和為 1、同分取索引小者
2. model level top-1 的 logits 與被選專家的 dense logits 逐位元相同
3. 相同專家時各 level 的 mixture 等於 dense forward
4. hybrid: k_merge=0 等於 FFN level; 全部合併時等於 apply_recipe 的 dense forward
5. bundle 存取與方法代碼解析
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
import torch

from fixtures import domain_corpus, domain_prompts, memorized_experts, random_corpus, run_tests, tiny_config, toy_family
from src.errors import MixtureError
from src.merging.recipe import MergeRecipe, apply_recipe, whole_model_recipe
from src.mixture.builders import (
    ExpertPool,
    build_block_level,
    build_ffn_level,
    build_hybrid,
    build_mixture,
    build_model_level,
    parse_mixture_code,
)
from src.mixture.bundle import load_mixture_bundle, save_mixture_bundle
from src.mixture.forward import mixture_forward, routing_decisions
from src.mixture.router import (
    RouterSpec,
    build_linear_router,
    build_mlp_router,
    route_topk,
    sample_embedding,
    topk_weights,
)
from src.runtime.toy_model import EMBED, build_toy_model, embed, forward


def memorized_pool():
    _, desc, expert_a, expert_b = memorized_experts()
    return ExpertPool([("expert_a", expert_a, desc), ("expert_b", expert_b, desc)]), desc


def always_router(in_dim: int, num_experts: int, winner: int) -> RouterSpec:
    """relu([x; -x]) 為 |x| 的各分量; 只有 winner 的 logit 為正"""
    hidden = torch.cat([torch.eye(in_dim), -torch.eye(in_dim)])
    out = torch.zeros(num_experts, 2 * in_dim)
    out[winner] = 1.0
    return RouterSpec("mlp", in_dim, num_experts, {'hidden': hidden, 'out': out})


def test_topk_weights():
    probs = torch.softmax(torch.tensor([2.0, 1.0, 0.5]), dim=-1)
    assert torch.equal(topk_weights(probs, 1), torch.tensor([1.0, 0.0, 0.0]))
    full = topk_weights(probs, 3)
    assert torch.allclose(full, probs, atol=1e-6)

    tied = topk_weights(torch.tensor([0.5, 0.5]), 1)
    assert torch.equal(tied, torch.tensor([1.0, 0.0]))

    generator = torch.Generator().manual_seed(0)
    batch = torch.softmax(torch.randn(20, 5, generator=generator), dim=-1)
    for k in range(1, 6):
        weights = topk_weights(batch, k)
        assert torch.all((weights > 0).sum(dim=-1) == k)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(20), atol=1e-6)

    with pytest.raises(MixtureError):
        topk_weights(probs, 0)
    with pytest.raises(MixtureError):
        topk_weights(probs, 4)


def test_route_topk_and_rescaling():
    router = build_linear_router([[[1]], [[2]], [[3]]], torch.randn(8, 4, generator=torch.Generator().manual_seed(1)))
    x = torch.randn(6, 4, generator=torch.Generator().manual_seed(2))
    chosen = route_topk(router, x, 1).argmax(dim=-1)
    assert torch.equal(chosen, route_topk(router, 3.0 * x, 1).argmax(dim=-1))
    with pytest.raises(MixtureError):
        route_topk(router, torch.zeros(5), 1)


def test_mlp_router_zero_input_is_uniform():
    router = build_mlp_router(4, 1, 3, seed=5)
    assert router.equal(build_mlp_router(4, 1, 3, seed=5))
    weights = route_topk(router, torch.zeros(4), 3)
    assert torch.allclose(weights, torch.full((3,), 1.0 / 3.0))


def test_sample_embedding():
    assert torch.equal(sample_embedding([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([2.0, 3.0]))
    assert torch.equal(sample_embedding([[5.0, 6.0]]), torch.tensor([5.0, 6.0]))
    with pytest.raises(MixtureError):
        sample_embedding(torch.zeros(0, 4))


def test_linear_router_rows():
    table = torch.eye(4)
    router = build_linear_router([[[0]], [[1], [1, 1]]], table)
    assert torch.equal(router.weights['weight'], torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    with pytest.raises(MixtureError):
        build_linear_router([[]], table)
    with pytest.raises(MixtureError):
        build_linear_router([[[9]]], table)


def test_linear_prompt_router_routes_domains():
    pool, desc = memorized_pool()
    spec = build_mixture(pool, "M-L-S", prompts=domain_prompts())
    held_out = domain_corpus("a", range(1, 16, 2)) + domain_corpus("b", range(1, 16, 2))
    decisions = routing_decisions(spec, pool, held_out)
    expected = ["expert_a"] * 8 + ["expert_b"] * 8
    correct = sum(d.experts == [expected[d.sequence]] for d in decisions)
    assert correct / len(decisions) >= 0.75


def test_model_level_top1_is_bit_exact():
    pool, desc = memorized_pool()
    spec = build_mixture(pool, "M-L-S", prompts=domain_prompts())
    batch = domain_corpus("a", [1, 3]) + domain_corpus("b", [1, 3])
    logits = mixture_forward(spec, pool, batch)
    dense = {model_id: forward(pool.store(model_id), desc, batch) for model_id in pool.ids}
    for decision in routing_decisions(spec, pool, batch):
        assert decision.weights == [1.0]
        assert torch.equal(logits[decision.sequence], dense[decision.experts[0]][decision.sequence])


def test_model_level_top2_mixes_logits():
    _, desc, members = toy_family(3, 2, rel_noise=0.5)
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members])
    router = build_mlp_router(desc.hidden_dim, 8, 2, seed=1)
    spec = build_model_level(pool, router, top_k=2)
    batch = random_corpus(3, 8)
    tokens = torch.tensor(batch)
    weights = route_topk(router, sample_embedding(embed(members[0][1], tokens)), 2)
    expected = sum(weights[:, i, None, None] * forward(store, desc, batch) for i, (_, store) in enumerate(members))
    assert torch.allclose(mixture_forward(spec, pool, batch), expected, atol=1e-6)


def test_model_level_accepts_different_depths():
    a, desc_a = build_toy_model(tiny_config(), seed=0)
    b, desc_b = build_toy_model(tiny_config(num_layers=3), seed=1)
    pool = ExpertPool([("a", a, desc_a), ("b", b, desc_b)])
    spec = build_model_level(pool, always_router(desc_a.hidden_dim, 2, 1))
    batch = random_corpus(2, 6)
    assert torch.equal(mixture_forward(spec, pool, batch), forward(b, desc_b, batch))

    with pytest.raises(MixtureError):
        build_ffn_level(pool, 0, [build_mlp_router(16, 4, 2)] * 2)


def identical_pool(seed: int = 0):
    store, desc = build_toy_model(tiny_config(), seed=seed)
    return ExpertPool([("x", store, desc), ("y", store, desc)]), store, desc


def test_identical_experts_match_dense():
    pool, store, desc = identical_pool()
    batch = random_corpus(4, 10, seed=3)
    dense = forward(store, desc, batch)

    routers = [build_mlp_router(desc.hidden_dim, 4, 2, seed=i) for i in range(desc.num_layers)]
    specs = [
        build_model_level(pool, routers[0], top_k=2),
        build_block_level(pool, 0, routers, top_k=2),
        build_ffn_level(pool, 0, routers, router_input="token", top_k=2),
        build_ffn_level(pool, 0, routers, router_input="sample", top_k=1),
    ]
    for spec in specs:
        assert torch.allclose(mixture_forward(spec, pool, batch), dense, atol=1e-6)


def test_block_level_hard_routing_equals_chimera():
    base_store, desc, members = toy_family(4, 2, rel_noise=0.5)
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members])
    routers = [always_router(desc.hidden_dim, 2, 1)] * desc.num_layers
    spec = build_block_level(pool, 0, routers)

    expert = members[1][1]
    chimera = members[0][1].replace({name: expert[name] for name in expert if name.startswith("model.layers.")})
    batch = random_corpus(2, 7, seed=4)
    assert torch.allclose(mixture_forward(spec, pool, batch), forward(chimera, desc, batch), atol=1e-6)

    decisions = routing_decisions(spec, pool, batch)
    assert len(decisions) == desc.num_layers * len(batch)
    assert all(d.experts == [members[1][0]] for d in decisions)


def test_ffn_routing_cardinality():
    _, desc, members = toy_family(4, 3, rel_noise=0.5)
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members])
    routers = [build_mlp_router(desc.hidden_dim, 4, 3, seed=i) for i in range(desc.num_layers)]
    batch = [[1, 2, 3, 4, 5], [6, 7, 8]]

    token_spec = build_ffn_level(pool, 0, routers, router_input="token", top_k=1)
    token_decisions = routing_decisions(token_spec, pool, batch)
    assert len(token_decisions) == desc.num_layers * 8
    assert all(len(d.experts) == 1 and d.weights == [1.0] for d in token_decisions)

    sample_spec = build_ffn_level(pool, 0, routers, router_input="sample", top_k=2)
    sample_decisions = routing_decisions(sample_spec, pool, batch)
    assert len(sample_decisions) == desc.num_layers * 2
    assert all(d.position is None and len(d.experts) == 2 for d in sample_decisions)


def test_hybrid_zero_equals_ffn_level():
    _, desc, members = toy_family(6, 2, rel_noise=0.5)
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members])
    routers = [build_mlp_router(desc.hidden_dim, 4, 2, seed=i) for i in range(desc.num_layers)]
    ffn_spec = build_ffn_level(pool, 0, routers, top_k=1)
    hybrid_spec = build_hybrid(pool, 0, 0, None, routers, top_k=1)
    assert hybrid_spec.to_dict() == ffn_spec.to_dict()
    batch = random_corpus(3, 9, seed=6)
    assert torch.allclose(mixture_forward(hybrid_spec, pool, batch), mixture_forward(ffn_spec, pool, batch), atol=1e-6)


def test_all_merged_hybrid_equals_dense_merge():
    _, desc, members = toy_family(6, 2, rel_noise=0.5)
    stores = [store for _, store in members]
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members])
    # 非層張量全取 base (專家 0), 與 mixture 的 embedding / lm_head 來源一致
    recipe = MergeRecipe("linear", desc.num_layers, [[0.5, 1.0], [0.5, 0.0]])
    spec = build_hybrid(pool, 0, desc.num_layers, recipe, [], top_k=1)
    assert spec.router_layers() == []

    merged = apply_recipe(stores, desc, None, recipe)
    batch = random_corpus(2, 8, seed=7)
    assert torch.allclose(mixture_forward(spec, pool, batch), forward(merged, desc, batch), atol=1e-6)


def test_hybrid_structure():
    store, desc = build_toy_model(tiny_config(num_layers=4), seed=0)
    other, _ = build_toy_model(tiny_config(num_layers=4), seed=1)
    pool = ExpertPool([("a", store, desc), ("b", other, desc)])
    spec = build_mixture(pool, "Hybrid F-M-T", k_merge=1)
    assert spec.hybrid_k == 1
    assert spec.router_layers() == [1, 2, 3]
    assert len(spec.routers) == 3
    with pytest.raises(MixtureError):
        spec.router_for_layer(0)
    with pytest.raises(MixtureError):
        build_hybrid(pool, 0, 5, spec.merge_recipe, [])
    with pytest.raises(MixtureError):
        build_hybrid(pool, 0, 1, whole_model_recipe("task_arithmetic", [0.5, 0.5], 4), spec.routers)


def test_parse_mixture_code():
    assert parse_mixture_code("F-L-T").code == "F-L-T"
    assert parse_mixture_code("hybrid f-m-s").code == "Hybrid F-M-S"
    assert parse_mixture_code("M-L-S").level == "model"
    for bad in ("M-L-T", "B-M-T", "Hybrid B-L-S", "X-L-T", "F-L"):
        with pytest.raises(MixtureError):
            parse_mixture_code(bad)


def test_spec_validation():
    pool, store, desc = identical_pool()
    router = build_mlp_router(desc.hidden_dim, 4, 2)
    with pytest.raises(MixtureError):
        build_model_level(pool, router, top_k=3)
    with pytest.raises(MixtureError):
        build_ffn_level(pool, 0, [router])
    with pytest.raises(MixtureError):
        build_block_level(pool, "missing", [router] * desc.num_layers)
    with pytest.raises(MixtureError):
        build_mixture(pool, "F-L-T")


def test_missing_expert_store():
    pool, store, desc = identical_pool()
    spec = build_model_level(pool, build_mlp_router(desc.hidden_dim, 4, 2), top_k=1)
    partial = ExpertPool([("x", store, desc)])
    with pytest.raises(MixtureError, match="missing expert"):
        mixture_forward(spec, partial, random_corpus(1, 4))


def test_bundle_round_trip(tmp_path):
    base, desc, members = toy_family(8, 2, rel_noise=0.5)
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members], merge_base=base)
    recipe = whole_model_recipe("task_arithmetic", [0.6, 0.4], desc.num_layers, model_ids=pool.ids)
    spec = build_mixture(pool, "Hybrid F-M-T", k_merge=1, merge_recipe=recipe, seed=3)

    save_mixture_bundle(spec, pool, tmp_path / "bundle")
    loaded_spec, loaded_pool = load_mixture_bundle(tmp_path / "bundle")

    assert loaded_spec.to_dict() == spec.to_dict()
    assert all(a.equal(b) for a, b in zip(loaded_spec.routers, spec.routers))
    assert loaded_pool.merge_base.equal(base)
    for model_id in pool.ids:
        assert loaded_pool.store(model_id).equal(pool.store(model_id))
    batch = random_corpus(2, 6, seed=8)
    assert torch.equal(mixture_forward(loaded_spec, loaded_pool, batch), mixture_forward(spec, pool, batch))


def test_bundle_round_trip_with_linear_routers(tmp_path):
    _, desc, members = toy_family(8, 2)
    pool = ExpertPool([(model_id, store, desc) for model_id, store in members])
    prompts = {'m0': random_corpus(3, 8, seed=1), 'm1': random_corpus(3, 8, seed=2)}
    for code in ("F-L-T", "B-L-S"):
        spec = build_mixture(pool, code, prompts=prompts)
        assert len(spec.routers) == desc.num_layers
        assert spec.routers[0].weights['weight'] is not spec.routers[1].weights['weight']

        save_mixture_bundle(spec, pool, tmp_path / code)
        loaded_spec, loaded_pool = load_mixture_bundle(tmp_path / code)
        assert loaded_spec.to_dict() == spec.to_dict()
        assert all(a.equal(b) for a, b in zip(loaded_spec.routers, spec.routers))
        batch = random_corpus(2, 6, seed=8)
        assert torch.equal(mixture_forward(loaded_spec, loaded_pool, batch), mixture_forward(spec, pool, batch))


def test_bundle_missing_spec(tmp_path):
    with pytest.raises(MixtureError, match="missing file"):
        load_mixture_bundle(tmp_path / "nothing")


def test_forward_is_deterministic():
    pool, desc = memorized_pool()
    spec = build_mixture(pool, "F-M-T", seed=2, top_k=1)
    batch = domain_corpus("a", [0, 5])
    assert torch.equal(mixture_forward(spec, pool, batch), mixture_forward(spec, pool, batch))
    assert spec.routers[0].weights['hidden'].shape[1] == pool.store("expert_a")[EMBED].shape[1]


def main():
    return run_tests("測試 MoE 組裝", [
        test_topk_weights,
        test_route_topk_and_rescaling,
        test_mlp_router_zero_input_is_uniform,
        test_sample_embedding,
        test_linear_router_rows,
        test_linear_prompt_router_routes_domains,
        test_model_level_top1_is_bit_exact,
        test_model_level_top2_mixes_logits,
        test_model_level_accepts_different_depths,
        test_identical_experts_match_dense,
        test_block_level_hard_routing_equals_chimera,
        test_ffn_routing_cardinality,
        test_hybrid_zero_equals_ffn_level,
        test_all_merged_hybrid_equals_dense_merge,
        test_hybrid_structure,
        test_parse_mixture_code,
        test_spec_validation,
        test_missing_expert_store,
        test_bundle_round_trip,
        test_bundle_round_trip_with_linear_routers,
        test_bundle_missing_spec,
        test_forward_is_deterministic,
    ])


if __name__ == "__main__":
    sys.exit(main())
