#!/usr/bin/env python3
"""
測試 GLUE 流程

驗證項目:
1. 兩個 family 的 zoo 分成兩個 cluster, 代表選擇規則正確
2. 相同 seed 兩次執行的 report 與 checkpoint 位元組相同
3. report 中的 recipe 可重現合併代表
4. 合併沒有嚴格改善時退回最佳單一模型; 只有一個代表時直接作為最終模型
"""

import json
import math
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
import yaml

from fixtures import domain_corpus, memorized_experts, run_tests, save_models, toy_family, write_json_file
from src.checkpoint.checkpoint_io import load_checkpoint, save_checkpoint
from src.checkpoint.zoo import load_zoo
from src.errors import PipelineError
from src.merging.kernels import linear_merge
from src.merging.recipe import MergeRecipe, apply_recipe
from src.mixture.bundle import load_mixture_bundle
from src.pipeline.glue import GlueConfig, ModelGlue, cluster_by_arch, load_glue_config, run_model_glue


def planted_zoo(root: Path, target_ids=("a0", "a1", "a2")):
    """family a (3 個) 與 family b (2 個); analytic 目標為 target_ids 的平均"""
    _, desc, family_a = toy_family(1, 3, prefix="a")
    _, _, family_b = toy_family(2, 2, prefix="b")
    models = family_a + family_b
    paths = save_models(models, desc, root / "zoo")

    by_id = dict(models)
    target = linear_merge([by_id[i] for i in target_ids], [1.0 / len(target_ids)] * len(target_ids))
    save_checkpoint(target, desc, root / "target")
    return paths, models, desc


def glue_config(root: Path, paths, **overrides) -> GlueConfig:
    values = dict(
        zoo=paths,
        merge_strategy="coef",
        evaluator=f"analytic:target={root / 'target'}",
        seed=11,
        mixture={'router': "mlp"},
    )
    values.update(overrides)
    return GlueConfig(**values)


def test_cluster_by_arch_planted(tmp_path):
    paths, _, _ = planted_zoo(tmp_path)
    report = cluster_by_arch(load_zoo(paths), 0.95)
    assert report.clusters == [[0, 1, 2], [3, 4]]
    assert all(sim >= 0.95 for sim in report.min_intra_sim)


def test_planted_clusters_and_representatives(tmp_path):
    paths, models, desc = planted_zoo(tmp_path)
    report = run_model_glue(glue_config(tmp_path, paths), out_dir=str(tmp_path / "run"))

    assert report.clusters.clusters == [[0, 1, 2], [3, 4]]
    assert [o.members for o in report.outcomes] == [["a0", "a1", "a2"], ["b0", "b1"]]
    for outcome in report.outcomes:
        assert outcome.strategy == "coef"
        assert outcome.representative_fitness >= outcome.best_single_fitness
        merged = outcome.representative_fitness > outcome.best_single_fitness
        assert (outcome.representative_source == "merged") == merged
        if merged:
            assert outcome.representative_id == f"cluster-{outcome.index}-merged"

    # 目標是 family a 的平均, 合併必然嚴格優於任何單一成員
    assert report.outcomes[0].representative_source == "merged"
    assert report.final_kind == "mixture"
    assert report.mixture.level == "model"
    assert report.mixture.top_k == 1
    assert report.mixture.experts == report.representative_ids
    assert report.mixture_fitness is None

    run = tmp_path / "run"
    for name in ("clusters.json", "report.json", "clusters/0/result.json", "clusters/0/trace.jsonl",
                 "clusters/1/checkpoint/model.safetensors", "mixture/mixture.json"):
        assert (run / name).exists(), name
    spec, pool = load_mixture_bundle(run / "mixture")
    assert spec.to_dict() == report.mixture.to_dict()
    saved_report = json.loads((run / "report.json").read_text(encoding='utf-8'))
    assert saved_report['representatives'] == report.representative_ids


def test_recipe_reproduces_representative(tmp_path):
    paths, models, desc = planted_zoo(tmp_path)
    run_model_glue(glue_config(tmp_path, paths), out_dir=str(tmp_path / "run"))

    result = json.loads((tmp_path / "run" / "clusters" / "0" / "result.json").read_text(encoding='utf-8'))
    recipe = MergeRecipe.from_dict(result['search']['recipe'])
    stores = [store for _, store in models[:3]]
    rebuilt = apply_recipe(stores, desc, None, recipe)
    assert rebuilt.content_hash() == result['representative_hash']

    saved, _ = load_checkpoint(tmp_path / "run" / "clusters" / "0" / "checkpoint")
    assert saved.equal(rebuilt)


def test_same_seed_is_byte_identical(tmp_path):
    paths, _, _ = planted_zoo(tmp_path)
    config = glue_config(tmp_path, paths)
    run_model_glue(config, out_dir=str(tmp_path / "first"))
    run_model_glue(config, out_dir=str(tmp_path / "second"))
    for name in ("report.json", "clusters.json", "clusters/0/trace.jsonl",
                 "clusters/0/checkpoint/model.safetensors", "mixture/routers.safetensors"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes(), name


def test_falls_back_to_best_single(tmp_path):
    paths, models, _ = planted_zoo(tmp_path, target_ids=("a1",))
    report = run_model_glue(glue_config(tmp_path, paths))
    first = report.outcomes[0]
    assert first.best_single_id == "a1"
    assert first.representative_source == "single"
    assert first.representative_id == "a1"
    assert first.representative_fitness == 0.0
    assert first.search is not None
    assert report.representatives[0][1].equal(dict(models)["a1"])


def test_singleton_zoo_is_final_model(tmp_path):
    paths, models, _ = planted_zoo(tmp_path)
    report = run_model_glue(glue_config(tmp_path, paths[:1]), out_dir=str(tmp_path / "run"))
    assert report.final_kind == "model"
    assert report.final_id == "a0"
    assert report.outcomes[0].strategy is None
    assert report.outcomes[0].search is None
    assert (tmp_path / "run" / "final" / "model.safetensors").exists()
    assert not (tmp_path / "run" / "mixture").exists()
    final, _ = load_checkpoint(tmp_path / "run" / "final")
    assert final.equal(models[0][1])


def test_ffn_final(tmp_path):
    paths, _, _ = planted_zoo(tmp_path)
    report = run_model_glue(glue_config(tmp_path, paths, final="ffn"))
    assert report.final_kind == "mixture"
    assert report.mixture.level == "ffn"
    selected = []
    for outcome in report.outcomes:
        selected.extend(outcome.search['selected_ids'])
    order = ["a0", "a1", "a2", "b0", "b1"]
    assert report.mixture.experts == sorted(set(selected), key=order.index)


def test_toy_ppl_with_trained_router(tmp_path):
    _, desc, expert_a, expert_b = memorized_experts()
    paths = save_models([("expert_a", expert_a), ("expert_b", expert_b)], desc, tmp_path / "zoo")
    starts = range(0, 16, 2)
    corpus = write_json_file(tmp_path / "corpus.json", domain_corpus("a", starts) + domain_corpus("b", starts))

    config = GlueConfig(zoo=paths, threshold=0.99999, evaluator="toy-ppl", corpus=str(corpus),
                        mixture={'router': "mlp", 'train_steps': 20}, seed=3)
    glue = ModelGlue(config)
    report = glue.run()
    assert report.representative_ids == ["expert_a", "expert_b"]
    assert report.final_kind == "mixture"
    assert math.isfinite(report.mixture_fitness)
    assert glue.get_stats()['clusters'] == 2
    assert glue.get_stats()['single_representatives'] == 2


def test_config_file_resolves_relative_paths(tmp_path):
    paths, _, _ = planted_zoo(tmp_path)
    config_path = tmp_path / "glue.yaml"
    config_path.write_text(yaml.safe_dump({
        'zoo': [str(Path(p).relative_to(tmp_path)) for p in paths],
        'evaluator': "analytic:target=target",
        'merge_strategy': "avg",
        'mixture': {'router': "mlp"},
    }), encoding='utf-8')
    config = load_glue_config(config_path)
    assert config.zoo == [str(tmp_path / Path(p).relative_to(tmp_path)) for p in paths]
    assert config.evaluator == f"analytic:target={tmp_path / 'target'}"
    report = run_model_glue(config)
    assert [o.strategy for o in report.outcomes] == ["avg", "avg"]


def test_config_validation():
    with pytest.raises(PipelineError) as info:
        GlueConfig(zoo=["x"], merge_strategy="bogus")
    assert info.value.stage == "config"
    with pytest.raises(PipelineError):
        GlueConfig(zoo=[])
    with pytest.raises(PipelineError):
        GlueConfig(zoo=["x"], final="block")
    with pytest.raises(PipelineError):
        GlueConfig(zoo=["x"], mixture={'router': "gru"})
    with pytest.raises(PipelineError):
        load_glue_config("/nonexistent/glue.yaml")


def test_load_failure_names_stage(tmp_path):
    config = GlueConfig(zoo=[str(tmp_path / "missing")], evaluator="analytic:target=nowhere")
    with pytest.raises(PipelineError) as info:
        run_model_glue(config)
    assert info.value.stage == "load"


def main():
    return run_tests("測試 GLUE 流程", [
        test_cluster_by_arch_planted,
        test_planted_clusters_and_representatives,
        test_recipe_reproduces_representative,
        test_same_seed_is_byte_identical,
        test_falls_back_to_best_single,
        test_singleton_zoo_is_final_model,
        test_ffn_final,
        test_toy_ppl_with_trained_router,
        test_config_file_resolves_relative_paths,
        test_config_validation,
        test_load_failure_names_stage,
    ])


if __name__ == "__main__":
    sys.exit(main())
