#!/usr/bin/env python3
"""
測試 router 訓練

兩個專家分別記住 domain A / B; 以混合語料訓練 MLP router 後:
1. LM loss 相對下降至少 20%
2. held-out 序列有超過 80% 路由到對應的專家
3. 專家權重完全不變, 只有 router 改變
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
import torch

from fixtures import domain_corpus, domain_prompts, memorized_experts, run_tests
from src.errors import MixtureError
from src.mixture.builders import ExpertPool, build_mixture
from src.mixture.forward import routing_decisions
from src.mixture.training import RouterTrainer, train_router_lm

TRAIN_STARTS = range(0, 16, 2)
HELD_OUT_STARTS = range(1, 16, 2)


def memorized_pool():
    _, desc, expert_a, expert_b = memorized_experts()
    return ExpertPool([("expert_a", expert_a, desc), ("expert_b", expert_b, desc)])


def mixed_corpus(starts):
    return domain_corpus("a", starts) + domain_corpus("b", starts)


def routing_accuracy(spec, pool, starts) -> float:
    decisions = routing_decisions(spec, pool, mixed_corpus(starts))
    half = len(starts)
    correct = 0
    for decision in decisions:
        expected = "expert_a" if decision.sequence < half else "expert_b"
        correct += decision.experts == [expected]
    return correct / len(decisions)


def test_model_level_training_learns_domains():
    pool = memorized_pool()
    hashes = {model_id: pool.store(model_id).content_hash() for model_id in pool.ids}
    spec = build_mixture(pool, "M-M-S", seed=0)

    trainer = RouterTrainer(spec, pool, mixed_corpus(TRAIN_STARTS), lr=0.01, seed=0)
    routers = trainer.train(200)
    stats = trainer.get_stats()
    trained = spec.with_routers(routers)

    assert stats['steps'] == 200
    assert stats['final_loss'] <= 0.8 * stats['initial_loss']
    assert routing_accuracy(trained, pool, HELD_OUT_STARTS) > 0.8
    assert not routers[0].equal(spec.routers[0])
    assert {model_id: pool.store(model_id).content_hash() for model_id in pool.ids} == hashes


def test_ffn_level_training_reduces_loss():
    pool = memorized_pool()
    hashes = {model_id: pool.store(model_id).content_hash() for model_id in pool.ids}
    spec = build_mixture(pool, "F-M-S", base="expert_a", seed=1, top_k=1)

    trainer = RouterTrainer(spec, pool, mixed_corpus(TRAIN_STARTS), lr=0.01, seed=0)
    routers = trainer.train(50)
    assert len(routers) == spec.num_layers
    assert trainer.get_stats()['final_loss'] < trainer.get_stats()['initial_loss']
    assert {model_id: pool.store(model_id).content_hash() for model_id in pool.ids} == hashes


def test_zero_steps_and_zero_lr():
    pool = memorized_pool()
    spec = build_mixture(pool, "F-M-T", seed=2)
    unchanged = train_router_lm(spec, pool, mixed_corpus(TRAIN_STARTS), steps=0)
    assert all(a.equal(b) for a, b in zip(unchanged, spec.routers))

    frozen = train_router_lm(spec, pool, mixed_corpus(TRAIN_STARTS), steps=3, lr=0.0)
    for a, b in zip(frozen, spec.routers):
        for key in a.weights:
            assert torch.allclose(a.weights[key], b.weights[key])


def test_training_is_deterministic():
    pool = memorized_pool()
    spec = build_mixture(pool, "M-M-S", seed=4)
    corpus = mixed_corpus(TRAIN_STARTS)
    first = train_router_lm(spec, pool, corpus, steps=10, seed=3, batch_size=6)
    second = train_router_lm(spec, pool, corpus, steps=10, seed=3, batch_size=6)
    assert all(a.equal(b) for a, b in zip(first, second))


def test_linear_router_rejected():
    pool = memorized_pool()
    spec = build_mixture(pool, "M-L-S", prompts=domain_prompts())
    with pytest.raises(MixtureError):
        train_router_lm(spec, pool, mixed_corpus(TRAIN_STARTS), steps=5)


def test_invalid_corpus_and_steps():
    pool = memorized_pool()
    spec = build_mixture(pool, "M-M-S")
    with pytest.raises(MixtureError):
        RouterTrainer(spec, pool, [[1]])
    with pytest.raises(MixtureError):
        RouterTrainer(spec, pool, mixed_corpus(TRAIN_STARTS)).train(-1)


def main():
    return run_tests("測試 router 訓練", [
        test_model_level_training_learns_domains,
        test_ffn_level_training_reduces_loss,
        test_zero_steps_and_zero_lr,
        test_training_is_deterministic,
        test_linear_router_rejected,
        test_invalid_corpus_and_steps,
    ])


if __name__ == "__main__":
    sys.exit(main())
