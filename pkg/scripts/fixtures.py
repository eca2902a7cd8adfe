"""
測試共用 fixture: toy zoo、語料、記憶型專家、測試執行器
"""

import json
import sys
import tempfile
import traceback
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

# 添加專案根目錄到路徑
sys.path.insert(0, str(Path(__file__).parent.parent))

from loguru import logger

from src.checkpoint.checkpoint_io import save_checkpoint
from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.runtime.toy_model import ToyConfig, build_toy_model, logits_for_tokens, make_finetuned_variant

# 測試用的小型結構 (2 層, hidden 16)
TINY = dict(num_layers=2, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=32, max_seq=16)

# 兩個記憶型專家的 token 區間
DOMAIN_A = range(0, 16)
DOMAIN_B = range(16, 32)


def tiny_config(**overrides) -> ToyConfig:
    return ToyConfig(**{**TINY, **overrides})


def toy_family(base_seed: int, count: int, rel_noise: float = 0.05, prefix: str = "m",
               cfg: Optional[ToyConfig] = None) -> Tuple[TensorStore, ArchDescriptor, List[Tuple[str, TensorStore]]]:
    """
    同一初始化的一群微調變體

    Returns:
        (base, desc, [(model_id, store), ...])
    """
    base, desc = build_toy_model(cfg or tiny_config(), seed=base_seed)
    members = [
        (f"{prefix}{i}", make_finetuned_variant(base, rel_noise, seed=base_seed * 100 + i + 1))
        for i in range(count)
    ]
    return base, desc, members


def random_corpus(count: int, length: int, vocab: int = 32, seed: int = 0) -> List[List[int]]:
    generator = torch.Generator().manual_seed(seed)
    return torch.randint(0, vocab, (count, length), generator=generator).tolist()


def domain_sequence(domain: str, start: int, length: int) -> List[int]:
    """A: 步長 1 的循環; B: 步長 3 的循環 (token 區間互不重疊)"""
    if domain == "a":
        return [DOMAIN_A[(start + i) % 16] for i in range(length)]
    return [DOMAIN_B[(start + 3 * i) % 16] for i in range(length)]


def domain_corpus(domain: str, starts: Sequence[int], length: int = 12) -> List[List[int]]:
    return [domain_sequence(domain, start, length) for start in starts]


def train_expert(store: TensorStore, desc: ArchDescriptor, corpus: Sequence[Sequence[int]],
                 steps: int = 150, lr: float = 0.01) -> TensorStore:
    """以 next-token loss 微調全部權重 (讓專家記住 corpus 的規律)"""
    cfg = ToyConfig.from_descriptor(desc)
    params = {name: store[name].detach().clone().requires_grad_(True) for name in store}
    optimizer = torch.optim.Adam(list(params.values()), lr=lr)
    tokens = torch.tensor(corpus, dtype=torch.long)
    for _ in range(steps):
        optimizer.zero_grad()
        logits = logits_for_tokens(params, desc.num_layers, tokens, cfg)
        loss = F.cross_entropy(logits[:, :-1, :].reshape(-1, desc.vocab_size), tokens[:, 1:].reshape(-1))
        loss.backward()
        optimizer.step()
    return TensorStore({name: tensor.detach().clone() for name, tensor in params.items()})


@lru_cache(maxsize=1)
def memorized_experts():
    """
    兩個由同一 base 微調而來、分別記住 domain A / B 的專家

    base 先在兩個 domain 上短暫預訓練, 兩邊 token 的 embedding 才有相近的尺度。

    Returns:
        (base, desc, expert_a, expert_b)
    """
    init, desc = build_toy_model(tiny_config(), seed=7)
    starts = range(0, 16, 2)
    base = train_expert(init, desc, domain_corpus("a", starts) + domain_corpus("b", starts), steps=60)
    expert_a = train_expert(base, desc, domain_corpus("a", starts))
    expert_b = train_expert(base, desc, domain_corpus("b", starts))
    return base, desc, expert_a, expert_b


def domain_prompts(starts: Sequence[int] = range(0, 16, 2)) -> Dict[str, List[List[int]]]:
    return {'expert_a': domain_corpus("a", starts), 'expert_b': domain_corpus("b", starts)}


def save_models(models: Sequence[Tuple[str, TensorStore]], desc: ArchDescriptor, root: Path) -> List[str]:
    """存成 <root>/<id>/ checkpoint 目錄, 回傳路徑"""
    paths = []
    for model_id, store in models:
        paths.append(str(save_checkpoint(store, desc, Path(root) / model_id)))
    return paths


def write_json_file(path: Path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, ensure_ascii=False), encoding='utf-8')
    return path


def run_tests(title: str, tests: Sequence[Callable]) -> int:
    """
    直接執行測試腳本時使用: 逐一執行 test_* 函數並記錄 ✓/✗

    需要 tmp_path 參數的測試會得到暫存目錄。
    """
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)

    failed = 0
    for test in tests:
        try:
            if "tmp_path" in test.__code__.co_varnames[:test.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    test(Path(tmp))
            else:
                test()
            logger.info(f"✓ {test.__name__}")
        except Exception as e:
            failed += 1
            logger.error(f"✗ {test.__name__}: {e}")
            logger.debug(traceback.format_exc())

    logger.info("=" * 60)
    logger.info(f"通過 {len(tests) - failed}/{len(tests)}")
    logger.info("=" * 60)
    return 1 if failed else 0
