#!/usr/bin/env python3
"""
測試 checkpoint 讀寫與相容性檢查

驗證項目:
1. save → load 逐位元相同, 重複儲存檔案位元組相同
2. 缺檔 / 壞 header / manifest 與張量不符時拋出 CheckpointError
3. check_compat 的對稱性與三種判定
4. 命名規則推導角色
"""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

import pytest
import torch

from fixtures import run_tests, tiny_config, toy_family
from src.checkpoint.checkpoint_io import check_compat, check_store_compat, load_checkpoint, save_checkpoint
from src.checkpoint.roles import derive_tensor_roles
from src.checkpoint.tensor_store import ArchDescriptor, TensorRole, TensorStore
from src.checkpoint.zoo import expand_zoo_args, load_zoo
from src.errors import CheckpointError
from src.runtime.toy_model import build_toy_model


def test_round_trip_bit_exact(tmp_path):
    _, desc, members = toy_family(1, 3)
    for model_id, store in members:
        save_checkpoint(store, desc, tmp_path / model_id)
        loaded, loaded_desc = load_checkpoint(tmp_path / model_id)
        assert loaded.equal(store)
        assert loaded_desc == desc
        assert loaded.content_hash() == store.content_hash()


def test_save_is_byte_deterministic(tmp_path):
    store, desc = build_toy_model(tiny_config(), seed=3)
    save_checkpoint(store, desc, tmp_path / "a")
    save_checkpoint(store, desc, tmp_path / "b")
    for name in ("model.safetensors", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_file(tmp_path):
    store, desc = build_toy_model(tiny_config(), seed=0)
    save_checkpoint(store, desc, tmp_path / "m")
    (tmp_path / "m" / "manifest.json").unlink()
    with pytest.raises(CheckpointError, match="missing file"):
        load_checkpoint(tmp_path / "m")


def test_malformed_header(tmp_path):
    store, desc = build_toy_model(tiny_config(), seed=0)
    save_checkpoint(store, desc, tmp_path / "m")
    (tmp_path / "m" / "model.safetensors").write_bytes(b"\x08\x00\x00\x00\x00\x00\x00\x00{broken}")
    with pytest.raises(CheckpointError, match="malformed"):
        load_checkpoint(tmp_path / "m")


def test_manifest_names_missing_tensor(tmp_path):
    store, desc = build_toy_model(tiny_config(), seed=0)
    save_checkpoint(store, desc, tmp_path / "m")
    manifest_path = tmp_path / "m" / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    manifest['tensor_roles']['model.layers.9.mlp.extra.weight'] = "ffn:1"
    manifest_path.write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path / "m")


def test_num_layers_mismatch(tmp_path):
    store, desc = build_toy_model(tiny_config(), seed=0)
    save_checkpoint(store, desc, tmp_path / "m")
    manifest_path = tmp_path / "m" / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    manifest['num_layers'] = 3
    manifest_path.write_text(json.dumps(manifest), encoding='utf-8')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m")


def test_store_rejects_bad_tensors():
    with pytest.raises(CheckpointError):
        TensorStore({"w": torch.zeros(2, 2, dtype=torch.float64)})
    with pytest.raises(CheckpointError):
        TensorStore({"": torch.zeros(2)})
    store = TensorStore({"b": torch.zeros(1), "a": torch.ones(2)})
    assert store.names() == ["a", "b"]


def test_check_compat_verdicts():
    a, desc_a = build_toy_model(tiny_config(), seed=0)
    b, desc_b = build_toy_model(tiny_config(), seed=1)
    assert check_compat(desc_a, a.shapes(), desc_b, b.shapes()).verdict == "mergeable"

    c, desc_c = build_toy_model(tiny_config(num_layers=3), seed=0)
    report = check_store_compat((a, desc_a), (c, desc_c))
    assert report.verdict == "mixture_only"
    assert not report.same_arch
    assert report.shape_mismatches

    d, desc_d = build_toy_model(tiny_config(hidden_dim=8, num_heads=2), seed=0)
    assert check_store_compat((a, desc_a), (d, desc_d)).verdict == "incompatible"


def test_check_compat_symmetric():
    a, desc_a = build_toy_model(tiny_config(), seed=0)
    c, desc_c = build_toy_model(tiny_config(ffn_dim=48), seed=0)
    forward = check_store_compat((a, desc_a), (c, desc_c))
    backward = check_store_compat((c, desc_c), (a, desc_a))
    assert forward == backward
    assert forward.verdict == "mixture_only"


def test_derive_roles():
    roles = derive_tensor_roles([
        "model.embed_tokens.weight",
        "model.layers.3.self_attn.q_proj.weight",
        "model.layers.3.mlp.up_proj.weight",
        "model.layers.0.input_layernorm.weight",
        "lm_head.weight",
        "rotary.inv_freq",
    ], scheme="llama")
    assert roles["model.embed_tokens.weight"] == TensorRole("embedding")
    assert roles["model.layers.3.self_attn.q_proj.weight"] == TensorRole("attention", 3)
    assert roles["model.layers.3.mlp.up_proj.weight"] == TensorRole("ffn", 3)
    assert roles["model.layers.0.input_layernorm.weight"] == TensorRole("norm", 0)
    assert roles["lm_head.weight"] == TensorRole("lm_head")
    assert roles["rotary.inv_freq"] == TensorRole("other")


def test_descriptor_rejects_out_of_range_layer():
    with pytest.raises(CheckpointError):
        ArchDescriptor(num_layers=2, hidden_dim=4, ffn_dim=8, vocab_size=8, num_heads=2,
                       tensor_roles={"x": TensorRole("ffn", 2)})


def test_zoo_list_file(tmp_path):
    _, desc, members = toy_family(2, 2)
    for model_id, store in members:
        save_checkpoint(store, desc, tmp_path / "zoo" / model_id)
    listing = tmp_path / "zoo.json"
    listing.write_text(json.dumps(["zoo/m0", "zoo/m1"]), encoding='utf-8')

    paths = expand_zoo_args([str(listing)])
    zoo = load_zoo(paths)
    assert zoo.ids == ["m0", "m1"]
    assert zoo[1].store.equal(members[1][1])


def test_zoo_rejects_duplicate_ids(tmp_path):
    _, desc, members = toy_family(2, 2)
    paths = [str(save_checkpoint(store, desc, tmp_path / model_id)) for model_id, store in members]
    with pytest.raises(CheckpointError):
        load_zoo(paths, ids=["x", "x"])


def main():
    return run_tests("測試 checkpoint 讀寫", [
        test_round_trip_bit_exact,
        test_save_is_byte_deterministic,
        test_missing_file,
        test_malformed_header,
        test_manifest_names_missing_tensor,
        test_num_layers_mismatch,
        test_store_rejects_bad_tensors,
        test_check_compat_verdicts,
        test_check_compat_symmetric,
        test_derive_roles,
        test_descriptor_rejects_out_of_range_layer,
        test_zoo_list_file,
        test_zoo_rejects_duplicate_ids,
    ])


if __name__ == "__main__":
    sys.exit(main())
