"""
glueforge 命令列介面

子命令:
    toy-model   建立 toy checkpoint (或由既有模型產生微調變體)
    similarity  兩兩權重相似度
    cluster     結構分組 + 相似度分群
    merge       依 recipe 或係數合併
    search      啟發式 / evolutionary 係數搜尋
    mix         組裝 MoE
    glue        完整合併 + MoE 流程
    eval        計算模型或 mixture 的適應度
    inspect     顯示 checkpoint / mixture 結構或搜尋 trace 摘要
    bench       對照實驗

結束代碼: 0 成功, 1 用法錯誤, 2 執行錯誤。每次執行都會在 --out 寫入 manifest.json。
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import yaml
from loguru import logger

from src import __version__
from src.checkpoint.checkpoint_io import load_checkpoint, save_checkpoint
from src.checkpoint.zoo import ModelZoo, expand_zoo_args, load_zoo
from src.errors import GlueForgeError, UsageError
from src.merging.recipe import METHODS, MergeRecipe, apply_recipe, whole_model_recipe
from src.mixture.builders import ExpertPool, LEVELS, ROUTER_INPUTS, build_mixture, parse_mixture_code
from src.mixture.bundle import load_mixture_bundle, save_mixture_bundle
from src.mixture.training import train_router_lm
from src.pipeline.benchmarks import (
    BENCH_KINDS,
    compare_merge_methods,
    compare_mixtures,
    compare_strategies,
    compare_warm_start,
    sweep_group_size,
)
from src.pipeline.glue import STRATEGIES, cluster_by_arch, load_glue_config, run_model_glue
from src.runtime.fitness import build_evaluator, load_corpus
from src.runtime.toy_model import ToyConfig, build_toy_model, make_finetuned_variant
from src.search.evolutionary import evolutionary_merge, warm_start_refine
from src.search.heuristics import heuristic_average, heuristic_coefficient, heuristic_similarity
from src.similarity.cosine import similarity_matrix
from src.storage.jsonl_handler import JSONLHandler
from src.storage.run_store import RunStore
from src.utils.logger import setup_logger

MODEL_DIR = "model"
MIXTURE_DIR = "mixture"


class UsageParser(argparse.ArgumentParser):
    """argparse 錯誤改為 UsageError (由 cli_dispatch 對應到 exit 1)"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------
# 共用
# ----------------------------------------------------------------------

def _load_zoo(args) -> ModelZoo:
    if not args.zoo:
        raise UsageError("需要 --zoo")
    return load_zoo(expand_zoo_args(args.zoo), args.ids)


def _read_structured(path) -> Any:
    """讀取 JSON / YAML 檔"""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"檔案不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f)


def _print_json(data: Any):
    print(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True))


def _parse_router(value: str) -> Dict[str, Any]:
    """--router linear:prompts.json | mlp | mlp:r=16"""
    kind, _, arg = value.partition(":")
    if kind == "linear":
        return {'kind': "linear", 'prompts': arg or None}
    if kind == "mlp":
        hidden = None
        if arg:
            key, _, number = arg.partition("=")
            if key != "r" or not number.isdigit():
                raise UsageError(f"--router mlp 參數格式為 mlp:r=<寬度>, 實際為 {value!r}")
            hidden = int(number)
        return {'kind': "mlp", 'hidden': hidden}
    raise UsageError(f"未知的 router: {value!r} (linear:<prompts.json> 或 mlp[:r=N])")


def _select_for_recipe(zoo: ModelZoo, recipe: MergeRecipe) -> ModelZoo:
    """recipe 帶有 model_ids 時依其順序取出 zoo 中的模型"""
    if recipe.model_ids is None or zoo.ids == list(recipe.model_ids):
        return zoo
    return zoo.subset([zoo.index_of(model_id) for model_id in recipe.model_ids])


def _recipe_from_file(path) -> MergeRecipe:
    """recipe.json, search 的 result.json 或 glue 的 clusters/<i>/result.json"""
    data = _read_structured(path) or {}
    if 'search' in data:
        data = data['search'] or {}
    if 'recipe' in data:
        data = data['recipe']
    if 'method' not in data:
        raise UsageError(f"{path} 中找不到 recipe")
    return MergeRecipe.from_dict(data)


# ----------------------------------------------------------------------
# 子命令
# ----------------------------------------------------------------------

def cmd_toy_model(args, store: RunStore) -> Dict[str, Any]:
    target = store.path(MODEL_DIR)
    if args.finetune_from:
        source, desc = load_checkpoint(args.finetune_from)
        model = make_finetuned_variant(source, args.noise, args.seed)
    else:
        overrides = {key: value for key, value in {
            'num_layers': args.layers,
            'hidden_dim': args.hidden,
            'ffn_dim': args.ffn,
            'num_heads': args.heads,
            'vocab_size': args.vocab,
            'max_seq': args.max_seq,
        }.items() if value is not None}
        model, desc = build_toy_model(ToyConfig.from_dict(overrides), seed=args.seed)
    save_checkpoint(model, desc, target)
    summary = {'path': str(target), 'hash': model.content_hash(), 'num_parameters': model.num_parameters()}
    _print_json(summary)
    return summary


def cmd_similarity(args, store: RunStore) -> Dict[str, Any]:
    zoo = _load_zoo(args)
    matrix = similarity_matrix(zoo.stores, ids=zoo.ids, flatten=args.flatten or None)
    data = matrix.to_dict()
    store.save_json("similarity.json", data)
    _print_json(data)
    return {'models': len(zoo)}


def cmd_cluster(args, store: RunStore) -> Dict[str, Any]:
    zoo = _load_zoo(args)
    report = cluster_by_arch(zoo, args.threshold)
    data = report.to_dict()
    store.save_json("clusters.json", data)
    _print_json(data['cluster_ids'])
    return {'clusters': len(report.clusters)}


def cmd_merge(args, store: RunStore) -> Dict[str, Any]:
    if (args.recipe is None) == (args.coeffs is None):
        raise UsageError("--recipe 與 --coeffs 必須擇一")
    zoo = _load_zoo(args)
    if args.recipe:
        recipe = _recipe_from_file(args.recipe)
        zoo = _select_for_recipe(zoo, recipe)
    else:
        if len(args.coeffs) != len(zoo):
            raise UsageError(f"--coeffs 數量 {len(args.coeffs)} 與模型數 {len(zoo)} 不符")
        recipe = whole_model_recipe(args.method, args.coeffs, zoo[0].desc.num_layers,
                                    seed=args.seed, model_ids=zoo.ids)
    base = load_checkpoint(args.base)[0] if args.base else None
    desc = zoo[0].desc

    merged = apply_recipe(zoo.stores, desc, base, recipe)
    target = store.path(MODEL_DIR)
    save_checkpoint(merged, desc, target)
    store.save_json("recipe.json", recipe.to_dict())
    summary = {'path': str(target), 'hash': merged.content_hash(), 'method': recipe.method}
    _print_json(summary)
    return summary


def _run_search(args, zoo: ModelZoo, evaluator):
    items = [(entry.id, entry.store) for entry in zoo]
    desc = zoo[0].desc
    strategy = args.strategy
    if strategy == "avg":
        return heuristic_average(items, desc, evaluator)
    if strategy == "coef":
        return heuristic_coefficient(items, desc, evaluator)
    if strategy in ("sim-high", "sim-low"):
        return heuristic_similarity(items, desc, evaluator, order="highest" if strategy == "sim-high" else "lowest")
    base = load_checkpoint(args.base)[0] if args.base else None
    if strategy == "evo":
        return evolutionary_merge(items, desc, evaluator, base=base, method=args.method,
                                  group_size=args.group_size, budget=args.budget, seed=args.seed)
    heuristic = heuristic_coefficient(items, desc, evaluator)
    return warm_start_refine(heuristic, items, desc, evaluator, delta=args.delta, budget=args.budget,
                             seed=args.seed, group_size=args.group_size)


def cmd_search(args, store: RunStore) -> Dict[str, Any]:
    if args.strategy not in ("evo",) and args.method != "linear":
        raise UsageError(f"--method {args.method} 只能搭配 --strategy evo")
    zoo = _load_zoo(args)
    evaluator = build_evaluator(args.evaluator, corpus=args.corpus)
    result = _run_search(args, zoo, evaluator)

    store.save_json("result.json", result.to_dict())
    JSONLHandler(str(store.run_dir)).write_trace("trace.jsonl", result.trace)
    save_checkpoint(result.merged, zoo[0].desc, store.path(MODEL_DIR))
    summary = {'strategy': result.strategy, 'fitness': result.fitness, 'selected_ids': result.selected_ids,
               'trials_used': result.trials_used}
    _print_json(summary)
    return summary


def _mixture_code(args, router_kind: str) -> str:
    router_code = "L" if router_kind == "linear" else "M"
    if args.method:
        if args.level or args.router_input or args.hybrid_k is not None:
            raise UsageError("--method 不可與 --level / --router-input / --hybrid-k 同時使用")
        method = parse_mixture_code(args.method)
        if method.router_kind != router_kind:
            raise UsageError(f"--method {args.method} 與 --router {router_kind} 衝突")
        return method.code
    level = args.level or "ffn"
    router_input = args.router_input or ("token" if level == "ffn" else "sample")
    if level != "ffn" and router_input != "sample":
        raise UsageError(f"{level} level 只支援 --router-input sample")
    if args.hybrid_k is not None and level != "ffn":
        raise UsageError("--hybrid-k 只支援 ffn level")
    code = f"{level[0].upper()}-{router_code}-{router_input[0].upper()}"
    return f"Hybrid {code}" if args.hybrid_k is not None else code


def cmd_mix(args, store: RunStore) -> Dict[str, Any]:
    router = _parse_router(args.router)
    code = _mixture_code(args, router['kind'])
    if router['kind'] == "linear" and not router['prompts']:
        raise UsageError("linear router 需要 prompt 檔: --router linear:<prompts.json>")
    if args.train_steps and router['kind'] != "mlp":
        raise UsageError("--train-steps 只適用於 MLP router")
    if args.train_steps and not args.corpus:
        raise UsageError("--train-steps 需要 --corpus")

    zoo = _load_zoo(args)
    merge_base = load_checkpoint(args.base_model)[0] if args.base_model else None
    pool = ExpertPool.from_zoo(zoo, merge_base=merge_base)
    prompts = _read_structured(router['prompts']) if router['prompts'] else None
    merge_recipe = _recipe_from_file(args.merge_recipe) if args.merge_recipe else None

    spec = build_mixture(pool, code, base=args.base, prompts=prompts, top_k=args.top_k,
                         hidden=router.get('hidden'), seed=args.seed, k_merge=args.hybrid_k,
                         merge_recipe=merge_recipe)
    if args.train_steps:
        routers = train_router_lm(spec, pool, load_corpus(args.corpus), steps=args.train_steps,
                                  lr=args.lr, seed=args.seed)
        spec = spec.with_routers(routers)

    target = save_mixture_bundle(spec, pool, store.path(MIXTURE_DIR))
    summary = {'path': str(target), 'method': code, 'experts': list(spec.experts), 'top_k': spec.top_k}
    _print_json(summary)
    return summary


def cmd_glue(args, store: RunStore) -> Dict[str, Any]:
    config = load_glue_config(args.config)
    if args.final:
        config.final = args.final
    if args.seed is not None:
        config.seed = args.seed
    # manifest 記錄實際使用的 seed
    args.seed = config.seed
    report = run_model_glue(config, out_dir=str(store.run_dir))
    summary = {
        'clusters': report.clusters.to_dict()['cluster_ids'],
        'representatives': report.representative_ids,
        'final': report.final_kind,
        'mixture_fitness': report.mixture_fitness,
    }
    _print_json(summary)
    return summary


def cmd_eval(args, store: RunStore) -> Dict[str, Any]:
    if (args.model is None) == (args.mixture is None):
        raise UsageError("--model 與 --mixture 必須擇一")
    evaluator = build_evaluator(args.evaluator, corpus=args.corpus)
    if args.model:
        model, desc = load_checkpoint(args.model)
        fitness = evaluator(model, desc)
    else:
        if not hasattr(evaluator, 'evaluate_mixture'):
            raise UsageError(f"evaluator {args.evaluator} 無法評估 mixture")
        spec, pool = load_mixture_bundle(args.mixture)
        fitness = evaluator.evaluate_mixture(spec, pool)
    store.save_json("eval.json", {'evaluator': evaluator.id, 'fitness': fitness})
    print(repr(fitness))
    return {'fitness': fitness}


def cmd_inspect(args, store: RunStore) -> Dict[str, Any]:
    targets = [value for value in (args.model, args.mixture, args.trace) if value is not None]
    if len(targets) != 1:
        raise UsageError("--model, --mixture 與 --trace 必須擇一")
    if args.trace:
        info = _trace_summary(args.trace)
    elif args.model:
        model, desc = load_checkpoint(args.model)
        info = {
            'descriptor': {
                'num_layers': desc.num_layers,
                'hidden_dim': desc.hidden_dim,
                'ffn_dim': desc.ffn_dim,
                'num_heads': desc.num_heads,
                'vocab_size': desc.vocab_size,
            },
            'num_tensors': len(model.names()),
            'num_parameters': model.num_parameters(),
            'content_hash': model.content_hash(),
        }
    else:
        spec, pool = load_mixture_bundle(args.mixture)
        info = spec.to_dict()
        info['expert_hashes'] = {model_id: pool.store(model_id).content_hash() for model_id in spec.experts}
        info.pop('routers')
        info['routers'] = [{'kind': r.kind, 'in_dim': r.in_dim, 'num_experts': r.num_experts, 'hidden': r.hidden}
                           for r in spec.routers]
    store.save_json("inspect.json", info)
    _print_json(info)
    return {'inspected': targets[0]}


def _trace_summary(path: str) -> Dict[str, Any]:
    trace_path = Path(path)
    if not trace_path.is_file():
        raise FileNotFoundError(f"找不到 trace 檔案: {trace_path}")
    handler = JSONLHandler(str(trace_path.parent))
    trace = handler.read_trace(trace_path.name)
    accepted = handler.accepted_entries(trace_path.name)
    best = max(trace, key=lambda entry: entry.fitness, default=None)
    return {
        'trials': handler.count_items(trace_path.name),
        'accepted': [entry.to_dict() for entry in accepted],
        'best': best.to_dict() if best else None,
    }


def cmd_bench(args, store: RunStore) -> Dict[str, Any]:
    zoo = _load_zoo(args)
    evaluator = build_evaluator(args.evaluator, corpus=args.corpus)
    items = [(entry.id, entry.store) for entry in zoo]
    desc = zoo[0].desc

    if args.kind == "strategies":
        table = compare_strategies(items, desc, evaluator)
    elif args.kind == "methods":
        base = load_checkpoint(args.base)[0] if args.base else None
        table = compare_merge_methods(items, desc, base, evaluator, budget=args.budget, seed=args.seed)
    elif args.kind == "group-size":
        table = sweep_group_size(items, desc, evaluator, sizes=args.sizes, budget=args.budget, seed=args.seed)
    elif args.kind == "warm":
        table = compare_warm_start(items, desc, evaluator, budget=args.budget, seed=args.seed)
    else:
        codes = args.codes or ["M-L-S", "B-L-S", "F-L-S", "F-L-T"]
        prompts = _read_structured(args.prompts) if args.prompts else None
        if prompts is None and any(parse_mixture_code(code).router_kind == "linear" for code in codes):
            raise UsageError("linear router 的 mixture 需要 --prompts")
        table = compare_mixtures(ExpertPool.from_zoo(zoo), codes, evaluator, prompts=prompts, seed=args.seed)

    table.save(store.path("bench.json"))
    _print_json(table.to_dict())
    return {'kind': args.kind, 'best': table.best()['name']}


COMMANDS: Dict[str, Callable] = {
    'toy-model': cmd_toy_model,
    'similarity': cmd_similarity,
    'cluster': cmd_cluster,
    'merge': cmd_merge,
    'search': cmd_search,
    'mix': cmd_mix,
    'glue': cmd_glue,
    'eval': cmd_eval,
    'inspect': cmd_inspect,
    'bench': cmd_bench,
}


# ----------------------------------------------------------------------
# 參數
# ----------------------------------------------------------------------

def build_parser() -> UsageParser:
    parser = UsageParser(prog="glueforge", description="模型合併與 MoE 組裝工具")
    parser.add_argument('--version', action='version', version=f"glueforge {__version__}")
    subparsers = parser.add_subparsers(dest='command', parser_class=UsageParser)
    subparsers.required = True

    common = UsageParser(add_help=False)
    common.add_argument('--out', help='輸出目錄 (預設 runs/<command>)')
    common.add_argument('--log-level', help='日誌等級')

    seeded = UsageParser(add_help=False)
    seeded.add_argument('--seed', type=int, default=0, help='隨機種子')

    zoo_args = UsageParser(add_help=False)
    zoo_args.add_argument('--zoo', nargs='+', help='checkpoint 目錄或清單檔')
    zoo_args.add_argument('--ids', nargs='+', help='模型 ID (預設為目錄名稱)')

    eval_args = UsageParser(add_help=False)
    eval_args.add_argument('--evaluator', default="toy-ppl", help='toy-ppl[:<語料>] 或 analytic:target=<dir>')
    eval_args.add_argument('--corpus', help='語料 JSON')

    p = subparsers.add_parser('toy-model', parents=[common, seeded], help='建立 toy checkpoint')
    p.add_argument('--layers', type=int)
    p.add_argument('--hidden', type=int)
    p.add_argument('--ffn', type=int)
    p.add_argument('--heads', type=int)
    p.add_argument('--vocab', type=int)
    p.add_argument('--max-seq', type=int)
    p.add_argument('--finetune-from', help='由此 checkpoint 產生微調變體')
    p.add_argument('--noise', type=float, default=0.01, help='相對雜訊強度')

    p = subparsers.add_parser('similarity', parents=[common, seeded, zoo_args], help='兩兩權重相似度')
    p.add_argument('--flatten', action='store_true', help='攤平成單一向量計算')

    p = subparsers.add_parser('cluster', parents=[common, seeded, zoo_args], help='相似度分群')
    p.add_argument('--threshold', type=float)

    p = subparsers.add_parser('merge', parents=[common, seeded, zoo_args], help='依 recipe 合併')
    p.add_argument('--recipe', help='recipe.json 或 result.json')
    p.add_argument('--coeffs', type=float, nargs='+', help='整個模型一組的係數')
    p.add_argument('--method', choices=METHODS, default="linear")
    p.add_argument('--base', help='base checkpoint')

    p = subparsers.add_parser('search', parents=[common, seeded, zoo_args, eval_args], help='係數搜尋')
    p.add_argument('--strategy', choices=STRATEGIES, default="coef")
    p.add_argument('--method', choices=METHODS, default="linear")
    p.add_argument('--base', help='base checkpoint')
    p.add_argument('--budget', type=int)
    p.add_argument('--group-size', type=int)
    p.add_argument('--delta', type=float)

    p = subparsers.add_parser('mix', parents=[common, seeded, zoo_args], help='組裝 MoE')
    p.add_argument('--level', choices=LEVELS)
    p.add_argument('--method', help='方法代碼, 例如 F-L-T 或 "Hybrid F-M-S"')
    p.add_argument('--router', default="linear", help='linear:<prompts.json> 或 mlp[:r=N]')
    p.add_argument('--top-k', type=int)
    p.add_argument('--router-input', choices=ROUTER_INPUTS)
    p.add_argument('--hybrid-k', type=int)
    p.add_argument('--base', help='共用部分來源的專家 ID')
    p.add_argument('--base-model', help='hybrid 合併使用的 base checkpoint')
    p.add_argument('--merge-recipe', help='hybrid 合併 recipe')
    p.add_argument('--train-steps', type=int, default=0)
    p.add_argument('--lr', type=float)
    p.add_argument('--corpus', help='router 訓練語料')

    p = subparsers.add_parser('glue', parents=[common], help='完整合併 + MoE 流程')
    p.add_argument('--config', required=True, help='glue.json')
    p.add_argument('--final', choices=("model", "ffn"))
    p.add_argument('--seed', type=int, help='覆寫設定檔的 seed')

    p = subparsers.add_parser('eval', parents=[common, seeded, eval_args], help='計算適應度')
    p.add_argument('--model')
    p.add_argument('--mixture')

    p = subparsers.add_parser('inspect', parents=[common, seeded], help='顯示結構')
    p.add_argument('--model')
    p.add_argument('--mixture')
    p.add_argument('--trace', help='搜尋 trace.jsonl')

    p = subparsers.add_parser('bench', parents=[common, seeded, zoo_args, eval_args], help='對照實驗')
    p.add_argument('--kind', choices=BENCH_KINDS, required=True)
    p.add_argument('--base', help='base checkpoint (methods)')
    p.add_argument('--budget', type=int)
    p.add_argument('--sizes', type=int, nargs='+')
    p.add_argument('--codes', nargs='+')
    p.add_argument('--prompts')

    return parser


def _manifest_config(args) -> Dict[str, Any]:
    return {key: value for key, value in sorted(vars(args).items()) if key not in ('command', 'log_level')}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    執行命令列

    Args:
        argv: 參數 (預設 sys.argv[1:])

    Returns:
        結束代碼 (0 成功, 1 用法錯誤, 2 執行錯誤)
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    setup_logger(level=args.log_level)
    store = RunStore(args.out or f"runs/{args.command}")
    store.ensure()
    config = _manifest_config(args)

    logger.info("=" * 60)
    logger.info(f"glueforge {args.command}")
    logger.info("=" * 60)

    try:
        COMMANDS[args.command](args, store)
    except UsageError as e:
        logger.error(f"✗ 用法錯誤: {e}")
        print(f"glueforge {args.command}: {e}", file=sys.stderr)
        store.write_manifest(args.command, config, args.seed, status="error", error=str(e))
        return 1
    except (GlueForgeError, OSError) as e:
        logger.error(f"✗ 執行失敗: {e}")
        print(f"glueforge {args.command}: {e}", file=sys.stderr)
        store.write_manifest(args.command, config, args.seed, status="error", error=str(e))
        return 2
    except Exception as e:
        logger.exception(f"✗ 未預期的錯誤: {e}")
        print(f"glueforge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        store.write_manifest(args.command, config, args.seed, status="error", error=f"{type(e).__name__}: {e}")
        return 2

    store.write_manifest(args.command, config, args.seed)
    logger.info(f"✓ 完成, 輸出目錄: {store.run_dir}")
    return 0


def main() -> int:
    return cli_dispatch(sys.argv[1:])
