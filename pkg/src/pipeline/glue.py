"""
GLUE 流程

    1. 依結構分組, 每組以權重相似度分群
    2. 每個多成員 cluster 執行合併策略; 合併結果嚴格優於最佳單一成員才作為代表, 否則取最佳成員
    3. 代表模型組成 model level top-1 mixture (只剩一個代表時直接作為最終模型)
    4. 輸出 report 與 checkpoint / mixture bundle
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import yaml
from loguru import logger

from src.checkpoint.checkpoint_io import load_checkpoint, save_checkpoint
from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.checkpoint.zoo import ModelZoo, expand_zoo_args, load_zoo
from src.errors import GlueForgeError, PipelineError
from src.mixture.builders import ExpertPool, MixtureSpec, build_mixture, parse_mixture_code
from src.mixture.bundle import save_mixture_bundle
from src.mixture.training import train_router_lm
from src.runtime.fitness import build_evaluator, load_corpus
from src.search.base import FitnessEvaluator, SearchResult
from src.search.evolutionary import evolutionary_merge, warm_start_refine
from src.search.heuristics import heuristic_average, heuristic_coefficient, heuristic_similarity
from src.similarity.clustering import ClusterReport, cluster_zoo
from src.similarity.cosine import similarity_matrix
from src.storage.jsonl_handler import JSONLHandler
from src.storage.run_store import RunStore
from src.utils.config_loader import get_config
from src.utils.helpers import derive_seed

STRATEGIES = ("avg", "coef", "sim-high", "sim-low", "evo", "warm")
FINAL_KINDS = ("model", "ffn")


@dataclass
class GlueConfig:
    """glue.json 的內容"""

    zoo: List[str]
    ids: Optional[List[str]] = None
    threshold: Optional[float] = None
    merge_strategy: str = "coef"
    merge_method: str = "linear"
    base: Optional[str] = None
    evaluator: str = "toy-ppl"
    corpus: Optional[str] = None
    budget: Optional[int] = None
    seed: int = 0
    mixture: Dict[str, Any] = field(default_factory=dict)
    final: str = "model"
    out: Optional[str] = None

    def __post_init__(self):
        if not self.zoo:
            raise PipelineError("config", "zoo 不可為空")
        if self.merge_strategy not in STRATEGIES:
            raise PipelineError("config", f"未知的合併策略: {self.merge_strategy} (可用: {', '.join(STRATEGIES)})")
        if self.final not in FINAL_KINDS:
            raise PipelineError("config", f"final 必須是 model 或 ffn, 實際為 {self.final}")
        if self.ids is not None and len(self.ids) != len(self.zoo):
            raise PipelineError("config", f"ids 數量 {len(self.ids)} 與 zoo 數量 {len(self.zoo)} 不符")
        if self.threshold is not None and not 0.0 < float(self.threshold) <= 1.0:
            raise PipelineError("config", f"threshold 必須在 (0, 1] 之間, 實際為 {self.threshold}")
        router = self.mixture.get('router', 'linear')
        if router not in ("linear", "mlp"):
            raise PipelineError("config", f"mixture.router 必須是 linear 或 mlp, 實際為 {router}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], root: Optional[Path] = None) -> "GlueConfig":
        """
        由字典建立 (相對路徑以 root 為基準)

        Args:
            data: 設定內容
            root: 設定檔所在目錄
        """
        defaults = get_config().get_glue_defaults()

        def resolve(value: Optional[str]) -> Optional[str]:
            if value is None or root is None or Path(value).is_absolute():
                return value
            return str(root / value)

        zoo = data.get('zoo') or []
        if isinstance(zoo, str):
            zoo = [zoo]
        mixture = dict(data.get('mixture') or {})
        mixture.setdefault('router', defaults.get('router', 'linear'))
        if isinstance(mixture.get('prompts'), str):
            mixture['prompts'] = resolve(mixture['prompts'])

        evaluator = data.get('evaluator', defaults.get('evaluator', 'toy-ppl'))
        kind, _, arg = evaluator.partition(":")
        if kind == "toy-ppl" and arg:
            evaluator = f"toy-ppl:{resolve(arg)}"
        elif kind == "analytic" and arg.startswith("target="):
            evaluator = f"analytic:target={resolve(arg[len('target='):])}"

        return cls(
            zoo=expand_zoo_args([resolve(p) for p in zoo]),
            ids=data.get('ids'),
            threshold=data.get('threshold'),
            merge_strategy=data.get('merge_strategy', defaults.get('merge_strategy', 'coef')),
            merge_method=data.get('merge_method', defaults.get('merge_method', 'linear')),
            base=resolve(data.get('base')),
            evaluator=evaluator,
            corpus=resolve(data.get('corpus')),
            budget=data.get('budget'),
            seed=int(data.get('seed', 0)),
            mixture=mixture,
            final=data.get('final', defaults.get('final', 'model')),
            out=data.get('out'),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'zoo': list(self.zoo),
            'ids': list(self.ids) if self.ids is not None else None,
            'threshold': self.threshold,
            'merge_strategy': self.merge_strategy,
            'merge_method': self.merge_method,
            'base': self.base,
            'evaluator': self.evaluator,
            'corpus': self.corpus,
            'budget': self.budget,
            'seed': self.seed,
            'mixture': dict(self.mixture),
            'final': self.final,
            'out': self.out,
        }


def load_glue_config(path) -> GlueConfig:
    """讀取 glue.json (JSON 或 YAML)"""
    path = Path(path)
    if not path.exists():
        raise PipelineError("config", f"設定檔不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        data = yaml.safe_load(f) or {}
    return GlueConfig.from_dict(data, root=path.parent)


@dataclass
class ClusterOutcome:
    """單一 cluster 的處理結果"""

    index: int
    members: List[str]
    strategy: Optional[str]
    best_single_id: str
    best_single_fitness: float
    representative_id: str
    representative_source: str  # merged | single
    representative_fitness: float
    representative_hash: str
    search: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'index': self.index,
            'members': list(self.members),
            'strategy': self.strategy,
            'best_single_id': self.best_single_id,
            'best_single_fitness': self.best_single_fitness,
            'representative_id': self.representative_id,
            'representative_source': self.representative_source,
            'representative_fitness': self.representative_fitness,
            'representative_hash': self.representative_hash,
            'search': self.search,
        }


@dataclass
class GlueReport:
    """glue 流程報告; 權重欄位不序列化"""

    clusters: ClusterReport
    outcomes: List[ClusterOutcome]
    final_kind: str  # model | mixture
    final_id: Optional[str] = None
    mixture: Optional[MixtureSpec] = None
    mixture_fitness: Optional[float] = None
    seed: int = 0
    representatives: List[Tuple[str, TensorStore, ArchDescriptor]] = field(default_factory=list, repr=False)
    pool: Optional[ExpertPool] = field(default=None, repr=False)

    @property
    def representative_ids(self) -> List[str]:
        return [outcome.representative_id for outcome in self.outcomes]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'clusters': self.clusters.to_dict(),
            'outcomes': [outcome.to_dict() for outcome in self.outcomes],
            'representatives': self.representative_ids,
            'final': {
                'kind': self.final_kind,
                'id': self.final_id,
                'mixture': self.mixture.to_dict() if self.mixture is not None else None,
                'fitness': self.mixture_fitness,
            },
            'seed': self.seed,
        }


def cluster_by_arch(zoo: ModelZoo, threshold: Optional[float] = None) -> ClusterReport:
    """
    先依結構分組, 再在每組內以相似度分群

    不同結構的模型不會進入同一個 cluster; cluster 依最小成員索引排序。

    Args:
        zoo: ModelZoo
        threshold: 相似度門檻 (預設讀取 similarity.threshold)
    """
    if threshold is None:
        threshold = float(get_config().get_similarity_defaults().get('threshold', 0.95))

    clusters: List[List[int]] = []
    min_sims: List[float] = []
    for group in zoo.partition_by_arch():
        if len(group) == 1:
            clusters.append(list(group))
            min_sims.append(1.0)
            continue
        matrix = similarity_matrix([zoo[i].store for i in group], ids=[zoo[i].id for i in group])
        report = cluster_zoo(matrix, threshold)
        for members, min_sim in zip(report.clusters, report.min_intra_sim):
            clusters.append([group[i] for i in members])
            min_sims.append(min_sim)

    order = sorted(range(len(clusters)), key=lambda c: min(clusters[c]))
    return ClusterReport(
        clusters=[sorted(clusters[c]) for c in order],
        threshold=float(threshold),
        min_intra_sim=[min_sims[c] for c in order],
        ids=zoo.ids,
    )


class ModelGlue:
    """GLUE 流程執行器"""

    def __init__(self, config: GlueConfig, out_dir: Optional[str] = None):
        """
        Args:
            config: GlueConfig
            out_dir: 輸出目錄 (None 則使用 config.out; 兩者皆無則不寫檔)
        """
        self.config = config
        out = out_dir or config.out
        self.store = RunStore(out) if out else None
        self.jsonl = JSONLHandler(out) if out else None

        # 統計資訊
        self.stats = {
            'clusters': 0,
            'merged_representatives': 0,
            'single_representatives': 0,
        }

    # ------------------------------------------------------------------
    # 各階段
    # ------------------------------------------------------------------

    def load(self) -> Tuple[ModelZoo, FitnessEvaluator, Optional[TensorStore]]:
        try:
            zoo = load_zoo(self.config.zoo, self.config.ids)
            evaluator = build_evaluator(self.config.evaluator, corpus=self.config.corpus)
            base = load_checkpoint(self.config.base)[0] if self.config.base else None
        except (GlueForgeError, OSError) as e:
            logger.error(f"載入失敗: {e}")
            raise PipelineError("load", str(e)) from e
        return zoo, evaluator, base

    def cluster(self, zoo: ModelZoo) -> ClusterReport:
        try:
            report = cluster_by_arch(zoo, self.config.threshold)
        except GlueForgeError as e:
            logger.error(f"分群失敗: {e}")
            raise PipelineError("cluster", str(e)) from e
        logger.info(f"✓ 分群完成: {len(report.clusters)} 個 cluster")
        return report

    def search(self, items: List[Tuple[str, TensorStore]], desc: ArchDescriptor, evaluator: FitnessEvaluator,
               base: Optional[TensorStore], seed: int) -> SearchResult:
        strategy = self.config.merge_strategy
        budget = self.config.budget
        if strategy == "avg":
            return heuristic_average(items, desc, evaluator)
        if strategy == "coef":
            return heuristic_coefficient(items, desc, evaluator)
        if strategy in ("sim-high", "sim-low"):
            return heuristic_similarity(items, desc, evaluator, order="highest" if strategy == "sim-high" else "lowest")
        if strategy == "evo":
            return evolutionary_merge(items, desc, evaluator, base=base, method=self.config.merge_method,
                                      budget=budget, seed=seed)
        heuristic = heuristic_coefficient(items, desc, evaluator)
        return warm_start_refine(heuristic, items, desc, evaluator, budget=budget, seed=seed)

    def merge_cluster(self, index: int, members: List[int], zoo: ModelZoo, evaluator: FitnessEvaluator,
                      base: Optional[TensorStore]) -> Tuple[ClusterOutcome, Tuple[str, TensorStore, ArchDescriptor],
                                                            Optional[SearchResult]]:
        entries = [zoo[i] for i in members]
        desc = entries[0].desc
        singles = [(entry.id, evaluator(entry.store, entry.desc)) for entry in entries]
        best = max(range(len(singles)), key=lambda i: (singles[i][1], -i))
        best_id, best_fitness = singles[best]

        result = None
        if len(entries) > 1:
            seed = derive_seed(self.config.seed, index)
            logger.info(f"Cluster {index}: {self.config.merge_strategy} 合併 {[e.id for e in entries]} (seed={seed})")
            result = self.search([(entry.id, entry.store) for entry in entries], desc, evaluator, base, seed)

        if result is not None and result.fitness > best_fitness:
            rep = (f"cluster-{index}-merged", result.merged, desc)
            source, fitness = "merged", result.fitness
            self.stats['merged_representatives'] += 1
            logger.info(f"✓ Cluster {index}: 合併模型 fitness {fitness:.6f} > 最佳單一 {best_fitness:.6f}")
        else:
            chosen = entries[best]
            rep = (chosen.id, chosen.store, chosen.desc)
            source, fitness = "single", best_fitness
            self.stats['single_representatives'] += 1
            logger.info(f"Cluster {index}: 代表為最佳單一模型 {chosen.id} (fitness={fitness:.6f})")

        outcome = ClusterOutcome(
            index=index,
            members=[entry.id for entry in entries],
            strategy=self.config.merge_strategy if result is not None else None,
            best_single_id=best_id,
            best_single_fitness=best_fitness,
            representative_id=rep[0],
            representative_source=source,
            representative_fitness=fitness,
            representative_hash=rep[1].content_hash(),
            search=result.to_dict() if result is not None else None,
        )
        return outcome, rep, result

    def prompts_for(self, outcomes: List[ClusterOutcome], model_ids: Sequence[str]) -> Optional[Dict[str, List]]:
        """代表模型的 prompt: 合併代表取所有成員 prompt 的聯集 (依成員順序)"""
        prompts = self.config.mixture.get('prompts')
        if prompts is None:
            return None
        if isinstance(prompts, str):
            with open(prompts, 'r', encoding='utf-8') as f:
                prompts = yaml.safe_load(f) or {}

        resolved = dict(prompts)
        for outcome in outcomes:
            if outcome.representative_source == "merged":
                union = []
                for member in outcome.members:
                    union.extend(prompts.get(member, []))
                resolved[outcome.representative_id] = union
        return {model_id: resolved[model_id] for model_id in model_ids if model_id in resolved}

    def build_final(self, outcomes: List[ClusterOutcome], reps: List[Tuple[str, TensorStore, ArchDescriptor]],
                    results: List[Optional[SearchResult]], zoo: ModelZoo,
                    evaluator: FitnessEvaluator) -> Tuple[MixtureSpec, ExpertPool, Optional[float]]:
        mixture_cfg = self.config.mixture
        router = mixture_cfg.get('router', 'linear')
        router_code = "L" if router == "linear" else "M"

        if self.config.final == "model":
            pool = ExpertPool(reps)
            method = parse_mixture_code(f"M-{router_code}-S")
            top_k = int(mixture_cfg.get('top_k', 1))
        else:
            selected: List[str] = []
            for outcome, result in zip(outcomes, results):
                selected.extend(result.selected_ids if result is not None else outcome.members)
            entries = [zoo[i] for i in sorted({zoo.index_of(model_id) for model_id in selected})]
            pool = ExpertPool([(entry.id, entry.store, entry.desc) for entry in entries])
            method = parse_mixture_code(f"F-{router_code}-T")
            top_k = mixture_cfg.get('top_k')

        spec = build_mixture(
            pool, method,
            prompts=self.prompts_for(outcomes, pool.ids),
            top_k=top_k,
            hidden=mixture_cfg.get('hidden'),
            seed=self.config.seed,
        )

        steps = int(mixture_cfg.get('train_steps', 0))
        if router == "mlp" and steps > 0:
            if self.config.corpus is None:
                raise PipelineError("mixture", "訓練 MLP router 需要 corpus")
            routers = train_router_lm(spec, pool, load_corpus(self.config.corpus), steps=steps,
                                      lr=mixture_cfg.get('lr'), seed=self.config.seed)
            spec = spec.with_routers(routers)

        fitness = None
        if hasattr(evaluator, 'evaluate_mixture'):
            fitness = evaluator.evaluate_mixture(spec, pool)
            logger.info(f"最終 mixture fitness: {fitness:.6f}")
        return spec, pool, fitness

    # ------------------------------------------------------------------
    # 輸出
    # ------------------------------------------------------------------

    def write_cluster(self, outcome: ClusterOutcome, rep: Tuple[str, TensorStore, ArchDescriptor],
                      result: Optional[SearchResult]):
        if self.store is None:
            return
        cluster_dir = f"clusters/{outcome.index}"
        self.store.save_json(f"{cluster_dir}/result.json", outcome.to_dict())
        if result is not None:
            self.jsonl.write_trace(f"{cluster_dir}/trace.jsonl", result.trace)
        save_checkpoint(rep[1], rep[2], self.store.cluster_dir(outcome.index) / "checkpoint")

    # ------------------------------------------------------------------
    # 主流程
    # ------------------------------------------------------------------

    def run(self) -> GlueReport:
        logger.info("=" * 60)
        logger.info(f"GLUE: {len(self.config.zoo)} 個模型, 策略={self.config.merge_strategy}, "
                    f"final={self.config.final}, seed={self.config.seed}")
        logger.info("=" * 60)

        if self.store is not None:
            self.store.ensure()

        zoo, evaluator, base = self.load()
        clusters = self.cluster(zoo)
        self.stats['clusters'] = len(clusters.clusters)
        if self.store is not None:
            self.store.save_json("clusters.json", clusters.to_dict())

        outcomes: List[ClusterOutcome] = []
        reps: List[Tuple[str, TensorStore, ArchDescriptor]] = []
        results: List[Optional[SearchResult]] = []
        for index, members in enumerate(clusters.clusters):
            try:
                outcome, rep, result = self.merge_cluster(index, members, zoo, evaluator, base)
                self.write_cluster(outcome, rep, result)
            except PipelineError:
                raise
            except (GlueForgeError, OSError) as e:
                logger.error(f"Cluster {index} 合併失敗: {e}")
                raise PipelineError("merge", str(e), cluster=index) from e
            outcomes.append(outcome)
            reps.append(rep)
            results.append(result)

        report = GlueReport(clusters=clusters, outcomes=outcomes, final_kind="model",
                            seed=self.config.seed, representatives=reps)

        if len(reps) == 1 and self.config.final == "model":
            report.final_id = reps[0][0]
            if self.store is not None:
                save_checkpoint(reps[0][1], reps[0][2], self.store.path("final"))
            logger.info(f"只有一個代表模型, 最終模型為 {report.final_id}")
        else:
            try:
                spec, pool, fitness = self.build_final(outcomes, reps, results, zoo, evaluator)
                if self.store is not None:
                    save_mixture_bundle(spec, pool, self.store.path("mixture"))
            except PipelineError:
                raise
            except (GlueForgeError, OSError) as e:
                logger.error(f"mixture 組裝失敗: {e}")
                raise PipelineError("mixture", str(e)) from e
            report.final_kind = "mixture"
            report.mixture = spec
            report.mixture_fitness = fitness
            report.pool = pool

        if self.store is not None:
            self.store.save_json("report.json", report.to_dict())

        logger.info("=" * 60)
        logger.info(f"✓ GLUE 完成: {len(outcomes)} 個 cluster, 代表 {report.representative_ids}")
        logger.info("=" * 60)
        return report

    def get_stats(self):
        """取得統計資訊"""
        return self.stats.copy()


def run_model_glue(config: GlueConfig, out_dir: Optional[str] = None) -> GlueReport:
    """
    執行完整合併 + MoE 流程

    Args:
        config: GlueConfig
        out_dir: 輸出目錄 (預設 config.out)

    Returns:
        GlueReport
    """
    return ModelGlue(config, out_dir).run()
