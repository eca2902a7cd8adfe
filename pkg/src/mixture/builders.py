"""
MoE 組裝

    model level : 每個專家是完整模型, 一個 router 依整段輸入選擇模型, 在 logits 上加權
    block level : base 提供 embedding / lm_head, 每層的專家是各模型的整個 decoder block
    ffn level   : base 另外提供每層的 attention 與 norm, 專家是各模型該層的 FFN
    hybrid      : 前 k_merge 層換成合併模型的整層, 其餘層同 ffn level
"""

import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from loguru import logger

from src.checkpoint.tensor_store import ArchDescriptor, TensorStore
from src.checkpoint.zoo import ModelZoo
from src.errors import MergeError, MixtureError
from src.merging.recipe import BASE_METHODS, MergeRecipe, apply_recipe, whole_model_recipe
from src.mixture.router import ROUTER_KINDS, RouterSpec, build_linear_router, build_mlp_router
from src.runtime.toy_model import EMBED
from src.utils.config_loader import get_config
from src.utils.helpers import derive_seed, dumps_deterministic

LEVELS = ("model", "block", "ffn")
ROUTER_INPUTS = ("token", "sample")

_LEVEL_CODES = {'M': "model", 'B': "block", 'F': "ffn"}
_ROUTER_CODES = {'L': "linear", 'M': "mlp"}
_INPUT_CODES = {'T': "token", 'S': "sample"}

PromptSets = Mapping[str, Sequence[Sequence[int]]]
BaseRef = Union[str, int]


def default_top_k(level: str) -> int:
    top_k = get_config().get_mixture_defaults().get('top_k') or {}
    return int(top_k.get(level, 1))


def resolve_top_k(top_k: Optional[int], level: str, num_experts: int) -> int:
    """未指定時取 config 預設並限制在專家數以內"""
    if top_k is not None:
        return int(top_k)
    return min(default_top_k(level), num_experts)


def default_hybrid_k(num_layers: int) -> int:
    fraction = float(get_config().get_mixture_defaults().get('hybrid_fraction', 0.25))
    return int(num_layers * fraction)


@dataclass(frozen=True)
class MixtureMethod:
    """方法代碼 (例如 F-L-T, Hybrid F-L-T) 解析結果"""

    level: str
    router_kind: str
    router_input: str
    hybrid: bool = False

    @property
    def code(self) -> str:
        inverse_level = {v: k for k, v in _LEVEL_CODES.items()}
        inverse_router = {v: k for k, v in _ROUTER_CODES.items()}
        inverse_input = {v: k for k, v in _INPUT_CODES.items()}
        code = f"{inverse_level[self.level]}-{inverse_router[self.router_kind]}-{inverse_input[self.router_input]}"
        return f"Hybrid {code}" if self.hybrid else code


def parse_mixture_code(code: str) -> MixtureMethod:
    """
    解析方法代碼: <level>-<router>-<input>, 可加 "Hybrid " 前綴

        level: F (FFN) / B (block) / M (model)
        router: L (linear) / M (MLP)
        input: T (token) / S (sample)
    """
    text = code.strip()
    hybrid = False
    if text.lower().startswith("hybrid"):
        hybrid = True
        text = text[len("hybrid"):].strip(" -_")

    parts = [p.strip().upper() for p in text.split("-")]
    if len(parts) != 3:
        raise MixtureError(f"無法解析的方法代碼: {code!r}")
    try:
        level = _LEVEL_CODES[parts[0]]
        router_kind = _ROUTER_CODES[parts[1]]
        router_input = _INPUT_CODES[parts[2]]
    except KeyError:
        raise MixtureError(f"無法解析的方法代碼: {code!r}") from None

    if level in ("model", "block") and router_input != "sample":
        raise MixtureError(f"{code}: {level} level 只支援 sample routing")
    if hybrid and level != "ffn":
        raise MixtureError(f"{code}: hybrid 只支援 FFN level")
    return MixtureMethod(level, router_kind, router_input, hybrid)


@dataclass
class MixtureSpec:
    """MoE 結構描述 (router 權重之外都可 JSON 化)"""

    level: str
    experts: List[str]
    routers: List[RouterSpec]
    top_k: int
    router_input: str
    num_layers: int
    base_id: Optional[str] = None
    hybrid_k: int = 0
    merge_recipe: Optional[MergeRecipe] = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise MixtureError(f"未知的 mixture level: {self.level}")
        if self.router_input not in ROUTER_INPUTS:
            raise MixtureError(f"router_input 必須是 token 或 sample, 實際為 {self.router_input}")
        if not self.experts:
            raise MixtureError("至少需要一個專家")
        if len(set(self.experts)) != len(self.experts):
            raise MixtureError(f"專家 ID 重複: {self.experts}")
        if self.level in ("model", "block") and self.router_input != "sample":
            raise MixtureError(f"{self.level} level 只支援 sample routing")
        if not 1 <= self.top_k <= self.num_experts:
            raise MixtureError(f"top_k 必須在 [1, {self.num_experts}] 之間, 實際為 {self.top_k}")

        if self.level == "model":
            if self.base_id is not None:
                raise MixtureError("model level 不使用 base 模型")
        elif self.base_id not in self.experts:
            raise MixtureError(f"base {self.base_id!r} 不在專家列表中")

        if self.hybrid_k:
            if self.level != "ffn":
                raise MixtureError("hybrid 只支援 FFN level")
            if self.merge_recipe is None:
                raise MixtureError("hybrid 需要 merge_recipe")
        if not 0 <= self.hybrid_k <= self.num_layers:
            raise MixtureError(f"k_merge 必須在 [0, {self.num_layers}] 之間, 實際為 {self.hybrid_k}")

        expected = 1 if self.level == "model" else self.num_layers - self.hybrid_k
        if len(self.routers) != expected:
            raise MixtureError(f"router 數量 {len(self.routers)} 與預期 {expected} 不符")
        for router in self.routers:
            if router.num_experts != self.num_experts:
                raise MixtureError(f"router 專家數 {router.num_experts} 與專家數 {self.num_experts} 不符")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def is_hybrid(self) -> bool:
        return self.hybrid_k > 0

    def router_layers(self) -> List[int]:
        """有 router 的層 (model level 回傳空列表)"""
        if self.level == "model":
            return []
        return list(range(self.hybrid_k, self.num_layers))

    def router_for_layer(self, layer: int) -> RouterSpec:
        if self.level == "model":
            return self.routers[0]
        if not self.hybrid_k <= layer < self.num_layers:
            raise MixtureError(f"第 {layer} 層沒有 router")
        return self.routers[layer - self.hybrid_k]

    def with_routers(self, routers: Sequence[RouterSpec]) -> "MixtureSpec":
        return replace(self, routers=list(routers))

    def to_dict(self) -> Dict:
        return {
            'level': self.level,
            'experts': list(self.experts),
            'base_id': self.base_id,
            'top_k': self.top_k,
            'router_input': self.router_input,
            'num_layers': self.num_layers,
            'hybrid_k': self.hybrid_k,
            'merge_recipe': self.merge_recipe.to_dict() if self.merge_recipe is not None else None,
            'routers': [router.to_dict() for router in self.routers],
        }

    @classmethod
    def from_dict(cls, data: Dict, routers: Sequence[RouterSpec]) -> "MixtureSpec":
        try:
            recipe = data.get('merge_recipe')
            return cls(
                level=data['level'],
                experts=list(data['experts']),
                routers=list(routers),
                top_k=int(data['top_k']),
                router_input=data['router_input'],
                num_layers=int(data['num_layers']),
                base_id=data.get('base_id'),
                hybrid_k=int(data.get('hybrid_k', 0)),
                merge_recipe=MergeRecipe.from_dict(recipe) if recipe else None,
            )
        except KeyError as e:
            raise MixtureError(f"mixture 描述缺少欄位: {e.args[0]}") from None


class ExpertPool:
    """
    專家權重集合

    Args:
        experts: [(model_id, store, desc), ...]
        merge_base: hybrid 的 merge_recipe 使用 task_arithmetic / ties / dare_ta 時的 base 權重
    """

    def __init__(self, experts: Sequence[Tuple[str, TensorStore, ArchDescriptor]],
                 merge_base: Optional[TensorStore] = None):
        self._entries: Dict[str, Tuple[TensorStore, ArchDescriptor]] = {}
        for model_id, store, desc in experts:
            if model_id in self._entries:
                raise MixtureError(f"專家 ID 重複: {model_id}")
            self._entries[model_id] = (store, desc)
        self.merge_base = merge_base
        self._merged: Dict[str, TensorStore] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_zoo(cls, zoo: ModelZoo, merge_base: Optional[TensorStore] = None) -> "ExpertPool":
        return cls([(entry.id, entry.store, entry.desc) for entry in zoo], merge_base=merge_base)

    @property
    def ids(self) -> List[str]:
        return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._entries

    def entry(self, model_id: str) -> Tuple[TensorStore, ArchDescriptor]:
        if model_id not in self._entries:
            raise MixtureError(f"missing expert store: {model_id}")
        return self._entries[model_id]

    def store(self, model_id: str) -> TensorStore:
        return self.entry(model_id)[0]

    def desc(self, model_id: str) -> ArchDescriptor:
        return self.entry(model_id)[1]

    def resolve(self, ref: BaseRef) -> str:
        """base 參照 (ID 或索引) → ID"""
        if isinstance(ref, int):
            if not 0 <= ref < len(self._entries):
                raise MixtureError(f"base 索引 {ref} 超出範圍 (共 {len(self._entries)} 個專家)")
            return self.ids[ref]
        self.entry(ref)
        return ref

    def merged_prefix(self, spec: MixtureSpec) -> TensorStore:
        """hybrid 的合併模型 (依 spec.merge_recipe, 結果快取)"""
        if spec.merge_recipe is None:
            raise MixtureError("spec 沒有 merge_recipe")
        key = dumps_deterministic({'experts': spec.experts, 'recipe': spec.merge_recipe.to_dict()})
        with self._lock:
            if key not in self._merged:
                stores = [self.store(model_id) for model_id in spec.experts]
                desc = self.desc(spec.base_id)
                try:
                    self._merged[key] = apply_recipe(stores, desc, self.merge_base, spec.merge_recipe)
                except MergeError as e:
                    raise MixtureError(f"hybrid 合併失敗: {e}") from e
            return self._merged[key]


# ---------------------------------------------------------------------------
# 結構檢查
# ---------------------------------------------------------------------------

def _require_same(pool: ExpertPool, keys: Sequence[str], context: str):
    reference_id = pool.ids[0]
    reference = pool.desc(reference_id)
    for model_id in pool.ids[1:]:
        desc = pool.desc(model_id)
        for key in keys:
            if getattr(desc, key) != getattr(reference, key):
                raise MixtureError(
                    f"{context}: {model_id} 的 {key}={getattr(desc, key)} 與 "
                    f"{reference_id} 的 {getattr(reference, key)} 不符"
                )


def _require_layer_shapes(pool: ExpertPool, kinds: Sequence[str], context: str):
    """各專家在指定角色上的張量名稱與 shape 必須一致"""
    reference_id = pool.ids[0]
    ref_store, ref_desc = pool.entry(reference_id)

    def layer_shapes(store: TensorStore, desc: ArchDescriptor) -> Dict[str, tuple]:
        return {name: tuple(store[name].shape) for name in store if desc.role_of(name).kind in kinds}

    expected = layer_shapes(ref_store, ref_desc)
    for model_id in pool.ids[1:]:
        shapes = layer_shapes(*pool.entry(model_id))
        if shapes != expected:
            diff = sorted(set(shapes) ^ set(expected)) or sorted(n for n in expected if shapes[n] != expected[n])
            raise MixtureError(f"{context}: {model_id} 與 {reference_id} 的層張量不一致 (例如 {diff[:3]})")


def _check_routers(routers: Sequence[RouterSpec], count: int, in_dim: int, num_experts: int):
    if len(routers) != count:
        raise MixtureError(f"需要 {count} 個 router, 實際為 {len(routers)}")
    for index, router in enumerate(routers):
        if router.in_dim != in_dim:
            raise MixtureError(f"router {index} 的 in_dim {router.in_dim} 與 hidden_dim {in_dim} 不符")
        if router.num_experts != num_experts:
            raise MixtureError(f"router {index} 的專家數 {router.num_experts} 與專家數 {num_experts} 不符")


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_model_level(pool: ExpertPool, router: RouterSpec, top_k: Optional[int] = None) -> MixtureSpec:
    """
    Model level mixture: 每個專家保留完整模型, router 以第一個專家的 embedding 計算 sample 向量

    Args:
        pool: 專家 (vocab_size 必須相同; 結構可不同)
        router: RouterSpec (in_dim = 第一個專家的 hidden_dim)
        top_k: 預設讀取 mixture.top_k.model
    """
    if len(pool) == 0:
        raise MixtureError("至少需要一個專家")
    _require_same(pool, ("vocab_size",), "model level")
    first = pool.desc(pool.ids[0])
    _check_routers([router], 1, first.hidden_dim, len(pool))

    spec = MixtureSpec(
        level="model",
        experts=pool.ids,
        routers=[router],
        top_k=resolve_top_k(top_k, "model", len(pool)),
        router_input="sample",
        num_layers=first.num_layers,
    )
    logger.info(f"✓ model level mixture: {len(pool)} 個專家, top_k={spec.top_k}")
    return spec


def build_block_level(pool: ExpertPool, base: BaseRef, routers: Sequence[RouterSpec],
                      top_k: Optional[int] = None) -> MixtureSpec:
    """
    Block level mixture: base 提供 embedding 與 lm_head, 每層以整個 decoder block 為專家

    Args:
        pool: 專家 (層數、hidden_dim 與層張量 shape 必須一致)
        base: base 專家 (ID 或索引)
        routers: 每層一個 RouterSpec
        top_k: 預設讀取 mixture.top_k.block
    """
    base_id = pool.resolve(base)
    _require_same(pool, ("num_layers", "hidden_dim", "vocab_size"), "block level")
    _require_layer_shapes(pool, ("attention", "ffn", "norm"), "block level")
    desc = pool.desc(base_id)
    _check_routers(routers, desc.num_layers, desc.hidden_dim, len(pool))

    spec = MixtureSpec(
        level="block",
        experts=pool.ids,
        routers=list(routers),
        top_k=resolve_top_k(top_k, "block", len(pool)),
        router_input="sample",
        num_layers=desc.num_layers,
        base_id=base_id,
    )
    logger.info(f"✓ block level mixture: {len(pool)} 個專家 × {desc.num_layers} 層, base={base_id}")
    return spec


def build_ffn_level(pool: ExpertPool, base: BaseRef, routers: Sequence[RouterSpec],
                    router_input: str = "token", top_k: Optional[int] = None) -> MixtureSpec:
    """
    FFN level mixture: base 提供 embedding / lm_head / attention / norm, 每層以 FFN 為專家

    Args:
        pool: 專家 (層數、hidden_dim、ffn_dim 必須一致)
        base: base 專家 (ID 或索引)
        routers: 每層一個 RouterSpec
        router_input: token (FFN 前的 hidden state) 或 sample (平均 embedding)
        top_k: 預設讀取 mixture.top_k.ffn
    """
    return build_hybrid(pool, base, 0, None, routers, router_input=router_input, top_k=top_k)


def build_hybrid(pool: ExpertPool, base: BaseRef, k_merge: int, merge_recipe: Optional[MergeRecipe],
                 routers: Sequence[RouterSpec], router_input: str = "token",
                 top_k: Optional[int] = None) -> MixtureSpec:
    """
    Hybrid mixture: 前 k_merge 層使用合併模型的整層, 其餘層為 FFN level mixture

    Args:
        pool: 專家
        base: base 專家 (ID 或索引)
        k_merge: 合併的底層數 (0 即 FFN level)
        merge_recipe: 對 pool 全部專家的 MergeRecipe (k_merge > 0 時必填)
        routers: 第 k_merge..num_layers-1 層各一個 RouterSpec
        router_input: token 或 sample
        top_k: 預設讀取 mixture.top_k.ffn
    """
    base_id = pool.resolve(base)
    _require_same(pool, ("num_layers", "hidden_dim", "ffn_dim", "vocab_size"), "ffn level")
    _require_layer_shapes(pool, ("ffn",), "ffn level")
    desc = pool.desc(base_id)

    if not 0 <= k_merge <= desc.num_layers:
        raise MixtureError(f"k_merge 必須在 [0, {desc.num_layers}] 之間, 實際為 {k_merge}")
    if k_merge:
        if merge_recipe is None:
            raise MixtureError("hybrid 需要 merge_recipe")
        try:
            merge_recipe.check_shape(desc.num_layers, k=len(pool))
        except MergeError as e:
            raise MixtureError(f"merge_recipe 與專家集合不符: {e}") from e
        if merge_recipe.method in BASE_METHODS and pool.merge_base is None:
            raise MixtureError(f"merge_recipe 方法 {merge_recipe.method} 需要 merge_base")
        _require_layer_shapes(pool, ("attention", "ffn", "norm"), "hybrid")
    else:
        merge_recipe = None

    _check_routers(routers, desc.num_layers - k_merge, desc.hidden_dim, len(pool))

    spec = MixtureSpec(
        level="ffn",
        experts=pool.ids,
        routers=list(routers),
        top_k=resolve_top_k(top_k, "ffn", len(pool)),
        router_input=router_input,
        num_layers=desc.num_layers,
        base_id=base_id,
        hybrid_k=k_merge,
        merge_recipe=merge_recipe,
    )
    kind = f"hybrid (k_merge={k_merge})" if k_merge else "ffn level"
    logger.info(f"✓ {kind} mixture: {len(pool)} 個專家, base={base_id}, router_input={router_input}, top_k={spec.top_k}")
    return spec


# ---------------------------------------------------------------------------
# Router 產生與依方法代碼組裝
# ---------------------------------------------------------------------------

def ordered_prompt_sets(pool: ExpertPool, prompts: PromptSets) -> List[Sequence[Sequence[int]]]:
    missing = [model_id for model_id in pool.ids if model_id not in prompts]
    if missing:
        raise MixtureError(f"缺少專家的 prompt: {missing}")
    return [prompts[model_id] for model_id in pool.ids]


def generate_routers(pool: ExpertPool, router_kind: str, embed_source: str, count: int,
                     prompts: Optional[PromptSets] = None, hidden: Optional[int] = None,
                     seed: int = 0) -> List[RouterSpec]:
    """
    產生 count 個 router

    linear: 以 embed_source 的 embedding 與 prompt 建立, 每層一份相同權重的複本;
    mlp: 第 i 個 router 使用 seed ^ i 初始化
    """
    if router_kind not in ROUTER_KINDS:
        raise MixtureError(f"未知的 router 種類: {router_kind}")
    if router_kind == "linear":
        if prompts is None:
            raise MixtureError("linear router 需要每個專家的 prompt")
        router = build_linear_router(ordered_prompt_sets(pool, prompts), pool.store(embed_source)[EMBED])
        return [router.copy() for _ in range(count)]
    in_dim = pool.desc(embed_source).hidden_dim
    return [build_mlp_router(in_dim, hidden, len(pool), derive_seed(seed, index)) for index in range(count)]


def build_mixture(pool: ExpertPool, method: Union[str, MixtureMethod], base: Optional[BaseRef] = None,
                  prompts: Optional[PromptSets] = None, top_k: Optional[int] = None,
                  hidden: Optional[int] = None, seed: int = 0, k_merge: Optional[int] = None,
                  merge_recipe: Optional[MergeRecipe] = None) -> MixtureSpec:
    """
    依方法代碼組裝 mixture (含 router 產生)

    Args:
        pool: 專家
        method: 方法代碼或 MixtureMethod
        base: block / ffn level 的 base (預設第一個專家)
        prompts: linear router 的 prompt (專家 ID → prompt 列表)
        top_k: 預設依 level 讀取 config
        hidden: MLP router 隱藏層寬度
        seed: MLP router 初始化種子
        k_merge: hybrid 合併層數 (預設 floor(num_layers × hybrid_fraction))
        merge_recipe: hybrid 合併 recipe (預設所有專家等權 linear)
    """
    if isinstance(method, str):
        method = parse_mixture_code(method)
    if len(pool) == 0:
        raise MixtureError("至少需要一個專家")

    if method.level == "model":
        router = generate_routers(pool, method.router_kind, pool.ids[0], 1, prompts, hidden, seed)[0]
        return build_model_level(pool, router, top_k=top_k)

    base_id = pool.resolve(base if base is not None else 0)
    num_layers = pool.desc(base_id).num_layers

    if method.level == "block":
        routers = generate_routers(pool, method.router_kind, base_id, num_layers, prompts, hidden, seed)
        return build_block_level(pool, base_id, routers, top_k=top_k)

    if not method.hybrid:
        routers = generate_routers(pool, method.router_kind, base_id, num_layers, prompts, hidden, seed)
        return build_ffn_level(pool, base_id, routers, router_input=method.router_input, top_k=top_k)

    if k_merge is None:
        k_merge = default_hybrid_k(num_layers)
    if merge_recipe is None:
        merge_recipe = whole_model_recipe("linear", [1.0 / len(pool)] * len(pool), num_layers,
                                          model_ids=pool.ids)
    routers = generate_routers(pool, method.router_kind, base_id, num_layers - k_merge, prompts, hidden, seed)
    return build_hybrid(pool, base_id, k_merge, merge_recipe, routers,
                        router_input=method.router_input, top_k=top_k)
