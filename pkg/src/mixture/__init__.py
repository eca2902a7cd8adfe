# Mixture module
from .router import (
    RouterSpec,
    build_linear_router,
    build_mlp_router,
    route_topk,
    sample_embedding,
)
from .builders import (
    ExpertPool,
    MixtureMethod,
    MixtureSpec,
    build_block_level,
    build_ffn_level,
    build_hybrid,
    build_mixture,
    build_model_level,
    parse_mixture_code,
)
from .forward import RoutingDecision, mixture_forward, routing_decisions
from .training import RouterTrainer, train_router_lm
from .bundle import load_mixture_bundle, save_mixture_bundle

__all__ = [
    'RouterSpec',
    'build_linear_router',
    'build_mlp_router',
    'route_topk',
    'sample_embedding',
    'ExpertPool',
    'MixtureMethod',
    'MixtureSpec',
    'build_block_level',
    'build_ffn_level',
    'build_hybrid',
    'build_mixture',
    'build_model_level',
    'parse_mixture_code',
    'RoutingDecision',
    'mixture_forward',
    'routing_decisions',
    'RouterTrainer',
    'train_router_lm',
    'load_mixture_bundle',
    'save_mixture_bundle',
]
