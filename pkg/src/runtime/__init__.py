# Runtime module
from .toy_model import (
    ToyConfig,
    TokenBatch,
    build_toy_model,
    forward,
    make_finetuned_variant,
)
from .fitness import (
    AnalyticDistanceFitness,
    PerplexityFitness,
    build_evaluator,
    perplexity_fitness,
    load_corpus,
)

__all__ = [
    'ToyConfig',
    'TokenBatch',
    'build_toy_model',
    'forward',
    'make_finetuned_variant',
    'AnalyticDistanceFitness',
    'PerplexityFitness',
    'build_evaluator',
    'perplexity_fitness',
    'load_corpus',
]
