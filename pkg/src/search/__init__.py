# Search module
from .base import FitnessEvaluator, SearchResult, TraceEntry, TrialLog
from .heuristics import (
    grid_coefficient_search,
    heuristic_average,
    heuristic_coefficient,
    heuristic_similarity,
)
from .cmaes import CMAResult, cmaes_minimize
from .evolutionary import evolutionary_merge, search_dimension, warm_start_refine

__all__ = [
    'FitnessEvaluator',
    'SearchResult',
    'TraceEntry',
    'TrialLog',
    'grid_coefficient_search',
    'heuristic_average',
    'heuristic_coefficient',
    'heuristic_similarity',
    'CMAResult',
    'cmaes_minimize',
    'evolutionary_merge',
    'search_dimension',
    'warm_start_refine',
]
