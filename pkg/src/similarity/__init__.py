# Similarity module
from .cosine import SimilarityMatrix, model_cosine, similarity_matrix, tensor_cosine
from .clustering import ClusterReport, cluster_zoo

__all__ = [
    'SimilarityMatrix',
    'model_cosine',
    'similarity_matrix',
    'tensor_cosine',
    'ClusterReport',
    'cluster_zoo',
]
