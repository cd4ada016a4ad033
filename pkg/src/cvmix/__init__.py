"""cvmix: cross-view geo-localization engine.

Trains a feature-mix aggregation head over backbone token features with a
symmetric InfoNCE objective and hard-negative sampling, retrieves satellite
references for ground queries by exact cosine search, and scores localization
quality (top-k, AP, hit rate, distance buckets).
"""

from .backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
