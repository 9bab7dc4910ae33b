"""Trending-query detection from content engagement plus generated search queries.

Submodules:

- ``domain``: record types, query normalization, JSONL schemas
- ``scoring``: creator authority and engagement-weighted trending scores
- ``querygen``: pluggable post-to-query generators (extractive, template, remote)
- ``burst``: Poisson surprise burst detection over query volume
- ``pipeline``: windowed aggregation and per-window ranking
- ``mixdpo``: mixed on/off-policy DPO over a tabular softmax policy
- ``evaluation``: precision/recall metrics and the retraining trigger
- ``simgen``: synthetic worlds with planted head and tail trends
- ``cli``: the ``rttp`` command
"""

__version__ = "0.1.0"
