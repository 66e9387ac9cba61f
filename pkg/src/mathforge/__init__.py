"""Data synthesis pipeline for multimodal math instruction tuning.

Stages: ingest source datasets, score image clarity/complexity, select a
stratified seed set, cluster questions into demonstration pools, augment
with a vision-language model, and emit conversation-format training data,
plus an evaluation scorer for benchmark responses.
"""

__version__ = "0.1.0"
