"""Desk-scale laboratory for pre-trained embeddings in LSTM language models.

Pipeline: ingest text (`corpus`), pre-train embeddings (`word2vec`, `bilm`,
`domaincls`), manufacture domain labels (`labeler`), train and evaluate a
unidirectional LSTM LM with pluggable frozen embeddings (`lm`). All numerics
live in `numcore`; embedding tables and their file format in `embed`.
"""

__version__ = "0.1.0"
