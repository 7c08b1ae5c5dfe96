"""Sample identification: synthetic stem corpora, effect chains, CQT embeddings,
sliding-window retrieval and a landmark fingerprint baseline."""

__version__ = "0.1.0"
