"""Continual learning for battery state-of-health classification.

Modules: ``tensor`` (reverse-mode autodiff), ``network`` (stacked LSTM),
``regularizers`` (EWC, online EWC, synaptic intelligence), ``data``
(ingestion, features, labels, synthetic cells), ``trainer``, ``metrics``
and ``cli``.
"""

__version__ = "0.1.0"
