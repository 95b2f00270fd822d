"""Multimodal knowledge-graph completion pipeline.

Subpackages: :mod:`fichad.kg` (data model and loaders), :mod:`fichad.embed`
(structural embedding baselines), :mod:`fichad.linkpred` (filtered
evaluation), :mod:`fichad.backend` (generation backends and cache),
:mod:`fichad.context` (link-aware context generation), :mod:`fichad.prompt`
(KGC input assembly), :mod:`fichad.cli` (operator surface).
"""

__version__ = "0.1.0"
