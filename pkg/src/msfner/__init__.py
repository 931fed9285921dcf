"""Few-shot NER with multi-stage decoding.

A two-stage pipeline: a meta-trained CRF detects entity spans, a
prototype-based classifier with an entity-aware contrastive objective types
them, and inference interpolates the prototype distribution with a
nearest-neighbor vote over the support set.
"""

__version__ = "0.1.0"
