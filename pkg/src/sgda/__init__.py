"""Slice grouped domain attention (SGDA) for 3D feature maps.

Subpackages are plain modules: ``tensor`` (autodiff core), ``sgse``,
``domain_attention``, ``cross_attention``, ``block``, ``ct``, ``froc``,
``detector`` and ``cli``.
"""

__version__ = "0.1.0"
