"""Dual-branch optical/infrared semantic segmentation at desk scale.

Kept import-light on purpose: the CLI pins BLAS thread counts before any
numpy-backed submodule loads. Import the submodules you need directly,
e.g. ``from duospec import tensor`` or ``from duospec.network import
DualBranchNet``.
"""

__version__ = "0.1.0"
