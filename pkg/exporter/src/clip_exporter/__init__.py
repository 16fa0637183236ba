"""Frozen-encoder embedding exporter producing MMEB-v1 directories."""

from .export import ExportSpec, SetupError, export

__all__ = ["ExportSpec", "SetupError", "export"]
