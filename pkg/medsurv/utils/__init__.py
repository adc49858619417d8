"""Utility modules for medsurv."""

from .report import build_report, dumps, load_report, write_report

__all__ = ['build_report', 'dumps', 'load_report', 'write_report']
