"""
Property and oracle suite executed by ``verify``.
"""

from src.verify.properties import CHECKS, FAULTS, CheckResult, run_checks

__all__ = ["CHECKS", "FAULTS", "CheckResult", "run_checks"]
