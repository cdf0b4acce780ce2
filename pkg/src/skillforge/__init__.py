"""Skill-library evolution runtime with role meta-rules, runnable fully offline."""

__version__ = "0.1.0"
