"""Answer-aware question generation with QPP/QAP rewards and QAP-filtered semi-supervised QA."""

__version__ = "0.1.0"
