"""Adaptive task-relational context distillation on a synthetic multi-task suite."""
