"""Solver, dataset, training and diagnostics modules."""
