"""Differentiable HOCBF quadratic-program layers (BarrierNet) and case-study simulators."""
