"""Deterministic 2D highway lane-change benchmark.

Modules: ``sim`` (IDM kinematics), ``scenarios`` (initial worlds and the
deterministic suite), ``env`` (raster observations and rewards), ``mobil``
(rule-based baseline), ``nn`` and ``drl`` (numpy networks and D3QN, A2C,
PPO), ``eval`` (metrics and reports) and ``cli``.
"""
__version__ = "0.1.0"
