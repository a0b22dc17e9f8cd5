"""Downlink cell simulator, classic schedulers, fairness KPIs and a QMIX scheduler."""

__version__ = "0.1.0"
