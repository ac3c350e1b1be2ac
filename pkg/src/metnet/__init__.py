"""Desk-scale MetNet: a numpy autodiff engine, the MetNet architecture, a
synthetic radar/satellite data generator, optical-flow baselines and an F1
evaluation harness."""

__version__ = "0.1.0"
