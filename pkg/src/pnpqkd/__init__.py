"""Plug & play BB84: link-budget model, Monte Carlo link, key distillation, OTDR alignment."""

__version__ = "0.1.0"
