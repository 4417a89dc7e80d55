"""Survival under stochastic treatment interventions: g-formula oracles,
influence-function machinery and IPW, ICE, weighted ICE and cross-fit TMLE
estimators."""

__version__ = "0.1.0"
