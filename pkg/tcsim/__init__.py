"""Tradable credit scheme simulator.

Agent-based day-to-day simulation of a tradable mobility credit market on a
mesoscopic road network, with a Bayesian-optimization loop that designs the
credit toll profile.
"""

__version__ = "0.1.0"
