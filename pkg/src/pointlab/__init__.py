"""Amortised experiment design and parameter estimation for pointing models.

Train an ensemble user model of pointing (phase 1), train an analyst that
designs experiments and estimates user parameters (phase 2), then deploy
the frozen analyst against new users, simulated or live (phase 3).
"""

__version__ = "0.1.0"
