"""State-feedback design for Markov jump linear systems with hidden-Markov mode observation."""

__version__ = "0.1.0"
