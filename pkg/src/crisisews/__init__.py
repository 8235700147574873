"""Crisis labelling, early-warning predictors, evaluation and back-testing."""

__version__ = "0.1.0"
