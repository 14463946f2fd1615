"""Domain-adaptive one-stage detection on a synthetic shapes benchmark.

The package bundles a small numpy autodiff engine, the detector it trains,
the three adaptation components (class-balanced reweighting, object pattern
matching, prototype alignment) and a command-line driver.
"""

__version__ = "0.1.0"
