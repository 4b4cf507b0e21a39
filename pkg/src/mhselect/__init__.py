"""Selection on moral hazard in deductible choice: structural model, market
rules, synthetic Roy panels and marginal-treatment-effect estimation."""

__version__ = "0.1.0"
