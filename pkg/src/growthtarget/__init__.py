"""Growth-target modelling and cooler allocation for B2B beverage clients."""
__version__ = "0.1.0"
