"""
Ridge-regularised jackknifed Anderson-Rubin inference for many-instrument IV models
"""

__version__ = "1.0.0"
