"""
Desk-scale motion interaction pipeline: query-based forecasting, matching losses
and end-to-end prediction metrics over synthetic scenes
"""

__version__ = "1.0.0"
