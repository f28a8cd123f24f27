"""
acmesh-architect Package
"""

__version__ = "0.4.0"
