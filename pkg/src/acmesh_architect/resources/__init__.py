"""
Resources, constants, and experiment blueprints.
"""
