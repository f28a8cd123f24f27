"""
Site potential plugins and their discovery manager.
"""
