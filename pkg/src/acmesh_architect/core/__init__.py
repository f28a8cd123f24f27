"""
Core orchestration: errors, configuration, file I/O, mesh building and the adaptive driver.
"""
