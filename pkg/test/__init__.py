"""
Main test package for rangeseg.
"""
