"""
Test package for the portrait shadow removal toolkit.
Contains tests for every pipeline module and the command-line tool.
"""
