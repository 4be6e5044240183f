"""Recursive HJB solver for portfolio choice under hidden-regime contagious distress."""
