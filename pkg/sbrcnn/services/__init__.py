"""
Artifact services: report formatting and checkpoint storage
"""
