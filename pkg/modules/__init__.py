"""
CXR Synth Modules
"""

__version__ = '1.0.0'
