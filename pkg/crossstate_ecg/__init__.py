"""
CrossStateECG Pipeline
ECG biometric identification and verification across rest and post-exercise states
"""

__version__ = "1.0.0"
