"""
Utility modules for MPU-TTA
"""
