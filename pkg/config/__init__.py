"""
Configuration modules for MPU-TTA
"""
