"""
Data models for MPU-TTA
"""
