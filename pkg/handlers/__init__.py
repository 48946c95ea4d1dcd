"""
Handler modules for MPU-TTA
"""
