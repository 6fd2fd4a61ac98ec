"""Quantized Kalman filtering on energy-scalable unreliable memory."""
