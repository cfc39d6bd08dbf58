"""Distributed multimodal streaming middleware: capture, sync, route, align, persist."""

__version__ = "0.1.0"
