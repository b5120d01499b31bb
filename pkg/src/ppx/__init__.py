"""Crowd-sourced PII leak detection and scrubbing for HTTP(S) traffic."""

__version__ = "0.1.0"
