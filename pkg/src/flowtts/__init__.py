"""Flow-matching TTS with an autoregressive duration model, preference
optimization of durations, and a preference-annotation workflow."""

__version__ = "0.1.0"
