"""Prompt-driven target speech diarization (text, enrollment audio, face, and audio-text prompts)
on a synthetic multimodal world."""

__version__ = "0.1.0"
