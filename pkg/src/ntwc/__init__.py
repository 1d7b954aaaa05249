"""Neural transform waveform codec for 16 kHz speech."""

__version__ = "0.1.0"
