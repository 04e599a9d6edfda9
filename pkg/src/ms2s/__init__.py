"""Speaker diarization with memory-aware embeddings and a sequence-to-sequence decoder."""

__version__ = "0.1.0"
