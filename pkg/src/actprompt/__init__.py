"""Late-interaction scoring of video frame embeddings against LLM-generated attribute prompts."""

__version__ = "0.1.0"
