"""Natural-language vehicle retrieval: motion images, dual-stream contrastive training and MRR evaluation."""

__version__ = "0.1.0"
