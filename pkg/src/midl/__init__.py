"""Online test-time adaptation of multimodal classifiers under missing modalities."""

__version__ = "0.1.0"
