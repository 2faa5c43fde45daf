"""Multi-teacher knowledge distillation for end-to-end text image translation."""

__version__ = "0.1.0"
