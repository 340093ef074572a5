"""Mixed-vocabulary distillation of BERT-style masked language models."""

__version__ = "0.1.0"
