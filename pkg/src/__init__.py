"""DFKD - conditional data-free knowledge distillation toolkit."""
__version__ = "0.1.0"
