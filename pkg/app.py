"""Entry point: ``python app.py <command> --config configs/mnist_desk.toml``."""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
