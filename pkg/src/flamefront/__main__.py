"""Entry point for python -m flamefront."""

from .cli import main

if __name__ == '__main__':
    main()
