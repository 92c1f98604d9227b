#!/usr/bin/env python3
"""`python -m cli` runs the regadapt command group."""
from cli.main import main

if __name__ == "__main__":
    main()
