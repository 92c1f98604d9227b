# regadapt CLI - registration from the command line
"""
regadapt CLI package.

Commands:
    regadapt synth        - Generate a synthetic pair with ground truth
    regadapt register     - Full pipeline on one pair
    regadapt pretrain     - Pretrain the refinement cascade
    regadapt evaluate     - Dice / HD95 / TRE / NDV reports
    regadapt baseline     - Backbone baselines vs the pipeline
"""

from cli.main import cli, main
from regadapt import __version__

__all__ = ['cli', 'main', '__version__']
