"""zipflow: desk-scale flow-matching text-to-feature engine.

Subpackages:
    diffcore   -- minimal reverse-mode autodiff tensor engine + Adam
    alignment  -- tokenization, average upsampling, duration estimation
    model      -- text encoder and U-Net vector field estimator
    flowmatch  -- CFM training loss, Euler ODE solver, synthesis pipeline
    distill    -- two-step teacher flow distillation with EMA phase
    toyspeech  -- synthetic corpus, oracle decoder, toy-WER / toy-sim
    checkpoint -- binary checkpoint / corpus container format
    cli        -- command-line entry points
"""

__version__ = "0.1.0"

from . import diffcore  # noqa: F401
