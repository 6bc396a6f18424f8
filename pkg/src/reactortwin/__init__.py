"""reactortwin: closed-loop reactor management sandbox.

Plant simulator, episode database generator, feedforward network
trainer, diagnosis/prognosis twins, closed operational loop, trust
assessment toolkit, and a CLI/service gateway.
"""

__version__ = "0.1.0"
