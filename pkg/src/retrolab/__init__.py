"""Closed-loop trajectory prediction with retrospective error feedback.

Modules:
    numkit      small reverse-mode autodiff and neural-network primitives
    domain      trajectories, samples, rollouts and prediction sets
    scenegen    synthetic biased driving scenarios and rollout extraction
    predictor   a compact multimodal MLP trajectory predictor
    retrospect  the masked error buffer and the Ret-S / Ret-C offset heads
    engine      closed-loop training, evaluation passes and checkpoints
    evalkit     metrics, per-step curves, buffer ablation, agent dropout
    cli         command-line experiment runner
"""

__version__ = "0.1.0"
