"""Desk-scale multi-stream flow-matching policy system.

Subpackages mirror the pipeline: a differentiable tensor core (`tensor`),
the observation encoder with motion features (`encoder`), the recurrent
feature queue (`memory`), the multi-stream action transformer (`msat`),
flow-matching losses and samplers (`flow`), synthetic probe environments
(`envs`), staged training (`trainer`), offline RL refinement (`rl`), and
the static-graph capture/fusion optimizer (`graphopt`).
"""

__version__ = "0.1.0"
