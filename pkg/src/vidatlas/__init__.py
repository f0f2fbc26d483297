"""Hierarchical-grid video exploration engine.

A video is represented as a recursively splittable contact-sheet grid; a
coordinator agent probes the root view and dispatches workers that navigate,
perceive, and commit evidence into a shared visual scratchpad.  Scripted
oracle policies make the whole loop deterministic for tests and experiments;
a remote multimodal chat endpoint drives real runs.
"""

__version__ = "0.1.0"

from .orchestrator import Episode, EpisodeConfig, EpisodeResult, run_episode  # noqa: F401
