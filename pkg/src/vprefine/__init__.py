"""Self-refining visual programs: a small DSL, static analysis, a scene-graph runtime and a feedback-driven refine loop."""

__version__ = "0.1.0"
