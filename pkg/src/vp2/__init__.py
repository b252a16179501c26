"""Visual prompt planning on a synthetic household gridworld.

A small autoregressive transformer consumes goal text, past actions, and
visual observations injected as soft-prompt embeddings, trained by behavior
cloning on oracle demonstrations and evaluated against text-only, caption,
and affordance-ranked baselines.
"""

__version__ = "0.1.0"
