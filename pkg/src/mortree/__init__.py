"""Tree-based libraries of reduced spaces for parametric problems."""
