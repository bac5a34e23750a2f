"""Training, evaluation and command-line tooling."""
