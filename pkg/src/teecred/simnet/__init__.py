"""Network simulation, adversary, invariant checks and attack campaigns."""
