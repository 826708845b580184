"""Teacher-student distillation and the SLPD training loop."""
