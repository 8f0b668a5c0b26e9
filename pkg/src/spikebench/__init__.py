"""Hardware-realistic SNN inference benchmarking."""
