"""Service layer: graph storage, gene encoding, search and training."""
