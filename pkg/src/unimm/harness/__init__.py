"""Toy shape-scene data, attribute checking, run configs and the command line."""
