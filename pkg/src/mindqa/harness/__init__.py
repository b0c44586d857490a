"""Configuration, persistence, evaluation, dumps and the command line."""
