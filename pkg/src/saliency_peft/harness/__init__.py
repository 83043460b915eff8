"""I/O, configuration, training and evaluation loops, and the command line."""
