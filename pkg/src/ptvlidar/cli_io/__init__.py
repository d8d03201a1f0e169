"""File formats, plotting, and the command-line surface."""
