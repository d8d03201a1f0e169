"""Six-channel photon-counting lidar retrieval engine.

Maximum-likelihood estimation of temperature, water vapor, and aerosol
backscatter from raw photon counts, with total-variation regularization,
validated end to end against a built-in synthetic scene generator.
"""

__version__ = "0.1.0"
