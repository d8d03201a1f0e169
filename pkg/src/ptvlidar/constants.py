"""Physical constants used across the retrieval (SI units)."""

# Boltzmann constant [J/K] (exact, 2019 SI)
KB = 1.380649e-23

# Avogadro constant [1/mol] (exact, 2019 SI)
N_AVOGADRO = 6.02214076e23

# speed of light in vacuum [m/s] (exact)
C_LIGHT = 299792458.0

# gravitational acceleration used in the hydrostatic model [m/s^2]
G0 = 9.81

# mean molar mass of dry air [kg/mol]
M_AIR = 0.02897

# molar mass of water [g/mol]; divides gram-per-cubic-meter humidity
M_H2O = 18.018

# universal gas constant [J/(mol K)]
R0 = 8.314459

# volume mixing ratio of molecular oxygen in dry air
F_O2 = 0.211032

# hydrostatic scale a = g0*M_air/R0 [K/m]: ln(P/P0) = -(a*r/T0)*log1p(s)/s
HYDROSTATIC_A = G0 * M_AIR / R0
