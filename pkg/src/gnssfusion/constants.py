"""Physical and geodetic constants shared across the library.

All values are SI (meters, seconds, radians) unless noted.
"""

# Speed of light in vacuum [m/s] (exact, SI definition)
SPEED_OF_LIGHT = 299792458.0

# WGS84 ellipsoid
WGS84_A = 6378137.0                     # semi-major axis [m]
WGS84_F = 1.0 / 298.257223563           # flattening
WGS84_B = WGS84_A * (1.0 - WGS84_F)     # semi-minor axis [m]
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)    # first eccentricity squared

# Earth rotation rate [rad/s] (WGS84 value used in GNSS processing)
EARTH_ROTATION_RATE = 7.2921151467e-5

# Earth gravitational parameter GM [m^3/s^2]
EARTH_MU = 3.986004418e14

# Default gravity magnitude [m/s^2]
GRAVITY = 9.81

# Nominal L1-class carrier wavelengths per system [m]; c / f_carrier
WAVELENGTH_GPS_L1 = SPEED_OF_LIGHT / 1575.42e6
WAVELENGTH_GLO_G1 = SPEED_OF_LIGHT / 1602.0e6
WAVELENGTH_GAL_E1 = SPEED_OF_LIGHT / 1575.42e6
WAVELENGTH_BDS_B1 = SPEED_OF_LIGHT / 1561.098e6

# Reference wavelength for ionospheric scaling (GPS L1)
WAVELENGTH_REF = WAVELENGTH_GPS_L1
