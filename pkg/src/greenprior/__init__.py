"""Urban green-space prioritization from heterogeneous geospatial layers."""

from .errors import ConfigError, DataError, GreenPriorError, NumericalError
from .raster import Grid, GridGeoref, Stack, Zone, ZoneSet

__version__ = "0.1.0"
