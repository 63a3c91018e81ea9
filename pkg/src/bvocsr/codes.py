"""Categorical code tables for land cover and climate rasters."""

# ESA WorldCover v200 legend (11 classes); 0 is no-data.
WORLDCOVER_CLASSES = {
    10: "tree_cover",
    20: "shrubland",
    30: "grassland",
    40: "cropland",
    50: "built_up",
    60: "bare_sparse",
    70: "snow_ice",
    80: "water",
    90: "herbaceous_wetland",
    95: "mangroves",
    100: "moss_lichen",
}
LANDCOVER_NODATA = 0
TREE_COVER = 10
CROPLAND = 40

# Driver name -> WorldCover class used for its percentage map.
DRIVER_CLASSES = {"tc": TREE_COVER, "cl": CROPLAND}

# Koppen-Geiger integer codes as distributed with the Beck et al. maps; 0 is no-data.
KOPPEN_CODES = {
    1: "Af", 2: "Am", 3: "Aw",
    4: "BWh", 5: "BWk", 6: "BSh", 7: "BSk",
    8: "Csa", 9: "Csb", 10: "Csc",
    11: "Cwa", 12: "Cwb", 13: "Cwc",
    14: "Cfa", 15: "Cfb", 16: "Cfc",
    17: "Dsa", 18: "Dsb", 19: "Dsc", 20: "Dsd",
    21: "Dwa", 22: "Dwb", 23: "Dwc", 24: "Dwd",
    25: "Dfa", 26: "Dfb", 27: "Dfc", 28: "Dfd",
    29: "ET", 30: "EF",
}
KOPPEN_NAMES = {name: code for code, name in KOPPEN_CODES.items()}
CLIMATE_NODATA = 0

# Classes occurring over the European study area.
STUDY_AREA_CLASSES = (
    "BWh", "BWk", "BSh", "BSk", "Csa", "Csb", "Cfa", "Cfb",
    "Cfc", "Dsa", "Dsb", "Dsc", "Dfa", "Dfb", "Dfc", "ET",
)

# Assumed membership of the composite Mediterranean class; override via fold config.
DEFAULT_MED_CLASSES = ("Csa", "Csb", "BSh", "BSk", "BWh", "BWk", "Cfa", "Dsa", "Dsb")


def climate_code(name_or_code) -> int:
    """Resolve a climate class name (``"Cfb"``) or integer code to its code."""
    if isinstance(name_or_code, str):
        try:
            return KOPPEN_NAMES[name_or_code]
        except KeyError:
            raise ValueError(f"unknown climate class {name_or_code!r}") from None
    code = int(name_or_code)
    if code not in KOPPEN_CODES and code != CLIMATE_NODATA:
        raise ValueError(f"unknown climate code {code}")
    return code


def climate_name(code: int) -> str:
    return KOPPEN_CODES.get(int(code), "none")
