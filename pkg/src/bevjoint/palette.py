"""Semantic class palette: id 0 is free space, ids 1..17 follow the standard
occupancy benchmark naming/order used in our report tables."""

OCC_CLASS_NAMES = (
    "free",
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
)

FREE_ID = 0
NUM_CLASSES = len(OCC_CLASS_NAMES)  # 18 including free

CLASS_IDS = {name: i for i, name in enumerate(OCC_CLASS_NAMES)}

# classes that are discrete objects (eligible for detection / scene objects)
THING_CLASSES = (
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
)

# areal/background classes
STUFF_CLASSES = (
    "others",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
)


def class_id(name):
    try:
        return CLASS_IDS[name]
    except KeyError:
        raise KeyError(f"unknown semantic class {name!r}") from None
