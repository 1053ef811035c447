"""Semantic label table shared by the simulator, the heads and the reports."""

FREE = 0

OBJECT_CLASSES = (
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
)
BACKGROUND_CLASSES = ("ground", "wall")

CLASS_NAMES = ("free",) + OBJECT_CLASSES + BACKGROUND_CLASSES
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

#: number of non-free labels; grids carry labels in [0, CLASS_COUNT]
CLASS_COUNT = len(CLASS_NAMES) - 1
OBJECT_CLASS_IDS = tuple(range(1, len(OBJECT_CLASSES) + 1))
GROUND = CLASS_IDS["ground"]
WALL = CLASS_IDS["wall"]


def class_name(class_id: int) -> str:
    if 0 <= class_id < len(CLASS_NAMES):
        return CLASS_NAMES[class_id]
    return f"class_{class_id}"
