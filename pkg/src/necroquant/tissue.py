"""Tissue class taxonomy and color palettes."""

from enum import IntEnum


class TissueClass(IntEnum):
    """Integer codes are stable across all file formats."""

    UNLABELED = 0
    VIABLE_TUMOR = 1
    NECROSIS_WITH_BONE = 2
    NECROSIS_WITHOUT_BONE = 3
    NORMAL_BONE = 4
    NORMAL_TISSUE = 5
    CARTILAGE = 6
    BLANK = 7


#: Necrotic tumor is the union of both necrosis classes.
NECROTIC_CLASSES = (TissueClass.NECROSIS_WITH_BONE, TissueClass.NECROSIS_WITHOUT_BONE)

#: Colors used when painting synthetic slides and by the chromatic classifier.
#: Blank is white, matching the glass background of a real slide and the
#: padding color used for out-of-bounds reads.
CANONICAL_COLORS = {
    TissueClass.VIABLE_TUMOR: (255, 0, 0),  # red
    TissueClass.NECROSIS_WITH_BONE: (0, 0, 255),  # blue
    TissueClass.NECROSIS_WITHOUT_BONE: (255, 255, 0),  # yellow
    TissueClass.NORMAL_BONE: (0, 255, 0),  # green
    TissueClass.NORMAL_TISSUE: (255, 165, 0),  # orange
    TissueClass.CARTILAGE: (150, 75, 0),  # brown
    TissueClass.BLANK: (255, 255, 255),  # white
}

#: Colors used when rendering overlays.  Same legend, except Blank renders
#: gray so it remains visible over a white slide.
OVERLAY_COLORS = dict(CANONICAL_COLORS)
OVERLAY_COLORS[TissueClass.BLANK] = (128, 128, 128)

#: Padding for out-of-bounds region reads.
PAD_RGB = (255, 255, 255)
PAD_CLASS = TissueClass.BLANK

NUM_CLASSES = 8
