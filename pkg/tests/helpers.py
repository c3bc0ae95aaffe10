# -*- coding: utf-8 -*-

import numpy as np

from pfpn.fusion import PanopticMap, SegmentInfo
from pfpn.semantic_branch import SCALES, PyramidLevels

# stuff 1-3, things 4-5
CATEGORY_TABLE = {1: False, 2: False, 3: False, 4: True, 5: True}


def make_map(id_map, categories, crowd=()):
    """PanopticMap with areas counted from `id_map`; `categories` maps segment id -> category id."""
    id_map = np.asarray(id_map, dtype=np.int64)
    segments = {
        segment_id: SegmentInfo(category, CATEGORY_TABLE[category], int((id_map == segment_id).sum()),
                                segment_id in crowd)
        for segment_id, category in categories.items()
    }
    return PanopticMap(id_map, segments)


def random_pyramid(rng, channel_dim=8, extent=32, batch=1, dtype=np.float32):
    arrays = {
        scale: rng.normal(batch * channel_dim * (extent // scale) ** 2).reshape(
            batch, channel_dim, extent // scale, extent // scale)
        for scale in SCALES
    }
    return PyramidLevels.from_arrays(arrays, dtype=dtype)
