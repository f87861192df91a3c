"""bowlkit: background exemplar codebooks, negative anchor mining, and
open-world proposal recall evaluation."""

__version__ = "0.1.0"

from .codebook import (  # noqa: F401
    Exemplar,
    ExemplarSet,
    batch_s_max,
    build_exemplars,
    load_exemplars,
    s_max,
    save_exemplars,
    top_n,
)
from .embedding_store import (  # noqa: F401
    PatchGrid,
    iter_patches,
    normalize,
    patch_rect,
    read_embeddings,
    write_embeddings,
)
from .geometry import (  # noqa: F401
    AnchorBox,
    AnchorConfig,
    Box,
    GtBox,
    centerness,
    generate_anchors,
    iou,
    ltrb_target,
)
