"""Volume I/O, preprocessing, splitting and synthetic phantoms."""

from .dataset import (
    ArrayDataset,
    Protocol2D,
    SplitError,
    SplitManifest,
    load_manifest,
    load_split,
    read_subject,
    slices_dataset,
    split_sizes,
    split_subjects,
    volumes_dataset,
    write_subject,
)
from .phantom import PhantomConfig, PhantomPlacementError, generate_phantom
from .preprocess import CROP_BOX, SLICE_SIZE, SliceSample, crop_resize_2d, resample_3d, slice_axial, zscore_normalize
from .volume import (
    BadMagicError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    Volume,
    VolumeFormatError,
    read_volume,
    write_volume,
)
