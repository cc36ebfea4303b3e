"""NIfTI-1 reading and writing for image, label and vector volumes."""

from __future__ import annotations

import gzip
import logging
from pathlib import Path

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from .errors import NiftiFormatError, UnsupportedError
from .volume import GridGeometry, ImageVolume, LabelVolume

log = logging.getLogger(__name__)

SUPPORTED_DTYPES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64"}
INTENT_LABEL = 1002
INTENT_VECTOR = 1007


def _read_magic(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read(348)
    if len(raw) < 348:
        raise NiftiFormatError(f"{path}: truncated header")
    return raw[344:348]


def geometry_from_header(header, dims):
    """Lattice geometry from the sform, else qform, else pixdim only."""
    sform, scode = header.get_sform(coded=True)
    qform, qcode = header.get_qform(coded=True)
    if scode and scode > 0:
        aff = sform
    elif qcode and qcode > 0:
        aff = qform
    else:
        zooms = header["pixdim"][1:4].astype(float)
        zooms = np.where(zooms > 0, zooms, 1.0)
        aff = np.diag(list(zooms) + [1.0])
    m = np.asarray(aff[:3, :3], dtype=float)
    spacing = np.linalg.norm(m, axis=0)
    if np.any(spacing <= 0) or not np.all(np.isfinite(m)):
        raise NiftiFormatError("degenerate orientation matrix")
    return GridGeometry(dims, tuple(spacing), tuple(aff[:3, 3]), m / spacing)


def open_nifti(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        magic = _read_magic(path)
    except (OSError, EOFError) as exc:
        raise NiftiFormatError(f"{path}: unreadable header ({exc})") from exc
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    try:
        img = nib.Nifti1Image.from_filename(str(path))
    except (ImageFileError, ValueError, EOFError) as exc:
        raise NiftiFormatError(f"{path}: {exc}") from exc
    code = int(img.header["datatype"])
    if code not in SUPPORTED_DTYPES:
        raise UnsupportedError(f"{path}: unsupported datatype code {code}")
    return img


def load_nifti(path, kind=None):
    """Load a 3D NIfTI-1 volume.

    Parameters
    ----------
    path : str or Path
        ``.nii`` or ``.nii.gz`` file.
    kind : {None, "image", "label"}
        Force the return type.  By default files carrying the NIfTI label
        intent load as :class:`LabelVolume`, everything else as
        :class:`ImageVolume`.
    """
    img = open_nifti(path)
    shape = img.shape
    if len(shape) > 3:
        if any(d != 1 for d in shape[3:]):
            raise UnsupportedError(f"{path}: {len(shape)}-D data with non-singleton trailing dims")
    dims = tuple(shape[:3]) + (1,) * (3 - len(shape[:3]))
    geom = geometry_from_header(img.header, dims)
    raw = np.asanyarray(img.dataobj).reshape(dims, order="F")
    if kind is None:
        kind = "label" if int(img.header["intent_code"]) == INTENT_LABEL else "image"
    if kind == "label":
        return LabelVolume(geom, np.asarray(raw))
    data = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NiftiFormatError(f"{path}: non-finite voxel values")
    return ImageVolume(geom, data)


def make_image(data, geometry, dtype, intent=0):
    header = nib.Nifti1Header()
    header.set_data_dtype(dtype)
    img = nib.Nifti1Image(np.asarray(data, dtype=dtype), geometry.affine, header)
    img.header.set_sform(geometry.affine, code=1)
    d = np.asarray(geometry.direction)
    if np.allclose(d.T @ d, np.eye(3), atol=1e-6):
        img.header.set_qform(geometry.affine, code=1)
    else:
        img.header.set_qform(None, code=0)
    if intent:
        img.header["intent_code"] = intent
    img.header["scl_slope"] = 1.0
    img.header["scl_inter"] = 0.0
    return img


def save_nifti(volume, path):
    """Write a volume; float32 payload for images, int32 for labels."""
    if isinstance(volume, LabelVolume):
        img = make_image(volume.data, volume.geometry, np.int32, INTENT_LABEL)
    else:
        img = make_image(volume.data, volume.geometry, np.float32)
    nib.save(img, str(path))
