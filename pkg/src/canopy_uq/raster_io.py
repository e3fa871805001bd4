"""GeoTIFF and raw-grid ingest/export for :class:`RasterGrid`.

GeoTIFFs are written north-up (the usual file convention) and flipped on read
so that in memory row 0 is the southern edge. Only axis-aligned grids with
square pixels are supported; georeferencing is carried by the
ModelPixelScale/ModelTiepoint tags and the nodata value by the GDAL_NODATA tag.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import tifffile

from .grid import DEFAULT_NODATA, RasterGrid

TAG_PIXEL_SCALE = 33550
TAG_TIEPOINT = 33922
TAG_GEOKEYS = 34735
TAG_GEOASCII = 34737
TAG_GDAL_NODATA = 42113

RAW_MAGIC = b"CUQG"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sIIII3df16x")
assert _RAW_HEADER.size == 64


class RasterFormatError(ValueError):
    pass


def write_geotiff(path, r: RasterGrid, tile: int | None = None) -> None:
    """Write ``r`` as float32 GeoTIFF; ``tile`` selects tiled (vs striped) layout."""
    top_y = r.origin_y + r.height * r.pixel_size
    data = np.ascontiguousarray(r.data[::-1].astype(np.float32))
    if r.channels == 1:
        data = data[:, :, 0]
    extratags = [
        (TAG_PIXEL_SCALE, "d", 3, (r.pixel_size, r.pixel_size, 0.0), True),
        (TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, r.origin_x, top_y, 0.0), True),
        # GTModelType=projected, GTRasterType=PixelIsArea
        (TAG_GEOKEYS, "H", 12, (1, 1, 0, 2, 1024, 0, 1, 1, 1025, 0, 1, 1), True),
        (TAG_GDAL_NODATA, "s", 0, repr(float(r.nodata)), True),
    ]
    if r.crs_tag:
        extratags.append((TAG_GEOASCII, "s", 0, r.crs_tag + "|", True))
    kwargs = {}
    if tile:
        kwargs["tile"] = (tile, tile)
    tifffile.imwrite(
        path,
        data,
        photometric="minisblack",
        planarconfig="contig" if r.channels > 1 else None,
        extratags=extratags,
        metadata=None,
        **kwargs,
    )


def read_geotiff(path) -> RasterGrid:
    try:
        tif = tifffile.TiffFile(path)
    except tifffile.TiffFileError as exc:
        raise RasterFormatError(f"{path}: {exc}") from exc
    with tif:
        page = tif.pages[0]
        arr = page.asarray()
        tags = page.tags
        if TAG_PIXEL_SCALE not in tags or TAG_TIEPOINT not in tags:
            raise RasterFormatError(f"{path}: missing georeferencing tags")
        scale = tags[TAG_PIXEL_SCALE].value
        tie = tags[TAG_TIEPOINT].value
        nodata = DEFAULT_NODATA
        if TAG_GDAL_NODATA in tags:
            nodata = float(str(tags[TAG_GDAL_NODATA].value).strip("\x00 "))
        crs_tag = ""
        if TAG_GEOASCII in tags:
            crs_tag = str(tags[TAG_GEOASCII].value).rstrip("|\x00")
        planar = page.planarconfig
    if abs(scale[0] - scale[1]) > 1e-9 * abs(scale[0]):
        raise RasterFormatError(f"{path}: non-square pixels are not supported")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    elif arr.ndim == 3 and planar == tifffile.PLANARCONFIG.SEPARATE:
        arr = np.moveaxis(arr, 0, -1)
    pixel_size = float(scale[0])
    height = arr.shape[0]
    # tiepoint maps raster (i, j) to map (x, y) of the top-left corner
    origin_x = float(tie[3]) - float(tie[0]) * pixel_size
    top_y = float(tie[4]) + float(tie[1]) * pixel_size
    return RasterGrid(
        data=np.ascontiguousarray(arr[::-1]).astype(np.float32, copy=False),
        origin_x=origin_x,
        origin_y=top_y - height * pixel_size,
        pixel_size=pixel_size,
        nodata=nodata,
        crs_tag=crs_tag,
    )


def write_raw(path, r: RasterGrid) -> None:
    header = _RAW_HEADER.pack(
        RAW_MAGIC, RAW_VERSION, r.width, r.height, r.channels, r.origin_x, r.origin_y, r.pixel_size, r.nodata
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(r.data, dtype="<f4").tobytes())


def read_raw(path) -> RasterGrid:
    buf = Path(path).read_bytes()
    if len(buf) < _RAW_HEADER.size:
        raise RasterFormatError(f"{path}: truncated header")
    magic, version, w, h, c, ox, oy, ps, nodata = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r}")
    if version != RAW_VERSION:
        raise RasterFormatError(f"{path}: unsupported version {version}")
    n = w * h * c
    body = buf[_RAW_HEADER.size :]
    if len(body) != 4 * n:
        raise RasterFormatError(f"{path}: expected {4 * n} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
    return RasterGrid(data, ox, oy, ps, float(nodata))


def read_raster(path) -> RasterGrid:
    """Dispatch on file content: raw grids by magic, everything else as GeoTIFF."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == RAW_MAGIC:
        return read_raw(path)
    return read_geotiff(path)


def write_raster(path, r: RasterGrid) -> None:
    if str(path).lower().endswith((".tif", ".tiff")):
        write_geotiff(path, r)
    else:
        write_raw(path, r)
