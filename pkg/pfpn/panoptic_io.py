# -*- coding: utf-8 -*-

"""
panoptic_io.py: Panoptic Annotation and Tensor File I/O

This module reads and writes:

* the standard panoptic annotation format: one JSON file (images, annotations,
  categories) plus one id-encoded PNG per image, id = R + 256 G + 256^2 B, 0 = void;
* instance predictions as JSON lines, one object per instance, with run-length encoded
  masks (row-major, alternating 0 / 1 run counts starting with the zeros);
* the tensor interchange file: b"PTSR", version byte 1, u8 rank, rank x u32 little-endian
  dims, then little-endian float32 data in row-major order.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from pfpn.exceptions import ContractError, DatasetFileError, DatasetFormatError, DatasetValidationError
from pfpn.fusion import InstancePrediction, PanopticMap, SegmentInfo

__all__ = [
    "CategoryMeta",
    "SegmentRecord",
    "AnnotationRecord",
    "PanopticDataset",
    "PanopticIO",
]

logger = logging.getLogger(__name__)

MAX_ID = 256 ** 3
TENSOR_MAGIC = b"PTSR"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class CategoryMeta:
    id: int
    name: str
    is_thing: bool

    def to_json(self) -> dict:
        return {"id": self.id, "name": self.name, "isthing": int(self.is_thing)}

    @classmethod
    def from_json(cls, entry: dict) -> "CategoryMeta":
        return cls(int(entry["id"]), str(entry.get("name", entry["id"])), bool(entry.get("isthing", 0)))


@dataclass(frozen=True)
class SegmentRecord:
    id: int
    category_id: int
    area: int
    iscrowd: bool = False

    def to_json(self, bbox: Optional[List[int]] = None) -> dict:
        entry = {"id": self.id, "category_id": self.category_id, "area": self.area, "iscrowd": int(self.iscrowd)}
        if bbox is not None:
            entry["bbox"] = bbox
        return entry


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: object
    file_name: str
    segments_info: Tuple[SegmentRecord, ...]


class PanopticDataset:
    """
    Lazily decoded panoptic dataset.

    The JSON metadata is parsed up front; PNGs are read one at a time while iterating, so
    only one image is held in memory. Iteration yields (PanopticMap, AnnotationRecord).
    """

    def __init__(self, annotations: List[dict], images: Dict[object, dict], categories: List[CategoryMeta],
                 png_dir: Path, strict: bool = True) -> None:
        self.annotations = annotations
        self.images = images
        self.categories = categories
        self.png_dir = Path(png_dir)
        self.strict = strict
        self._by_image: Dict[object, dict] = {}
        for annotation in annotations:
            if not isinstance(annotation, dict):
                raise DatasetFormatError(f"annotation {annotation!r} is not an object")
            image_id = annotation.get("image_id")
            if image_id in self._by_image:
                raise DatasetValidationError(f"image {image_id} is annotated more than once", image_id)
            self._by_image[image_id] = annotation

    def __len__(self) -> int:
        return len(self.annotations)

    @property
    def category_table(self) -> Dict[int, bool]:
        return {category.id: category.is_thing for category in self.categories}

    def image_ids(self) -> List[object]:
        return list(self._by_image)

    def __iter__(self) -> Iterator[Tuple[PanopticMap, AnnotationRecord]]:
        for annotation in self.annotations:
            yield self.decode(annotation)

    def annotation(self, image_id) -> dict:
        """Raw annotation of `image_id`; raises KeyError when it has none."""
        return self._by_image[image_id]

    def get(self, image_id) -> Tuple[PanopticMap, AnnotationRecord]:
        return self.decode(self.annotation(image_id))

    def decode(self, annotation: dict) -> Tuple[PanopticMap, AnnotationRecord]:
        record = PanopticIO.parse_annotation(annotation)
        image_id = record.image_id
        id_map = PanopticIO.read_id_png(self.png_dir / record.file_name)

        image = self.images.get(image_id)
        if image is not None and "height" in image and "width" in image:
            if id_map.shape != (int(image["height"]), int(image["width"])):
                raise DatasetValidationError(
                    f"image {image_id}: PNG extent {id_map.shape} differs from declared "
                    f"{(image['height'], image['width'])}",
                    image_id,
                )

        table = self.category_table
        ids, counts = np.unique(id_map, return_counts=True)
        pixel_areas = {int(i): int(c) for i, c in zip(ids, counts) if i != 0}
        seen = set()
        segments, kept = {}, []
        for segment in record.segments_info:
            if segment.id in seen:
                raise DatasetValidationError(f"image {image_id}: duplicate segment id {segment.id}", image_id, segment.id)
            seen.add(segment.id)
            if segment.category_id not in table:
                raise DatasetValidationError(
                    f"image {image_id}: segment {segment.id} has unknown category {segment.category_id}",
                    image_id,
                    segment.id,
                )
            if not self.strict:
                area = pixel_areas.get(segment.id, 0)
                if area == 0:
                    logger.warning(f"image {image_id}: dropping segment {segment.id} with no pixels")
                    continue
                if area != segment.area:
                    logger.warning(f"image {image_id}: repairing area of segment {segment.id}: {segment.area} -> {area}")
                    segment = replace(segment, area=area)
            segments[segment.id] = SegmentInfo(segment.category_id, table[segment.category_id], segment.area, segment.iscrowd)
            kept.append(segment)

        panoptic = PanopticMap(id_map, segments).validate(image_id)
        return panoptic, replace(record, segments_info=tuple(kept))


class PanopticIO:
    """
    PanopticIO: readers and writers for panoptic datasets, instance files and tensor files.
    """

    @staticmethod
    def decode_id_png(rgb: np.ndarray) -> np.ndarray:
        """(H, W, 3) uint8 -> (H, W) int64 ids."""
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
            raise ContractError(f"expected an (H, W, 3) uint8 RGB image, got shape {rgb.shape} dtype {rgb.dtype}")
        rgb = rgb.astype(np.int64)
        return rgb[..., 0] + 256 * rgb[..., 1] + 256 * 256 * rgb[..., 2]

    @staticmethod
    def encode_id_png(id_map: np.ndarray) -> np.ndarray:
        """(H, W) ids -> (H, W, 3) uint8, inverse of `decode_id_png`."""
        id_map = np.asarray(id_map)
        if id_map.ndim != 2:
            raise ContractError(f"id map must be (H, W), got shape {id_map.shape}")
        id_map = id_map.astype(np.int64)
        if id_map.size and (id_map.min() < 0 or id_map.max() >= MAX_ID):
            raise ContractError(f"segment ids must be within [0, {MAX_ID}), got [{id_map.min()}, {id_map.max()}]")
        rgb = np.empty(id_map.shape + (3,), dtype=np.uint8)
        for channel in range(3):
            rgb[..., channel] = id_map % 256
            id_map = id_map // 256
        return rgb

    @staticmethod
    def read_id_png(path) -> np.ndarray:
        path = Path(path)
        if not path.is_file():
            raise DatasetFileError(f"missing PNG '{path}'")
        try:
            with Image.open(path) as image:
                if image.mode != "RGB":
                    raise DatasetFormatError(f"'{path}' is a {image.mode} image, expected RGB")
                rgb = np.array(image, dtype=np.uint8)
        except (OSError, SyntaxError) as err:
            raise DatasetFormatError(f"cannot decode PNG '{path}': {err}") from err
        return PanopticIO.decode_id_png(rgb)

    @staticmethod
    def write_id_png(path, id_map: np.ndarray) -> Path:
        """Write an id map as RGB PNG; fixed encoder settings make the bytes reproducible."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(PanopticIO.encode_id_png(id_map)).save(path, format="PNG", optimize=False, compress_level=6)
        return path

    @staticmethod
    def _read_json(path):
        path = Path(path)
        if not path.is_file():
            raise DatasetFileError(f"missing JSON file '{path}'")
        try:
            with open(path) as f:
                return json.load(f)
        except json.JSONDecodeError as err:
            raise DatasetFormatError(f"malformed JSON in '{path}': {err}") from err

    @staticmethod
    def read_categories(path) -> List[CategoryMeta]:
        """Read categories from a list or from a dataset JSON's "categories" key."""
        content = PanopticIO._read_json(path)
        entries = content.get("categories") if isinstance(content, dict) else content
        if not isinstance(entries, list):
            raise DatasetFormatError(f"'{path}' does not contain a category list")
        try:
            categories = [CategoryMeta.from_json(entry) for entry in entries]
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetFormatError(f"malformed category in '{path}': {err}") from err
        ids = [category.id for category in categories]
        if len(set(ids)) != len(ids):
            raise DatasetValidationError(f"'{path}' has duplicate category ids")
        return categories

    @staticmethod
    def write_categories(path, categories: Sequence[CategoryMeta]) -> None:
        with open(path, "w") as f:
            json.dump({"categories": [category.to_json() for category in categories]}, f, indent=2)

    @staticmethod
    def parse_annotation(annotation: dict) -> AnnotationRecord:
        try:
            segments = tuple(
                SegmentRecord(int(s["id"]), int(s["category_id"]), int(s["area"]), bool(s.get("iscrowd", 0)))
                for s in annotation["segments_info"]
            )
            return AnnotationRecord(annotation["image_id"], str(annotation["file_name"]), segments)
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetFormatError(f"malformed annotation {annotation.get('image_id', '?')}: {err}") from err

    @staticmethod
    def load_dataset(json_path, png_dir, strict: bool = True) -> PanopticDataset:
        """
        Open a panoptic dataset.

        Args:
            json_path: The dataset JSON.
            png_dir: Directory holding the id PNGs named by each annotation's file_name.
            strict: When False, declared areas are repaired from pixel counts and segments
                without pixels are dropped instead of raising.

        Returns:
            A PanopticDataset; images are decoded while iterating.

        Raises:
            DatasetFileError, DatasetFormatError, DatasetValidationError
        """
        content = PanopticIO._read_json(json_path)
        if not isinstance(content, dict):
            raise DatasetFormatError(f"'{json_path}' is not a panoptic dataset object")
        try:
            categories = [CategoryMeta.from_json(entry) for entry in content.get("categories", [])]
            images = {image["id"]: image for image in content.get("images", [])}
            annotations = list(content.get("annotations", []))
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetFormatError(f"malformed dataset '{json_path}': {err}") from err
        png_dir = Path(png_dir)
        if annotations and not png_dir.is_dir():
            raise DatasetFileError(f"missing PNG directory '{png_dir}'")
        logger.debug(f"opened {json_path}: {len(annotations)} annotations, {len(categories)} categories")
        return PanopticDataset(annotations, images, categories, png_dir, strict)

    @staticmethod
    def to_record(panoptic: PanopticMap, image_id, file_name: str) -> AnnotationRecord:
        segments = tuple(
            SegmentRecord(segment_id, info.category_id, info.area, info.iscrowd)
            for segment_id, info in sorted(panoptic.segments.items())
        )
        return AnnotationRecord(image_id, file_name, segments)

    @staticmethod
    def bbox(mask: np.ndarray) -> List[int]:
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if not len(rows):
            return [0, 0, 0, 0]
        return [int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)]

    @staticmethod
    def annotation_json(panoptic: PanopticMap, record: AnnotationRecord) -> dict:
        return {
            "image_id": record.image_id,
            "file_name": record.file_name,
            "segments_info": [
                segment.to_json(PanopticIO.bbox(panoptic.id_map == segment.id)) for segment in record.segments_info
            ],
        }

    @staticmethod
    def write_panoptic(json_path, png_path, panoptic: PanopticMap, image_id=0) -> AnnotationRecord:
        """Write a single map as a PNG plus its annotation JSON."""
        png_path = PanopticIO.write_id_png(png_path, panoptic.id_map)
        record = PanopticIO.to_record(panoptic, image_id, png_path.name)
        with open(json_path, "w") as f:
            json.dump(PanopticIO.annotation_json(panoptic, record), f, indent=2)
        return record

    @staticmethod
    def write_dataset(json_path, png_dir, items: Iterable[Tuple[object, PanopticMap]],
                      categories: Sequence[CategoryMeta]) -> List[AnnotationRecord]:
        """
        Write (image_id, PanopticMap) pairs as a panoptic dataset; PNGs are named
        `<image_id>.png`.
        """
        png_dir = Path(png_dir)
        png_dir.mkdir(parents=True, exist_ok=True)
        images, annotations, records = [], [], []
        for image_id, panoptic in items:
            file_name = f"{image_id}.png"
            PanopticIO.write_id_png(png_dir / file_name, panoptic.id_map)
            record = PanopticIO.to_record(panoptic, image_id, file_name)
            height, width = panoptic.extent
            images.append({"id": image_id, "file_name": file_name, "height": height, "width": width})
            annotations.append(PanopticIO.annotation_json(panoptic, record))
            records.append(record)
        with open(json_path, "w") as f:
            json.dump({
                "images": images,
                "annotations": annotations,
                "categories": [category.to_json() for category in categories],
            }, f, indent=2)
        logger.info(f"wrote {len(records)} images to {json_path}")
        return records

    @staticmethod
    def encode_rle(mask: np.ndarray) -> dict:
        """Row-major run lengths, alternating 0 / 1 and starting with a (possibly empty) run of zeros."""
        mask = np.asarray(mask).astype(bool)
        flat = mask.ravel()
        changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        runs = np.diff(np.concatenate(([0], changes, [flat.size]))).tolist()
        if flat.size and flat[0]:
            runs = [0] + runs
        return {"size": list(mask.shape), "counts": runs}

    @staticmethod
    def decode_rle(rle: dict) -> np.ndarray:
        try:
            height, width = (int(v) for v in rle["size"])
            counts = np.asarray(rle["counts"], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetFormatError(f"malformed RLE mask: {err}") from err
        if counts.ndim != 1 or np.any(counts < 0) or counts.sum() != height * width:
            raise DatasetFormatError(f"RLE counts do not cover a {height}x{width} mask")
        values = (np.arange(len(counts)) % 2).astype(bool)
        return np.repeat(values, counts).reshape(height, width)

    @staticmethod
    def read_instances(path, extent: Optional[Tuple[int, int]] = None) -> List[InstancePrediction]:
        """Read instance predictions from JSON lines: {"category", "score", "mask": RLE}."""
        path = Path(path)
        if not path.is_file():
            raise DatasetFileError(f"missing instance file '{path}'")
        instances = []
        with open(path) as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    mask = PanopticIO.decode_rle(entry["mask"])
                    instance = InstancePrediction(mask, int(entry["category"]), float(entry["score"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError, DatasetFormatError) as err:
                    raise DatasetFormatError(f"{path}:{line_number}: malformed instance: {err}") from err
                if extent is not None and mask.shape != tuple(extent):
                    raise DatasetValidationError(
                        f"{path}:{line_number}: mask extent {mask.shape} differs from {tuple(extent)}"
                    )
                instances.append(instance)
        return instances

    @staticmethod
    def write_instances(path, instances: Iterable[InstancePrediction]) -> None:
        with open(path, "w") as f:
            for instance in instances:
                entry = {"category": instance.category, "score": instance.score,
                         "mask": PanopticIO.encode_rle(instance.mask)}
                f.write(json.dumps(entry) + "\n")

    @staticmethod
    def encode_tensor(array) -> bytes:
        array = np.asarray(array)
        if array.ndim > 255:
            raise ContractError(f"tensor rank {array.ndim} does not fit the file header")
        if any(dim >= 2 ** 32 for dim in array.shape):
            raise ContractError(f"tensor dims {array.shape} do not fit the file header")
        header = TENSOR_MAGIC + bytes([TENSOR_VERSION, array.ndim]) + np.asarray(array.shape, dtype="<u4").tobytes()
        return header + np.ascontiguousarray(array, dtype="<f4").tobytes()

    @staticmethod
    def decode_tensor(payload: bytes, source: str = "<bytes>") -> np.ndarray:
        if len(payload) < 6 or payload[:4] != TENSOR_MAGIC:
            raise DatasetFormatError(f"{source}: not a tensor file")
        if payload[4] != TENSOR_VERSION:
            raise DatasetFormatError(f"{source}: unsupported tensor file version {payload[4]}")
        rank = payload[5]
        offset = 6 + 4 * rank
        if len(payload) < offset:
            raise DatasetFormatError(f"{source}: truncated header")
        shape = tuple(int(dim) for dim in np.frombuffer(payload[6:offset], dtype="<u4"))
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if len(payload) - offset != expected:
            raise DatasetFormatError(f"{source}: expected {expected} data bytes for shape {shape}, got {len(payload) - offset}")
        return np.frombuffer(payload[offset:], dtype="<f4").astype(np.float32).reshape(shape)

    @staticmethod
    def write_tensor(path, array) -> Path:
        path = Path(path)
        path.write_bytes(PanopticIO.encode_tensor(array))
        return path

    @staticmethod
    def read_tensor(path) -> np.ndarray:
        path = Path(path)
        if not path.is_file():
            raise DatasetFileError(f"missing tensor file '{path}'")
        return PanopticIO.decode_tensor(path.read_bytes(), str(path))
