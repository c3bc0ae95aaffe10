# -*- coding: utf-8 -*-

import json

import numpy as np
import pytest
from PIL import Image

from pfpn.exceptions import ContractError, DatasetFileError, DatasetFormatError, DatasetValidationError
from pfpn.fusion import InstancePrediction
from pfpn.panoptic_io import MAX_ID, CategoryMeta, PanopticIO
from pfpn.tensor_core import Rng
from tests.helpers import CATEGORY_TABLE, make_map

CATEGORIES = [CategoryMeta(category, f"class{category}", is_thing) for category, is_thing in CATEGORY_TABLE.items()]


def _write_raw_dataset(tmp_path, id_map, segments_info, height=None, width=None):
    png_dir = tmp_path / "pngs"
    png_dir.mkdir()
    PanopticIO.write_id_png(png_dir / "a.png", np.asarray(id_map))
    image = {"id": "a", "file_name": "a.png"}
    if height is not None:
        image.update(height=height, width=width)
    content = {
        "images": [image],
        "annotations": [{"image_id": "a", "file_name": "a.png", "segments_info": segments_info}],
        "categories": [category.to_json() for category in CATEGORIES],
    }
    (tmp_path / "data.json").write_text(json.dumps(content))
    return tmp_path / "data.json", png_dir


def test_png_ids_up_to_the_top_of_the_range(tmp_path):
    id_map = np.array([[0, 1, 255, 256], [65535, 65536, MAX_ID - 2, MAX_ID - 1]])
    rgb = PanopticIO.encode_id_png(id_map)
    assert rgb[0, 3].tolist() == [0, 1, 0]
    assert rgb[1, 3].tolist() == [255, 255, 255]
    path = PanopticIO.write_id_png(tmp_path / "ids.png", id_map)
    with Image.open(path) as image:
        assert image.mode == "RGB"
    np.testing.assert_array_equal(PanopticIO.read_id_png(path), id_map)


def test_png_round_trip_random_maps(tmp_path):
    rng = Rng(21)
    path = tmp_path / "ids.png"
    for _ in range(1000):
        h, w = (1 + rng.integers(2, 8)).tolist()
        id_map = rng.integers(h * w, MAX_ID).reshape(h, w)
        id_map.flat[0] = MAX_ID - 1
        np.testing.assert_array_equal(PanopticIO.decode_id_png(PanopticIO.encode_id_png(id_map)), id_map)
        PanopticIO.write_id_png(path, id_map)
        np.testing.assert_array_equal(PanopticIO.read_id_png(path), id_map)


def test_png_encoder_rejects_out_of_range_ids():
    with pytest.raises(ContractError):
        PanopticIO.encode_id_png(np.array([[MAX_ID]]))
    with pytest.raises(ContractError):
        PanopticIO.encode_id_png(np.array([[-1]]))
    with pytest.raises(ContractError):
        PanopticIO.decode_id_png(np.zeros((2, 2, 4), dtype=np.uint8))


def test_png_reader_errors(tmp_path):
    with pytest.raises(DatasetFileError):
        PanopticIO.read_id_png(tmp_path / "absent.png")
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(tmp_path / "gray.png")
    with pytest.raises(DatasetFormatError):
        PanopticIO.read_id_png(tmp_path / "gray.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(DatasetFormatError):
        PanopticIO.read_id_png(tmp_path / "junk.png")


def test_png_bytes_are_reproducible(tmp_path):
    id_map = Rng(0).integers(64, 9).reshape(8, 8)
    a = PanopticIO.write_id_png(tmp_path / "a.png", id_map).read_bytes()
    b = PanopticIO.write_id_png(tmp_path / "b.png", id_map).read_bytes()
    assert a == b


def test_dataset_round_trip(tmp_path):
    maps = {
        1: make_map([[1, 1, 2], [3, 3, 2]], {1: 1, 2: 4, 3: 5}, crowd={3}),
        "img-2": make_map([[0, 7, 7], [7, 7, 9]], {7: 2, 9: 3}),
    }
    records = PanopticIO.write_dataset(tmp_path / "data.json", tmp_path / "pngs", maps.items(), CATEGORIES)
    assert [record.file_name for record in records] == ["1.png", "img-2.png"]

    dataset = PanopticIO.load_dataset(tmp_path / "data.json", tmp_path / "pngs")
    assert len(dataset) == 2
    assert dataset.image_ids() == [1, "img-2"]
    assert dataset.category_table == CATEGORY_TABLE
    for (panoptic, record), image_id in zip(dataset, maps):
        assert record.image_id == image_id
        np.testing.assert_array_equal(panoptic.id_map, maps[image_id].id_map)
        assert panoptic.segments == maps[image_id].segments
    assert dataset.get("img-2")[0].segments[9].category_id == 3

    content = json.loads((tmp_path / "data.json").read_text())
    assert content["annotations"][0]["segments_info"][0]["bbox"] == [0, 0, 2, 1]
    assert content["images"][1] == {"id": "img-2", "file_name": "img-2.png", "height": 2, "width": 3}


def test_strict_loader_rejects_wrong_areas(tmp_path):
    json_path, png_dir = _write_raw_dataset(
        tmp_path, [[1, 1], [2, 2]],
        [{"id": 1, "category_id": 1, "area": 3}, {"id": 2, "category_id": 2, "area": 2}],
    )
    with pytest.raises(DatasetValidationError) as err:
        list(PanopticIO.load_dataset(json_path, png_dir))
    assert err.value.segment_id == 1


def test_permissive_loader_repairs_areas_and_drops_empty_segments(tmp_path):
    json_path, png_dir = _write_raw_dataset(
        tmp_path, [[1, 1], [2, 2]],
        [{"id": 1, "category_id": 1, "area": 3}, {"id": 2, "category_id": 2, "area": 2},
         {"id": 5, "category_id": 3, "area": 4}],
    )
    panoptic, record = next(iter(PanopticIO.load_dataset(json_path, png_dir, strict=False)))
    assert panoptic.segments[1].area == 2
    assert sorted(panoptic.segments) == [1, 2]
    assert [segment.id for segment in record.segments_info] == [1, 2]


@pytest.mark.parametrize(
    "segments_info",
    [
        [{"id": 1, "category_id": 1, "area": 2}, {"id": 1, "category_id": 2, "area": 2}],
        [{"id": 1, "category_id": 42, "area": 2}, {"id": 2, "category_id": 2, "area": 2}],
        [{"id": 1, "category_id": 1, "area": 2}],
    ],
)
def test_loader_validation_errors(tmp_path, segments_info):
    json_path, png_dir = _write_raw_dataset(tmp_path, [[1, 1], [2, 2]], segments_info)
    with pytest.raises(DatasetValidationError):
        list(PanopticIO.load_dataset(json_path, png_dir, strict=False))


def test_loader_checks_declared_extent(tmp_path):
    json_path, png_dir = _write_raw_dataset(
        tmp_path, [[1, 1]], [{"id": 1, "category_id": 1, "area": 2}], height=2, width=1,
    )
    with pytest.raises(DatasetValidationError):
        list(PanopticIO.load_dataset(json_path, png_dir))


def test_loader_file_and_format_errors(tmp_path):
    with pytest.raises(DatasetFileError):
        PanopticIO.load_dataset(tmp_path / "absent.json", tmp_path)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DatasetFormatError):
        PanopticIO.load_dataset(tmp_path / "bad.json", tmp_path)
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(DatasetFormatError):
        PanopticIO.load_dataset(tmp_path / "list.json", tmp_path)
    json_path, png_dir = _write_raw_dataset(tmp_path, [[1]], [{"id": 1, "area": 1}])
    with pytest.raises(DatasetFormatError):
        list(PanopticIO.load_dataset(json_path, png_dir))


def test_annotations_are_indexed_by_image_id(tmp_path):
    json_path, png_dir = _write_raw_dataset(tmp_path, [[1]], [{"id": 1, "category_id": 1, "area": 1}])
    dataset = PanopticIO.load_dataset(json_path, png_dir)
    assert dataset.annotation("a")["file_name"] == "a.png"
    with pytest.raises(KeyError):
        dataset.annotation("b")

    content = json.loads(json_path.read_text())
    content["annotations"] *= 2
    json_path.write_text(json.dumps(content))
    with pytest.raises(DatasetValidationError):
        PanopticIO.load_dataset(json_path, png_dir)


def test_categories_file(tmp_path):
    PanopticIO.write_categories(tmp_path / "categories.json", CATEGORIES)
    assert PanopticIO.read_categories(tmp_path / "categories.json") == CATEGORIES
    (tmp_path / "dupes.json").write_text(json.dumps([{"id": 1}, {"id": 1, "isthing": 1}]))
    with pytest.raises(DatasetValidationError):
        PanopticIO.read_categories(tmp_path / "dupes.json")


def test_rle_encoding():
    mask = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
    rle = PanopticIO.encode_rle(mask)
    assert rle == {"size": [2, 3], "counts": [0, 2, 2, 2]}
    np.testing.assert_array_equal(PanopticIO.decode_rle(rle), mask)
    assert PanopticIO.encode_rle(np.zeros((2, 2)))["counts"] == [4]
    with pytest.raises(DatasetFormatError):
        PanopticIO.decode_rle({"size": [2, 2], "counts": [1, 2]})


def test_instance_file_round_trip(tmp_path):
    rng = Rng(2)
    instances = [
        InstancePrediction(rng.uniform(30).reshape(5, 6) > 0.5, 4, 0.75),
        InstancePrediction(np.zeros((5, 6), bool), 5, 0.1),
    ]
    PanopticIO.write_instances(tmp_path / "inst.jsonl", instances)
    loaded = PanopticIO.read_instances(tmp_path / "inst.jsonl", extent=(5, 6))
    assert [(inst.category, inst.score) for inst in loaded] == [(4, 0.75), (5, 0.1)]
    np.testing.assert_array_equal(loaded[0].mask, instances[0].mask)
    with pytest.raises(DatasetValidationError):
        PanopticIO.read_instances(tmp_path / "inst.jsonl", extent=(6, 5))
    (tmp_path / "bad.jsonl").write_text('{"category": 4}\n')
    with pytest.raises(DatasetFormatError):
        PanopticIO.read_instances(tmp_path / "bad.jsonl")


def test_tensor_file_is_bit_exact(tmp_path):
    array = (Rng(1).normal(2 * 3 * 4) * 1e3).astype(np.float32).reshape(2, 3, 4)
    array[0, 0, 0] = np.float32(1e-40)
    path = PanopticIO.write_tensor(tmp_path / "t.ptsr", array)
    payload = path.read_bytes()
    assert payload[:6] == b"PTSR\x01\x03"
    assert len(payload) == 6 + 3 * 4 + 24 * 4
    loaded = PanopticIO.read_tensor(path)
    assert loaded.dtype == np.float32
    assert loaded.tobytes() == array.tobytes()


def test_tensor_file_errors(tmp_path):
    payload = PanopticIO.encode_tensor(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(DatasetFormatError):
        PanopticIO.decode_tensor(b"NOPE" + payload[4:])
    with pytest.raises(DatasetFormatError):
        PanopticIO.decode_tensor(payload[:4] + b"\x02" + payload[5:])
    with pytest.raises(DatasetFormatError):
        PanopticIO.decode_tensor(payload[:-1])
    with pytest.raises(DatasetFileError):
        PanopticIO.read_tensor(tmp_path / "absent.ptsr")
