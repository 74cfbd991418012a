import hashlib
import shutil
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from PIL import Image

from conftest import FIXTURES
from oass.config import SynthConfig
from oass.data import (VOC_CLASSES, AnnotationError, BBoxAnnotation, PlacementError, Sample, VocDataset,
                       augment, box_shifts, fit_canvas, hflip, load_voc_annotations, mean_abs_shift,
                       parse_voc_annotation, placement_variance, prepare_eval, read_dataset,
                       resize_sample, shift_statistics, synth_dataset, to_batch, to_voc_xml,
                       write_dataset, write_shift_csv)

VOC = FIXTURES / "voc"
AERO, CAT, DOG, PERSON, TV = (VOC_CLASSES.index(n) for n in ("aeroplane", "cat", "dog", "person", "tvmonitor"))

# hand-extracted from the fixture XMLs: (class, xmin, xmax, ymin, ymax, difficult)
TRUTH = {
    "2008_000001": ((64, 48), [(DOG, 4, 28, 10, 40, False), (PERSON, 40, 62, 2, 46, True)]),
    "2008_000002": ((48, 64), [(AERO, 24, 44, 8, 20, False), (AERO, 2, 14, 30, 60, False),
                               (TV, 16, 32, 24, 40, False)]),
    "2008_000003": ((64, 64), [(CAT, 16, 48, 16, 48, False)]),
}


# ------------------------------------------------------------------ VOC

def test_fixture_annotations_match_hand_truth():
    records = load_voc_annotations(VOC, "train")
    assert [r[0] for r in records] == list(TRUTH)
    for img_id, labels, boxes in records:
        dims, truth = TRUTH[img_id]
        assert [(b.class_id, b.x_l, b.x_h, b.y_l, b.y_h, b.difficult) for b in boxes] == truth
        assert all(b.image_dims == dims for b in boxes)
        assert np.flatnonzero(labels).tolist() == sorted({t[0] for t in truth})


def test_difficult_excluded_on_request():
    records = load_voc_annotations(VOC, "train", include_difficult=False)
    labels, boxes = records[0][1], records[0][2]
    assert [b.class_id for b in boxes] == [DOG] and labels[PERSON] == 0


def test_xml_round_trip():
    for img_id, (dims, _) in TRUTH.items():
        labels, boxes = parse_voc_annotation((VOC / "Annotations" / f"{img_id}.xml").read_text())
        labels2, boxes2 = parse_voc_annotation(to_voc_xml(boxes, dims, f"{img_id}.jpg"))
        assert boxes2 == boxes and np.array_equal(labels, labels2)


@pytest.mark.parametrize("xml,where", [
    ("<annotation><object/></annotation>", "/annotation/size"),
    ("<annotation><size><width>10</width><height>10</height></size>"
     "<object><name>dog</name></object></annotation>", "/annotation/object[0]/bndbox"),
    ("<annotation><size><width>10</width><height>10</height></size>"
     "<object><name>unicorn</name></object></annotation>", "unicorn"),
    ("<annotation><size><width>10</width><height>x</height></size></annotation>", "/annotation/size/height"),
    ("<annotation><size><width>10</width><height>10</height></size><object><name>dog</name>"
     "<bndbox><xmin>5</xmin><xmax>4</xmax><ymin>1</ymin><ymax>2</ymax></bndbox></object></annotation>",
     "/annotation/object[0]/bndbox"),
    ("<annotation><size>", "malformed"),
])
def test_malformed_annotations_name_the_element(xml, where):
    with pytest.raises(AnnotationError, match=where.replace("[", r"\[").replace("]", r"\]")):
        parse_voc_annotation(xml)


def test_missing_split_and_annotation():
    with pytest.raises(AnnotationError):
        load_voc_annotations(VOC, "nosuchsplit")
    with pytest.raises(AnnotationError, match="2008_000404"):
        load_voc_annotations(VOC, "broken")


def test_voc_dataset_loads_images(tmp_path):
    root = tmp_path / "voc"
    shutil.copytree(VOC, root)
    (root / "JPEGImages").mkdir()
    for img_id, ((w, h), _) in TRUTH.items():
        Image.new("RGB", (w, h), (255, 0, 0)).save(root / "JPEGImages" / f"{img_id}.jpg")
    ds = VocDataset(root, "train")
    assert len(ds) == 3
    s = ds[1]
    assert s.image.shape == (3, 64, 48) and s.image.dtype == np.float32
    assert s.image[0].mean() > 0.9 and s.labels[AERO] == 1


# ------------------------------------------------------------ shifts

def test_shift_hand_cases():
    centred = BBoxAnnotation(0, 200, 312, 100, 412, (512, 512))
    assert box_shifts([centred])[0] == [(0.0, 0.0)]
    assert box_shifts([BBoxAnnotation(0, 100, 300, 0, 10, (512, 512))])[0][0][0] == -56


def test_shift_statistics_on_fixtures():
    boxes = [r[2] for r in load_voc_annotations(VOC, "train")]
    stats = shift_statistics(boxes, 512)
    assert sorted(stats.per_class) == sorted([AERO, CAT, DOG, PERSON, TV])
    assert stats.per_class[DOG][0] == -128 and stats.per_class[PERSON][0] == 152
    mean, var = stats.per_class[AERO][0], stats.per_class[AERO][1]
    # centres 34 and 8 in a 48-wide image: dx = 10 * 512/48 and -16 * 512/48
    assert mean == pytest.approx(-32, abs=1e-9)
    assert var == pytest.approx(float(Fraction(416, 3) ** 2), rel=1e-12)
    assert stats.per_class[AERO][4] == 2
    # y centres 14 and 45 in a 64-tall image
    assert stats.per_class[AERO][2] == pytest.approx(((14 - 32) + (45 - 32)) / 2 * 8, abs=1e-9)
    assert mean_abs_shift(boxes) == pytest.approx((128 + 152 + 416 / 3) / 5)
    assert PERSON not in shift_statistics(boxes, 512, include_difficult=False).per_class


def test_shift_csv(tmp_path):
    stats = shift_statistics([[BBoxAnnotation(1, 100, 300, 0, 10, (512, 512))]])
    write_shift_csv(stats, tmp_path / "s.csv", ["a", "b"])
    assert (tmp_path / "s.csv").read_text().splitlines()[1].startswith("1,b,-56.000000,0.000000")


# ------------------------------------------------------- augmentation

def _sample(w=40, h=30):
    img = np.random.default_rng(0).random((3, h, w)).astype(np.float32)
    boxes = [BBoxAnnotation(0, 2, 10, 3, 9, (w, h)), BBoxAnnotation(2, 25, 38, 10, 28, (w, h))]
    return Sample(img, np.array([1, 0, 1], dtype=np.uint8), boxes, "s")


def test_hflip_involution():
    s = _sample()
    f = hflip(s)
    assert f.boxes[0].x_l == 30 and f.boxes[0].x_h == 38 and f.meta["flipped"]
    back = hflip(f)
    assert np.array_equal(back.image, s.image) and back.boxes == s.boxes and not back.meta["flipped"]


def test_resize_scales_boxes():
    s = resize_sample(_sample(), 80, 60)
    assert s.image.shape == (3, 60, 80) and s.boxes[1] == BBoxAnnotation(2, 50, 76, 20, 56, (80, 60))


def test_fit_canvas_pad_and_crop():
    s = fit_canvas(_sample(), 48)
    assert s.image.shape == (3, 48, 48) and float(np.abs(s.image[:, 30:]).sum()) == 0 and "crop" not in s.meta
    c = fit_canvas(_sample(), 20)
    assert c.meta["crop"] == (10, 5, 30, 25)
    # the left box lies entirely outside the crop, so its label is dropped
    assert [b.class_id for b in c.boxes] == [2] and c.labels.tolist() == [0, 0, 1]
    assert c.boxes[0] == BBoxAnnotation(2, 15, 20, 5, 20, (20, 20))


def test_augment_sweep_keeps_boxes_valid(rng):
    s = _sample(64, 48)
    for _ in range(200):
        a = augment(s, rng, 32, (16, 64))
        assert a.image.shape == (3, 32, 32)
        for b in a.boxes:
            assert 0 <= b.x_l < b.x_h <= 32 and 0 <= b.y_l < b.y_h <= 32
        assert a.labels.tolist() == [int(c in {b.class_id for b in a.boxes}) for c in range(3)]


def test_prepare_eval():
    s = prepare_eval(_sample(40, 30), 64)
    assert s.image.shape == (3, 64, 64) and s.boxes[1].image_dims == (64, 64)
    same = _sample(64, 64)
    assert prepare_eval(same, 64) is same


# ------------------------------------------------------------ synthetic

SMALL = SynthConfig(num_images=40, image_size=64, min_half_size=4, max_half_size=8, min_offset=8, max_offset=20)


def test_synth_deterministic_bitwise():
    a, b = synth_dataset(SMALL, 7), synth_dataset(SMALL, 7)
    assert all(x.image.tobytes() == y.image.tobytes() and x.boxes == y.boxes for x, y in zip(a, b))
    c = synth_dataset(SMALL, 8)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_synth_samples_well_formed():
    for s in synth_dataset(SMALL, 1):
        assert s.image.shape == (3, 64, 64) and s.image.min() >= 0 and s.image.max() <= 1
        assert 1 <= len(s.boxes) <= 3
        assert s.labels.tolist() == [int(c in {b.class_id for b in s.boxes}) for c in range(5)]
        for b in s.boxes:
            cx, cy = b.center
            assert SMALL.min_offset <= abs(cx - 32) <= SMALL.max_offset
            assert SMALL.min_offset <= abs(cy - 32) <= SMALL.max_offset


def test_synth_variance_matches_generator():
    cfg = SynthConfig()
    stats = shift_statistics(synth_dataset(cfg, 0), target_size=512)
    expect = placement_variance(cfg, 512)
    assert expect == pytest.approx(float(np.mean(np.arange(20, 47) ** 2)) * 16)
    for c, (_, var_dx, _, var_dy, n) in stats.per_class.items():
        assert abs(var_dx - expect) <= 0.1 * expect, (c, var_dx, expect, n)
        assert abs(var_dy - expect) <= 0.1 * expect


@pytest.mark.parametrize("bad", [dict(image_size=63), dict(min_objects=0), dict(max_offset=60),
                                 dict(min_half_size=1), dict(min_offset=30, max_offset=20)])
def test_synth_rejects_bad_config(bad):
    with pytest.raises(PlacementError):
        synth_dataset(replace(SMALL, **bad), 0)


def test_synth_placement_failure():
    crowded = replace(SMALL, min_objects=3, max_objects=3, min_offset=0, max_offset=1, max_tries=3)
    with pytest.raises(PlacementError, match="could not place"):
        synth_dataset(crowded, 0)


def test_write_read_round_trip(tmp_path):
    samples = synth_dataset(replace(SMALL, num_images=5), 3)
    write_dataset(samples, tmp_path, 5)
    back = read_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert a.id == b.id and a.boxes == b.boxes and np.array_equal(a.labels, b.labels)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6
    digest = hashlib.sha256((tmp_path / "manifest.jsonl").read_bytes()).hexdigest()
    write_dataset(samples, tmp_path / "again", 5)
    assert hashlib.sha256((tmp_path / "again" / "manifest.jsonl").read_bytes()).hexdigest() == digest
    images, labels = to_batch(back)
    assert images.shape == (5, 3, 64, 64) and labels.shape == (5, 5)


def test_read_dataset_errors(tmp_path):
    with pytest.raises(AnnotationError):
        read_dataset(tmp_path)
    (tmp_path / "manifest.jsonl").write_text('{"id": "x"}\n')
    with pytest.raises(AnnotationError, match="line 1"):
        read_dataset(tmp_path)


def test_augment_boxes_consistent_with_pixels(rng):
    img = np.zeros((3, 96, 128), dtype=np.float32)
    img[:, 20:50, 70:110] = 1.0
    s = Sample(img, np.array([1], dtype=np.uint8), [BBoxAnnotation(0, 70, 110, 20, 50, (128, 96))], "sq")
    for _ in range(500):
        a = augment(s, rng, 512, (320, 640))
        assert a.image.shape == (3, 512, 512) and a.dims[0] % 2 == 0
        if not a.boxes:
            continue
        b = a.boxes[0]
        assert 0 <= b.x_l < b.x_h <= 512 and 0 <= b.y_l < b.y_h <= 512
        # bilinear resampling blurs edges by about one source pixel (up to 5 output pixels)
        inner = a.image[0, b.y_l + 5:b.y_h - 5, b.x_l + 5:b.x_h - 5]
        assert inner.size == 0 or inner.min() > 0.99
        outside = a.image[0].copy()
        outside[max(b.y_l - 5, 0):b.y_h + 5, max(b.x_l - 5, 0):b.x_h + 5] = 0
        assert outside.max() < 0.01
