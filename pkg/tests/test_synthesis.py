"""Augmentation ops, collision gating, composition, epoch generation."""

import numpy as np
import pytest

from kittimix.curation import (
    BackgroundDatabase, CurationConfig, InstanceDatabase, InstanceRecord,
    build_background_database, build_instance_database, load_image, save_png,
)
from kittimix.errors import (
    CalibrationMismatch, EmptyInstanceDatabase, EmptyPools, PatchTooSmall,
    ShapeMismatch,
)
from kittimix.geometry import CameraProjection, iou2d
from kittimix.kitti_io import format_label_line, parse_label_file, scan_dataset
from kittimix.synthesis import (
    BACKGROUND_TARGET, EPOCH_MANIFEST_HEADER, LABELED_TARGET, MixConfig,
    ORIGIN_HUMAN, ORIGIN_PSEUDO, SIDES, Target, border_cut, collision_test,
    color_pad, compose_mixed_image, derive_sample_seed, generate_epoch,
    mixup_blend, sample_target, _compose_rng, _target_rng,
)
from kittimix.uncertainty import (
    UncertaintyConfig, load_ensemble_predictions, score_frame,
)

from conftest import (
    IMAGE_SIZE, TEST_CALIB, make_box, random_image, save_image,
    synthetic_dataset,
)

AUGS_OFF = MixConfig(p_border_cut=0.0, p_color_pad=0.0,
                     mixup_weight_range=(1.0, 1.0))


class TestSampleSeeds:
    def test_frozen_values(self):
        # Frozen once from the definition; a platform or library change that
        # shifts these would silently fork every downstream sample.
        assert derive_sample_seed(0, 0) == 0xAC72368A586A18C1
        assert derive_sample_seed(7, 3) == 0x111C309FC0CFD2B7

    def test_struct_decode_route_agrees(self):
        import hashlib
        import struct
        for master, index in ((0, 0), (7, 3), (123456789, 41)):
            digest = hashlib.sha256(f"{master}:{index}".encode()).digest()
            assert derive_sample_seed(master, index) == struct.unpack(">Q", digest[:8])[0]

    def test_uint64_range_and_distinctness(self):
        seeds = [derive_sample_seed(5, i) for i in range(200)]
        assert all(0 <= s < 2 ** 64 for s in seeds)
        assert len(set(seeds)) == 200
        assert derive_sample_seed(5, 0) != derive_sample_seed(6, 0)


def checker(h, w):
    patch = np.zeros((h, w, 3), dtype=np.uint8)
    patch[::2, ::2] = 255
    return patch


class TestBorderCut:
    def test_cut_sizes_floor(self):
        patch = np.arange(10 * 7 * 3, dtype=np.uint8).reshape(10, 7, 3)
        np.testing.assert_array_equal(border_cut(patch, 0.25, "left"), patch[:, 1:])
        np.testing.assert_array_equal(border_cut(patch, 0.25, "right"), patch[:, :6])
        np.testing.assert_array_equal(border_cut(patch, 0.25, "top"), patch[2:])
        np.testing.assert_array_equal(border_cut(patch, 0.25, "bottom"), patch[:8])

    def test_ratio_zero_is_identity(self):
        patch = checker(6, 9)
        for side in SIDES:
            np.testing.assert_array_equal(border_cut(patch, 0.0, side), patch)

    def test_max_ratio(self):
        patch = checker(10, 10)
        assert border_cut(patch, 0.3, "left").shape == (10, 7, 3)

    def test_ratio_out_of_range(self):
        patch = checker(4, 4)
        with pytest.raises(ValueError):
            border_cut(patch, -0.01, "left")
        with pytest.raises(ValueError):
            border_cut(patch, 0.31, "left")

    def test_zero_width_patch_rejected(self):
        with pytest.raises(PatchTooSmall):
            border_cut(np.zeros((5, 0, 3), dtype=np.uint8), 0.1, "left")


class TestColorPad:
    def test_strip_painted_rest_untouched(self):
        patch = checker(8, 12)
        color = (10, 20, 30)
        out = color_pad(patch, 0.25, "left", color)
        assert out.shape == patch.shape and out.dtype == patch.dtype
        assert (out[:, :3] == np.array(color, dtype=np.uint8)).all()
        np.testing.assert_array_equal(out[:, 3:], patch[:, 3:])

    def test_each_side(self):
        patch = checker(8, 8)
        color = (9, 9, 9)
        assert (color_pad(patch, 0.25, "right", color)[:, 6:] == 9).all()
        assert (color_pad(patch, 0.25, "top", color)[:2] == 9).all()
        assert (color_pad(patch, 0.25, "bottom", color)[6:] == 9).all()

    def test_ratio_zero_is_identity_and_copy(self):
        patch = checker(5, 5)
        out = color_pad(patch, 0.0, "left", (1, 2, 3))
        np.testing.assert_array_equal(out, patch)
        assert out is not patch


class TestMixupBlend:
    def test_exact_blend(self):
        fg = np.full((4, 4, 3), 200, dtype=np.uint8)
        bg = np.full((4, 4, 3), 100, dtype=np.uint8)
        assert (mixup_blend(fg, bg, 0.6) == 160).all()

    def test_weight_one_is_identity(self):
        rng = np.random.default_rng(51)
        fg = random_image(rng, (12, 9))
        bg = random_image(rng, (12, 9))
        np.testing.assert_array_equal(mixup_blend(fg, bg, 1.0), fg)

    def test_rounding_to_nearest(self):
        fg = np.full((1, 1, 3), 101, dtype=np.uint8)
        bg = np.full((1, 1, 3), 100, dtype=np.uint8)
        assert (mixup_blend(fg, bg, 0.75) == 101).all()
        assert (mixup_blend(fg, bg, 0.25) == 100).all()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mixup_blend(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 3, 3), np.uint8), 0.8)

    def test_dtype_preserved(self):
        fg = np.zeros((2, 2, 3), dtype=np.uint8)
        assert mixup_blend(fg, fg, 0.7).dtype == np.uint8


class TestCollision:
    def test_threshold_inclusive(self):
        # candidate area 6, other area 5, intersection 1: iou exactly 1/10.
        candidate = (0.0, 0.0, 2.0, 3.0)
        other = (1.0, 2.0, 6.0, 3.0)
        assert iou2d(candidate, other) == 0.1
        assert collision_test(candidate, [other], MixConfig())
        worse = (1.0, 1.0, 6.0, 3.0)
        assert iou2d(candidate, worse) > 0.1
        assert not collision_test(candidate, [worse], MixConfig())

    def test_empty_scene_accepts(self):
        assert collision_test((0.0, 0.0, 5.0, 5.0), [], MixConfig())

    def test_all_rects_must_clear(self):
        candidate = (0.0, 0.0, 10.0, 10.0)
        clear = (20.0, 0.0, 30.0, 10.0)
        blocked = (0.0, 0.0, 10.0, 10.0)
        assert not collision_test(candidate, [clear, blocked], MixConfig())


class TestSampleTarget:
    def frames(self, n, prefix):
        return [
            type("Pick", (), {
                "frame_id": f"{prefix}{i:04d}",
                "image_path": f"/img/{prefix}{i}.png",
                "calib": TEST_CALIB,
                "labels": [make_box()] if prefix == "L" else None,
            })()
            for i in range(n)
        ]

    def test_both_pools_empty(self):
        with pytest.raises(EmptyPools):
            sample_target(_target_rng(1), [], [], MixConfig())

    def test_single_pool_takes_all_mass(self):
        labeled = self.frames(3, "L")
        background = self.frames(2, "B")
        for i in range(20):
            rng = _target_rng(derive_sample_seed(0, i))
            assert sample_target(rng, labeled, [], MixConfig()).kind == LABELED_TARGET
            rng = _target_rng(derive_sample_seed(1, i))
            assert sample_target(rng, [], background, MixConfig()).kind == BACKGROUND_TARGET

    def test_degenerate_probabilities(self):
        labeled = self.frames(3, "L")
        background = self.frames(2, "B")
        for i in range(20):
            rng = _target_rng(derive_sample_seed(2, i))
            kind = sample_target(rng, labeled, background, MixConfig(p_background=1.0)).kind
            assert kind == BACKGROUND_TARGET
            rng = _target_rng(derive_sample_seed(3, i))
            kind = sample_target(rng, labeled, background, MixConfig(p_background=0.0)).kind
            assert kind == LABELED_TARGET

    def test_background_frequency(self):
        labeled = self.frames(3, "L")
        background = self.frames(2, "B")
        cfg = MixConfig(p_background=0.42)
        n = 20_000
        hits = sum(
            sample_target(_target_rng(derive_sample_seed(9, i)), labeled,
                          background, cfg).kind == BACKGROUND_TARGET
            for i in range(n)
        )
        assert hits / n == pytest.approx(0.42, abs=0.02)

    def test_uniform_index_coverage(self):
        labeled = self.frames(5, "L")
        seen = {
            sample_target(_target_rng(derive_sample_seed(4, i)), labeled, [],
                          MixConfig()).frame_id
            for i in range(200)
        }
        assert seen == {f"L{i:04d}" for i in range(5)}

    def test_labeled_target_carries_labels(self):
        labeled = self.frames(1, "L")
        target = sample_target(_target_rng(1), labeled, [], MixConfig())
        assert len(target.labels) == 1
        background = self.frames(1, "B")
        target = sample_target(_target_rng(1), [], background, MixConfig())
        assert target.labels == ()


def micro_db(root, specs, calib=TEST_CALIB, patch_seed=50):
    (root / "patches").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(patch_seed)
    records = []
    for record_id, rect in specs:
        x0, y0, x1, y1 = rect
        patch = rng.integers(0, 256, size=(y1 - y0, x1 - x0, 3), dtype=np.uint8)
        rel = f"patches/{record_id}.png"
        save_png(patch, root / rel)
        records.append(InstanceRecord(
            record_id=record_id,
            source_frame_id="SRC001",
            crop_rect=tuple(rect),
            uncertainty=0.05,
            pseudo_label=make_box(score=0.9, bbox2d=tuple(float(v) for v in rect)),
            source_calib=calib,
            patch_relpath=rel,
        ))
    return InstanceDatabase(root=root, records=records)


def make_target(tmp_path, labels=(), kind=LABELED_TARGET, name="T0001", seed=52):
    image = random_image(np.random.default_rng(seed))
    path = tmp_path / f"{name}.png"
    save_image(image, path)
    return Target(kind=kind, frame_id=name, image_path=path,
                  calib=TEST_CALIB, labels=tuple(labels)), image


class TestCompose:
    def test_empty_database(self, tmp_path):
        target, _ = make_target(tmp_path)
        db = InstanceDatabase(root=tmp_path / "db")
        with pytest.raises(EmptyInstanceDatabase):
            compose_mixed_image(target, db, 2, MixConfig(), 1)

    def test_calibration_mismatch(self, tmp_path):
        target, _ = make_target(tmp_path)
        other = CameraProjection(tuple(
            v + (1e-3 if i == 0 else 0.0) for i, v in enumerate(TEST_CALIB.entries)))
        db = micro_db(tmp_path / "db", [("A", (5, 5, 25, 25))], calib=other)
        with pytest.raises(CalibrationMismatch):
            compose_mixed_image(target, db, 1, MixConfig(), 1)

    def test_calibration_tolerance_admits_tiny_noise(self, tmp_path):
        target, _ = make_target(tmp_path)
        close = CameraProjection(tuple(
            v + (1e-9 if i == 0 else 0.0) for i, v in enumerate(TEST_CALIB.entries)))
        db = micro_db(tmp_path / "db", [("A", (5, 5, 25, 25))], calib=close)
        sample = compose_mixed_image(target, db, 1, AUGS_OFF, 1)
        assert sample.pasted_record_ids == ["A"]

    def test_exact_paste_with_augmentations_off(self, tmp_path):
        human = make_box(score=None, bbox2d=(60.0, 10.0, 90.0, 40.0))
        target, image = make_target(tmp_path, labels=[human])
        db = micro_db(tmp_path / "db", [("A", (5, 5, 25, 25))])
        sample = compose_mixed_image(target, db, 2, AUGS_OFF, sample_seed=11)

        # One success, then the record collides with its own paste.
        assert sample.pasted_record_ids == ["A"]
        expected = image.copy()
        expected[5:25, 5:25] = load_image(tmp_path / "db" / "patches" / "A.png")
        np.testing.assert_array_equal(sample.image, expected)

    def test_labels_and_origins(self, tmp_path):
        human = make_box(score=None, bbox2d=(60.0, 10.0, 90.0, 40.0))
        target, _ = make_target(tmp_path, labels=[human])
        db = micro_db(tmp_path / "db", [("A", (5, 5, 25, 25))])
        sample = compose_mixed_image(target, db, 2, AUGS_OFF, sample_seed=11)
        assert sample.labels[0] == (human, ORIGIN_HUMAN)
        assert sample.labels[1] == (db.records[0].pseudo_label, ORIGIN_PSEUDO)
        assert sample.target_frame_id == "T0001"
        assert sample.calib.entries == TEST_CALIB.entries

    def test_collision_with_human_boxes_blocks_paste(self, tmp_path):
        human = make_box(score=None, bbox2d=(60.0, 10.0, 90.0, 40.0))
        target, image = make_target(tmp_path, labels=[human])
        db = micro_db(tmp_path / "db", [("B", (58, 8, 88, 38))])
        sample = compose_mixed_image(target, db, 2, AUGS_OFF, sample_seed=11)
        assert sample.pasted_record_ids == []
        np.testing.assert_array_equal(sample.image, image)
        assert [origin for _, origin in sample.labels] == [ORIGIN_HUMAN]

    def test_two_records_one_blocked(self, tmp_path):
        human = make_box(score=None, bbox2d=(60.0, 10.0, 90.0, 40.0))
        target, image = make_target(tmp_path, labels=[human])
        db = micro_db(tmp_path / "db", [("A", (5, 5, 25, 25)), ("B", (58, 8, 88, 38))])
        sample = compose_mixed_image(target, db, 3, AUGS_OFF, sample_seed=13)
        assert sample.pasted_record_ids == ["A"]

    def test_half_area_loss_boundary(self, tmp_path):
        target, image = make_target(tmp_path)
        # Visible part is exactly half: accepted (the rule rejects only
        # strictly-more-than-half loss).
        db = micro_db(tmp_path / "db", [("H", (-10, 0, 10, 20))])
        sample = compose_mixed_image(target, db, 1, AUGS_OFF, sample_seed=3)
        assert sample.pasted_record_ids == ["H"]
        patch = load_image(tmp_path / "db" / "patches" / "H.png")
        expected = image.copy()
        expected[0:20, 0:10] = patch[:, 10:]
        np.testing.assert_array_equal(sample.image, expected)

    def test_over_half_area_loss_fails(self, tmp_path):
        target, image = make_target(tmp_path)
        db = micro_db(tmp_path / "db", [("J", (-11, 0, 9, 20))])
        sample = compose_mixed_image(target, db, 1, AUGS_OFF, sample_seed=3)
        assert sample.pasted_record_ids == []
        np.testing.assert_array_equal(sample.image, image)

    def test_fully_outside_fails(self, tmp_path):
        target, image = make_target(tmp_path)
        db = micro_db(tmp_path / "db", [("K", (200, 10, 220, 30))])
        sample = compose_mixed_image(target, db, 1, AUGS_OFF, sample_seed=3)
        assert sample.pasted_record_ids == []

    def test_repeat_is_bit_identical(self, tmp_path):
        target, _ = make_target(tmp_path)
        db = micro_db(tmp_path / "db", [
            ("A", (5, 5, 25, 25)), ("B", (30, 30, 60, 55)), ("C", (62, 5, 90, 30))])
        cfg = MixConfig()
        one = compose_mixed_image(target, db, 3, cfg, sample_seed=77)
        two = compose_mixed_image(target, db, 3, cfg, sample_seed=77)
        np.testing.assert_array_equal(one.image, two.image)
        assert one.pasted_record_ids == two.pasted_record_ids
        assert one.labels == two.labels

    def test_draw_order_contract(self, tmp_path):
        # Replay the documented per-sample draw order by hand and demand the
        # same pixels. Single-record database so the candidate index is 0.
        target, image = make_target(tmp_path)
        rect = (20, 10, 44, 42)
        db = micro_db(tmp_path / "db", [("A", rect)])
        cfg = MixConfig(p_border_cut=1.0, p_color_pad=1.0,
                        border_cut_ratio_range=(0.25, 0.25))
        seed = 99
        sample = compose_mixed_image(target, db, 1, cfg, sample_seed=seed)

        rng = _compose_rng(seed)
        assert int(rng.integers(1)) == 0
        patch = load_image(tmp_path / "db" / "patches" / "A.png")
        px0, py0, px1, py1 = rect
        assert rng.random() < 1.0
        side = SIDES[int(rng.integers(len(SIDES)))]
        ratio = float(rng.uniform(0.25, 0.25))
        before = patch.shape
        patch = border_cut(patch, ratio, side)
        if side == "left":
            px0 += before[1] - patch.shape[1]
        elif side == "right":
            px1 -= before[1] - patch.shape[1]
        elif side == "top":
            py0 += before[0] - patch.shape[0]
        else:
            py1 -= before[0] - patch.shape[0]
        assert rng.random() < 1.0
        side2 = SIDES[int(rng.integers(len(SIDES)))]
        ratio2 = float(rng.uniform(0.25, 0.25))
        color = rng.integers(0, 256, size=3)
        patch = color_pad(patch, ratio2, side2, color)
        weight = float(rng.uniform(0.6, 1.0))
        expected = image.copy()
        expected[py0:py1, px0:px1] = mixup_blend(patch, expected[py0:py1, px0:px1], weight)

        np.testing.assert_array_equal(sample.image, expected)
        assert sample.pasted_record_ids == ["A"]


def epoch_inputs(ds):
    manifest = scan_dataset(ds.label_dir, ds.unlabeled_image_dir,
                            ds.labeled_image_dir, ds.calib_dir)
    ucfg = UncertaintyConfig()
    preds = {f.frame_id: load_ensemble_predictions(f.frame_id, ds.model_dirs)
             for f in manifest.unlabeled}
    scored = {fid: score_frame(p, ucfg) for fid, p in preds.items()}
    instances = build_instance_database(
        manifest, scored, CurationConfig(), ds.root / "instances")
    backgrounds = build_background_database(manifest, preds, ds.root / "backgrounds")
    return manifest, instances, backgrounds


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestGenerateEpoch:
    def test_outputs_and_manifest(self, synthetic_dataset):
        ds = synthetic_dataset
        manifest, instances, backgrounds = epoch_inputs(ds)
        out = ds.root / "epoch"
        entries = generate_epoch(manifest, instances, backgrounds,
                                 MixConfig(master_seed=5), 10, out)
        assert [e.sample_id for e in entries] == [f"{i:06d}" for i in range(10)]
        for sub in ("images", "labels", "origins"):
            assert len(list((out / sub).iterdir())) == 10

        lines = (out / "epoch_manifest.txt").read_text().splitlines()
        assert lines[0] == EPOCH_MANIFEST_HEADER
        assert lines[1] == "master_seed\t5"
        assert lines[2] == "count\t10"
        for entry, line in zip(entries, lines[3:]):
            fields = line.split("\t")
            assert fields[0] == entry.sample_id
            assert int(fields[1]) == entry.sample_seed
            assert fields[2] == entry.target_kind
            assert fields[3] == entry.target_frame_id
            assert int(fields[4]) == entry.k_paste
            expected = ",".join(entry.pasted_record_ids) if entry.pasted_record_ids else "-"
            assert fields[5] == expected

    def test_sample_files_consistent_with_entries(self, synthetic_dataset):
        ds = synthetic_dataset
        manifest, instances, backgrounds = epoch_inputs(ds)
        out = ds.root / "epoch"
        entries = generate_epoch(manifest, instances, backgrounds,
                                 MixConfig(master_seed=5), 8, out)
        by_id = {r.record_id: r for r in instances.records}
        for entry in entries:
            assert 2 <= entry.k_paste <= 6
            assert len(entry.pasted_record_ids) <= entry.k_paste
            origins = (out / "origins" / f"{entry.sample_id}.txt").read_text().split()
            boxes = parse_label_file(out / "labels" / f"{entry.sample_id}.txt")
            assert len(origins) == len(boxes)
            n_pseudo = sum(1 for o in origins if o == ORIGIN_PSEUDO)
            assert n_pseudo == len(entry.pasted_record_ids)
            pseudo_boxes = [b for b, o in zip(boxes, origins) if o == ORIGIN_PSEUDO]
            for box, rid in zip(pseudo_boxes, entry.pasted_record_ids):
                source = by_id[rid].pseudo_label
                assert format_label_line(box) == format_label_line(source)

    def test_epoch_repeats_bit_identical(self, synthetic_dataset):
        ds = synthetic_dataset
        manifest, instances, backgrounds = epoch_inputs(ds)
        cfg = MixConfig(master_seed=21)
        generate_epoch(manifest, instances, backgrounds, cfg, 12, ds.root / "e1")
        generate_epoch(manifest, instances, backgrounds, cfg, 12, ds.root / "e2")
        assert tree_bytes(ds.root / "e1") == tree_bytes(ds.root / "e2")

    def test_worker_count_does_not_change_bytes(self, synthetic_dataset):
        ds = synthetic_dataset
        manifest, instances, backgrounds = epoch_inputs(ds)
        cfg = MixConfig(master_seed=22)
        generate_epoch(manifest, instances, backgrounds, cfg, 12, ds.root / "w1", workers=1)
        generate_epoch(manifest, instances, backgrounds, cfg, 12, ds.root / "w8", workers=8)
        assert tree_bytes(ds.root / "w1") == tree_bytes(ds.root / "w8")

    def test_master_seed_changes_output(self, synthetic_dataset):
        ds = synthetic_dataset
        manifest, instances, backgrounds = epoch_inputs(ds)
        generate_epoch(manifest, instances, backgrounds,
                       MixConfig(master_seed=1), 6, ds.root / "s1")
        generate_epoch(manifest, instances, backgrounds,
                       MixConfig(master_seed=2), 6, ds.root / "s2")
        assert tree_bytes(ds.root / "s1") != tree_bytes(ds.root / "s2")

    def test_empty_pools_propagates(self, synthetic_dataset, tmp_path):
        ds = synthetic_dataset
        manifest, instances, _ = epoch_inputs(ds)
        manifest.labeled = []
        empty_bg = BackgroundDatabase(root=tmp_path / "none")
        with pytest.raises(EmptyPools):
            generate_epoch(manifest, instances, empty_bg, MixConfig(), 2, tmp_path / "e")
