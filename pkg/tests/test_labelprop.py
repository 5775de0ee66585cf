import json

import numpy as np
import pytest

from semtex import synthetic
from semtex.atlas import UNLABELED
from semtex.camera import CameraFrame
from semtex.labelprop import (
    InconsistencyReport,
    PropagationParams,
    PseudoGroundTruth,
    emit_training_manifest,
    inconsistency,
    propagation_round,
    read_label_png,
    read_training_manifest,
    render_pseudo_gt,
    select_frames,
)
from semtex.semantic import SegmentationResult, fuse_frames
from semtex.sparse import SparseSemanticTexture

from conftest import exact_frames


def pgt_of(labels, frame=0, p_min=0.8):
    labels = np.asarray(labels, dtype=np.uint8)
    return PseudoGroundTruth(labels, frame, p_min, np.zeros(labels.shape, dtype=np.int64))


def reports_from(gammas):
    return [InconsistencyReport(i, float(g), 0.5, 100) for i, g in enumerate(gammas)]


class TestRenderPseudoGT:
    def test_confidence_gate(self, room_table, room_camera, room_poses):
        store = SparseSemanticTexture(256, 5)
        pgt = render_pseudo_gt(room_table, store, room_camera, room_poses[0])
        visible = pgt.texels >= 0
        t = np.unique(pgt.texels[visible])
        half = len(t) // 2
        store.observe(t[:half], np.full(half, 2), np.ones(half), np.full(half, 0.95))
        store.observe(t[half:], np.full(len(t) - half, 3), np.ones(len(t) - half), np.full(len(t) - half, 0.5))
        pgt = render_pseudo_gt(room_table, store, room_camera, room_poses[0], p_min=0.8)
        confident = np.isin(pgt.texels, t[:half])
        assert np.all(pgt.labels[confident] == 2)
        assert np.all(pgt.labels[~confident] == UNLABELED)

    def test_matches_analytic_labels(self, room, room_table, room_camera, room_poses, room_gt):
        store = SparseSemanticTexture(256, 5)
        fuse_frames(store, room_table, exact_frames(room, room_camera, room_poses, room_gt))
        agree, covered = 0, 0
        for pose, gt in zip(room_poses, room_gt):
            pgt = render_pseudo_gt(room_table, store, room_camera, pose, p_min=0.8)
            m = gt != UNLABELED
            agree += int((pgt.labels[m] == gt[m]).sum())
            covered += int(m.sum())
        assert agree / covered >= 0.99

    def test_bad_p_min(self, room_table, room_camera, room_poses):
        with pytest.raises(ValueError):
            render_pseudo_gt(room_table, SparseSemanticTexture(256, 5), room_camera, room_poses[0], p_min=1.5)


class TestInconsistency:
    def test_perfect_agreement(self):
        seg = SegmentationResult(np.array([[1, 2], [3, 4]]), np.full((2, 2), 0.9))
        r = inconsistency(seg, pgt_of([[1, 2], [3, 4]]))
        assert r.gamma == 0.0 and r.consistent_fraction == 1.0

    def test_weighted_sum(self):
        seg = SegmentationResult(np.array([[1, 2], [3, 4]]), np.array([[0.9, 0.5], [0.7, 0.3]]))
        r = inconsistency(seg, pgt_of([[0, 0], [3, UNLABELED]]))
        assert r.gamma == pytest.approx(1.4)
        assert r.evaluated_pixels == 3
        assert r.consistent_fraction == pytest.approx(1 / 3)

    def test_all_unlabeled(self):
        seg = SegmentationResult(np.zeros((2, 2), dtype=int), np.ones((2, 2)))
        r = inconsistency(seg, pgt_of(np.full((2, 2), UNLABELED)))
        assert r.gamma == 0.0 and r.evaluated_pixels == 0 and r.consistent_fraction is None
        assert r.inconsistent_fraction is None

    def test_size_mismatch(self):
        seg = SegmentationResult(np.zeros((2, 3), dtype=int), np.ones((2, 3)))
        with pytest.raises(ValueError):
            inconsistency(seg, pgt_of(np.zeros((2, 2))))

    def test_zero_gamma_iff_consistent(self, rng):
        for _ in range(20):
            lab = rng.integers(0, 3, size=(5, 5))
            pg = np.where(rng.random((5, 5)) < 0.8, lab, rng.integers(0, 3, size=(5, 5)))
            r = inconsistency(SegmentationResult(lab, rng.uniform(0.1, 1.0, size=(5, 5))), pgt_of(pg))
            assert (r.gamma == 0.0) == (r.consistent_fraction == 1.0)


class TestSelectFrames:
    def test_default_fraction_and_spacing(self, rng):
        sel = select_frames(reports_from(rng.random(100)), 0.05, 10)
        assert len(sel) <= 5
        assert all(abs(a - b) >= 10 for i, a in enumerate(sel) for b in sel[i + 1 :])

    def test_descending_gammas(self):
        sel = select_frames(reports_from(np.arange(100, 0, -1)), 0.05, 10)
        assert sel == [0, 10, 20, 30, 40]

    def test_best_mode_all_consistent(self):
        reps = [InconsistencyReport(i, 0.0, 1.0, 50) for i in range(30)]
        assert select_frames(reps, 0.1, mode="best") == []

    def test_best_mode_prefers_small_gamma(self):
        reps = [InconsistencyReport(i, float(i), 1.0 - 0.01 * (i + 3), 100) for i in range(40)]
        sel = select_frames(reps, 0.1, 10, mode="best")
        assert sel == [0, 10, 20, 30]

    def test_spacing_always_holds(self, rng):
        for _ in range(30):
            n = int(rng.integers(5, 80))
            spacing = int(rng.integers(1, 15))
            sel = select_frames(reports_from(rng.random(n)), float(rng.uniform(0.05, 1.0)), spacing)
            assert all(abs(a - b) >= spacing for i, a in enumerate(sel) for b in sel[i + 1 :])

    def test_errors(self):
        with pytest.raises(ValueError):
            select_frames([], 0.5)
        with pytest.raises(ValueError):
            select_frames(reports_from([1.0]), 0.0)
        with pytest.raises(ValueError):
            select_frames(reports_from([1.0]), 0.5, mode="random")


class TestManifest:
    def make(self, tmp_path, name, rng):
        pg = {i: pgt_of(rng.integers(0, 4, size=(6, 8)), frame=i) for i in range(0, 50, 10)}
        rgb = {i: f"rgb/{i:06d}.png" for i in pg}
        return emit_training_manifest(list(pg), pg, rgb, tmp_path / name, iteration=2, palette={0: (1, 2, 3)}), pg

    def test_entries_and_labels(self, tmp_path, rng):
        path, pg = self.make(tmp_path, "a", rng)
        header, pairs = read_training_manifest(path)
        assert header["frames"] == 5 and header["iteration"] == 2 and header["ignore_label"] == UNLABELED
        assert header["p_min"] == 0.8
        assert len(pairs) == 5
        assert len(list((tmp_path / "a" / "labels").glob("*.png"))) == 5
        for (rgb, lab), fid in zip(pairs, pg):
            assert rgb == f"rgb/{fid:06d}.png"
            np.testing.assert_array_equal(read_label_png(path.parent / lab), pg[fid].labels)

    def test_deterministic(self, tmp_path):
        a, _ = self.make(tmp_path, "a", np.random.default_rng(5))
        b, _ = self.make(tmp_path, "b", np.random.default_rng(5))
        assert a.read_bytes() == b.read_bytes()
        for p in sorted((tmp_path / "a" / "labels").iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / "labels" / p.name).read_bytes()

    def test_header_is_json(self, tmp_path, rng):
        path, _ = self.make(tmp_path, "a", rng)
        first = path.read_text().splitlines()[0]
        assert json.loads(first)["training_mix"]

    def test_missing_pseudo_gt(self, tmp_path):
        with pytest.raises(KeyError):
            emit_training_manifest([3], {}, {3: "x.png"}, tmp_path)


def planted_frames(room, model, poses, gts, corrupted, rng):
    frames = []
    for i, (pose, gt) in enumerate(zip(poses, gts)):
        lab, conf = synthetic.noisy_segmentation(gt, 5, 0.05, rng, confidence=(0.9, 1.0))
        if i in corrupted:
            lab = ((lab.astype(np.int64) + 1 + i % 4) % 5).astype(np.uint16)
            conf = np.full(gt.shape, 0.9, dtype=np.float32)
        frames.append(CameraFrame(i, model, pose, segmentation=SegmentationResult(lab, conf)))
    return frames


class TestPropagationRound:
    def test_planted_corruption(self, tmp_path, room, room_table, room_camera, room_poses, room_gt):
        corrupted = {3, 9, 15, 17}
        frames = planted_frames(room, room_camera, room_poses, room_gt, corrupted, np.random.default_rng(0))
        params = PropagationParams(fraction=0.2, min_spacing=1)
        report, store = propagation_round(room_table, frames, 5, tmp_path / "r1", params)
        top = sorted(report.reports, key=lambda r: -r.gamma)[: len(corrupted)]
        assert {r.frame for r in top} == corrupted
        assert set(report.selection) == corrupted
        assert report.checkpoint.exists() and report.manifest.exists()

        # round two: predictions replaced by the pseudo ground truth
        pg = {}
        for fr in frames:
            pgt = render_pseudo_gt(room_table, store, fr.model, fr.pose, params.p_min, fr.id)
            pg[fr.id] = pgt
        frames2 = []
        for fr in frames:
            lab = pg[fr.id].labels
            seg = SegmentationResult(np.where(lab == UNLABELED, fr.segmentation.labels, lab), fr.segmentation.confidence)
            frames2.append(CameraFrame(fr.id, fr.model, fr.pose, segmentation=seg))
        report2, _ = propagation_round(room_table, frames2, 5, tmp_path / "r2", params, iteration=2)
        assert report2.mean_gamma < report.mean_gamma

    def test_refusion_from_empty_store(self, tmp_path, room, room_table, room_camera, room_poses, room_gt):
        frames = exact_frames(room, room_camera, room_poses[:5], room_gt)
        _, a = propagation_round(room_table, frames, 5, tmp_path / "a")
        _, b = propagation_round(room_table, frames, 5, tmp_path / "b")
        np.testing.assert_array_equal(a.dense_snapshot(), b.dense_snapshot())
        assert (tmp_path / "a" / "semantic.sstx").read_bytes() == (tmp_path / "b" / "semantic.sstx").read_bytes()

    def test_zero_frames(self, tmp_path, room_table):
        with pytest.raises(ValueError):
            propagation_round(room_table, [], 5, tmp_path)
