import numpy as np
import pytest

from semtex import synthetic
from semtex.atlas import TexturedMesh, build_texel_table
from semtex.camera import CameraFrame, CameraModel, render_depth
from semtex.color import ColorTexture, color_weight, fuse_color_frame
from semtex.semantic import (
    FusionParams,
    SegmentationResult,
    argmax_reduce,
    distance_weight,
    fuse_frames,
    fuse_semantic_frame,
    observe,
)
from semtex.sparse import SparseSemanticTexture


def floor_quad(half=1.0, res=64):
    """Square on z = 0 with +z normals and UVs covering the unit square."""
    v = np.array([[-half, -half, 0.0], [half, -half, 0.0], [half, half, 0.0], [-half, half, 0.0]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    mesh = TexturedMesh(v, uv, np.array([[0, 1, 2], [0, 2, 3]]))
    return build_texel_table(mesh, res)


def overhead(height):
    return synthetic.look_at((0.0, 0.0, height), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))


def uniform_seg(model, label, conf):
    shape = (model.height, model.width)
    return SegmentationResult(np.full(shape, label, dtype=np.uint16), np.full(shape, conf, dtype=np.float32))


class TestArgmaxReduce:
    def test_single_pixel(self):
        r = argmax_reduce(np.array([[[0.1, 0.7, 0.2]]]))
        assert r.labels[0, 0] == 1
        assert r.confidence[0, 0] == pytest.approx(0.7)

    def test_tie(self):
        r = argmax_reduce(np.array([[[0.5, 0.5]]]))
        assert r.labels[0, 0] == 0 and r.confidence[0, 0] == pytest.approx(0.5)

    def test_matches_scan(self, rng):
        p = rng.random((8, 8, 5))
        r = argmax_reduce(p)
        for y in range(8):
            for x in range(8):
                best = 0
                for c in range(1, 5):
                    if p[y, x, c] > p[y, x, best]:
                        best = c
                assert r.labels[y, x] == best
                assert r.confidence[y, x] == np.float32(p[y, x, best])


class TestDistanceWeight:
    @pytest.mark.parametrize("d,w", [(30.0, 1.0), (100.0, 0.0), (65.0, 0.5), (10.0, 1.0), (150.0, 0.0)])
    def test_examples(self, d, w):
        assert distance_weight(d, 30.0, 100.0) == pytest.approx(w)

    def test_vectorised(self):
        np.testing.assert_allclose(distance_weight(np.array([0.0, 50.0, 100.0])), [1.0, 0.5, 0.0])

    def test_params_checked(self):
        with pytest.raises(ValueError):
            FusionParams(d_min=5.0, d_max=5.0)


class TestObserve:
    def test_overhead_quad_all_visible(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        obs = observe(t, model, overhead(3.0))
        assert obs.unoccluded.all()
        np.testing.assert_allclose(obs.depth, 3.0, atol=1e-5)
        # border texels whose nearest pixel misses the quad are not sampled
        x, y = obs.pixels(~obs.visible)
        assert np.all(obs.depth_map.face[y, x] < 0)
        x, y = obs.pixels(obs.visible)
        assert np.all(obs.depth_map.face[y, x] >= 0)

    def test_occluder_hides_everything(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        pose = overhead(3.0)
        mesh = t.mesh
        lid = np.array([[-5.0, -5.0, 1.0], [5.0, -5.0, 1.0], [5.0, 5.0, 1.0], [-5.0, 5.0, 1.0]])
        v = np.concatenate([mesh.positions, lid])
        f = np.concatenate([mesh.faces, np.array([[0, 1, 2], [0, 2, 3]]) + 4])
        obs = observe(t, model, pose, depth_map=render_depth(v, f, model, pose))
        assert obs.n_visible == 0 and obs.n_occluded == len(t)

        s = SparseSemanticTexture(64, 3, 64)
        stats = fuse_semantic_frame(s, t, model, pose, uniform_seg(model, 1, 0.9), obs=obs)
        assert stats.touched == 0
        assert s.committed_pages == 0 and not s.weight.any()

    def test_out_of_view(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        pose = synthetic.look_at((0.0, 0.0, 3.0), (0.0, 0.0, 6.0), up=(0.0, 1.0, 0.0))
        obs = observe(t, model, pose)
        assert obs.n_visible == 0 and obs.n_occluded == 0

    def test_room_pixels_agree_with_render(self, room_table, room_camera, room_poses):
        obs = observe(room_table, room_camera, room_poses[0])
        x, y = obs.pixels(obs.visible)
        dm = obs.depth_map
        # a visible texel's depth matches the rendered depth at its pixel up to a pixel's slope
        d = dm.depth[y, x]
        assert np.median(np.abs(d - obs.depth[obs.visible]) / d) < 0.01


class TestFuseSemantic:
    def test_single_frame_identity(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        s = SparseSemanticTexture(64, 8, 64)
        fuse_semantic_frame(s, t, model, overhead(3.0), uniform_seg(model, 3, 0.9))
        sampled = t.texel[observe(t, model, overhead(3.0)).visible]
        W = s.weight.ravel()[sampled]
        np.testing.assert_allclose(W, distance_weight(3.0), rtol=1e-6)
        np.testing.assert_allclose(s.gather(sampled, 3) / W, 0.9, rtol=1e-6)
        assert s.weight.sum() == pytest.approx(W.sum())

    def test_two_frames(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        s = SparseSemanticTexture(64, 8, 64)
        params = FusionParams(d_min=10.0, d_max=20.0)  # full weight at 3 m
        fuse_semantic_frame(s, t, model, overhead(3.0), uniform_seg(model, 3, 0.9), params)
        fuse_semantic_frame(s, t, model, overhead(3.0), uniform_seg(model, 5, 0.8), params)
        sampled = t.texel[observe(t, model, overhead(3.0)).visible]
        np.testing.assert_allclose(s.weight.ravel()[sampled], 2.0)
        labels, probs = s.fused_planes()
        assert np.all(labels.ravel()[sampled] == 3)
        np.testing.assert_allclose(probs.ravel()[sampled], 0.45, rtol=1e-6)
        np.testing.assert_allclose(s.gather(sampled, 5) / 2.0, 0.40, rtol=1e-6)

    def test_reads_nearest_pixel(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        pose = overhead(3.0)
        seg = uniform_seg(model, 0, 1.0)
        seg.labels[:, 32:] = 1
        s = SparseSemanticTexture(64, 2, 64)
        fuse_semantic_frame(s, t, model, pose, seg)
        obs = observe(t, model, pose)
        x, _ = obs.pixels(obs.visible)
        labels, _ = s.fused_planes()
        np.testing.assert_array_equal(labels.ravel()[t.texel[obs.visible]], (x >= 32).astype(np.uint8))

    def test_size_mismatch(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        s = SparseSemanticTexture(64, 2, 64)
        with pytest.raises(ValueError):
            fuse_semantic_frame(s, t, model, overhead(3.0), uniform_seg(CameraModel(1, 1, 0, 0, 8, 8), 0, 1.0))

    def test_fuse_frames_requires_segmentation(self):
        t = floor_quad()
        model = CameraModel(40, 40, 31.5, 31.5, 64, 64)
        s = SparseSemanticTexture(64, 2, 64)
        with pytest.raises(ValueError, match="no segmentation"):
            fuse_frames(s, t, [CameraFrame(4, model, overhead(3.0))])

    def test_refusion_is_idempotent(self, room_table, room_camera, room_poses, room_gt, rng):
        frames = []
        for i, (p, gt) in enumerate(zip(room_poses[:6], room_gt)):
            lab, conf = synthetic.noisy_segmentation(gt, 5, 0.2, rng)
            frames.append(CameraFrame(i, room_camera, p, segmentation=SegmentationResult(lab, conf)))
        a = SparseSemanticTexture(256, 5)
        b = SparseSemanticTexture(256, 5)
        fuse_frames(a, room_table, frames)
        fuse_frames(b, room_table, frames)
        np.testing.assert_array_equal(a.dense_snapshot(), b.dense_snapshot())
        np.testing.assert_array_equal(a.weight, b.weight)

    def test_sweep_cadence_keeps_labels(self, room_table, room_camera, room_poses, room_gt, rng):
        frames = []
        for i, (p, gt) in enumerate(zip(room_poses[:8], room_gt)):
            lab, conf = synthetic.noisy_segmentation(gt, 5, 0.3, rng)
            frames.append(CameraFrame(i, room_camera, p, segmentation=SegmentationResult(lab, conf)))
        every = SparseSemanticTexture(256, 5)
        once = SparseSemanticTexture(256, 5)
        fuse_frames(every, room_table, frames, sweep_every=1)
        fuse_frames(once, room_table, frames, sweep_every=0)
        agree = every.fused_planes()[0] == once.fused_planes()[0]
        assert agree.mean() > 0.99


class TestColorWeight:
    def test_axis(self):
        w = color_weight([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], CameraModel(1, 1, 0, 0, 1, 1), overhead(2.0))
        assert w == pytest.approx(0.25)

    def test_vignetting_60(self):
        # point 60 degrees off axis at distance 1, normal facing the camera
        ang = np.radians(60.0)
        p = np.array([np.sin(ang), 0.0, 2.0 - np.cos(ang)])
        n = np.array([0.0, 0.0, 2.0]) - p
        w = color_weight(p, n, CameraModel(1, 1, 0, 0, 1, 1), overhead(2.0))
        assert w == pytest.approx(0.0625)

    def test_grazing(self):
        w = color_weight([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], CameraModel(1, 1, 0, 0, 1, 1), overhead(2.0))
        assert w == 0.0


class TestFuseColor:
    model = CameraModel(40, 40, 31.5, 31.5, 64, 64)

    def rgb(self, value):
        return np.full((64, 64, 3), value, dtype=np.uint8)

    def test_equal_weights_mean(self):
        t = floor_quad(half=0.5)
        tex = ColorTexture(64)
        fuse_color_frame(tex, t, self.model, overhead(2.0), self.rgb(100))
        fuse_color_frame(tex, t, self.model, overhead(2.0), self.rgb(200))
        np.testing.assert_allclose(tex.color[t.texel], 150.0 / 255.0, atol=1e-6)

    def test_weighted_mean(self):
        t = floor_quad(half=0.5)
        tex = ColorTexture(64)
        far, near = overhead(np.sqrt(3.0)), overhead(1.0)
        fuse_color_frame(tex, t, self.model, far, self.rgb(100))
        fuse_color_frame(tex, t, self.model, near, self.rgb(200))
        k = int(np.argmin(np.linalg.norm(t.positions, axis=1)))
        w1 = color_weight(t.positions[k], t.normals[k], self.model, far)
        w2 = color_weight(t.positions[k], t.normals[k], self.model, near)
        assert w2 / w1 == pytest.approx(3.0, rel=1e-3)
        expected = (w1 * 100 + w2 * 200) / (w1 + w2)
        np.testing.assert_allclose(tex.color[t.texel[k]] * 255.0, expected, rtol=1e-5)
        assert expected == pytest.approx(175.0, abs=0.05)

    def test_back_facing_unchanged(self):
        t = floor_quad(half=0.5)
        tex = ColorTexture(64)
        below = synthetic.look_at((0.0, 0.0, -2.0), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
        n = fuse_color_frame(tex, t, self.model, below, self.rgb(90))
        assert n > 0
        assert not tex.weight.any() and not tex.color.any()

    def test_constant_sequence(self, room_table, room_camera, room_poses):
        tex = ColorTexture(256)
        img = np.empty((room_camera.height, room_camera.width, 3), dtype=np.uint8)
        img[:] = (12, 34, 56)
        for p in room_poses[:5]:
            fuse_color_frame(tex, room_table, room_camera, p, img)
        seen = tex.weight > 0
        assert seen.any()
        np.testing.assert_allclose(tex.color[seen], np.tile([12.0, 34.0, 56.0], (seen.sum(), 1)) / 255.0, atol=1e-6)

    def test_save_load(self, tmp_path):
        tex = ColorTexture(16)
        tex.color[:] = 7.0
        tex.weight[3] = 2.0
        tex.save(tmp_path / "c.bin")
        back = ColorTexture.load(tmp_path / "c.bin")
        np.testing.assert_array_equal(back.color, tex.color)
        np.testing.assert_array_equal(back.weight, tex.weight)
